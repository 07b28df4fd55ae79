#pragma once

#include <array>
#include <span>
#include <vector>

#include "mfssd/autodiff.hpp"
#include "mfssd/detector.hpp"
#include "mfssd/priors.hpp"

namespace mfssd {

// Offset-encoding variances shared by the loss and the decoder.
inline constexpr double kVarianceCenter = 0.1;
inline constexpr double kVarianceSize = 0.2;

/// Per-prior assignment: index into the truth list, or -1 for background.
/// Every truth is first force-matched to its best prior (truths in index
/// order, ties to the lower prior index); remaining priors then match their
/// best truth when IoU >= threshold.
std::vector<int> match_priors(const std::vector<PriorBox>& priors,
                              const std::vector<Annotation>& truths, double iou_threshold);

std::array<double, 4> encode_box(const Box& truth, const PriorBox& prior);
Box decode_box(const std::array<double, 4>& offsets, const PriorBox& prior);  // unclipped

/// Greedy suppression: repeatedly keep the highest-scoring remaining box
/// (ties to the lower index), discarding boxes whose IoU with it exceeds the
/// threshold. Returns kept indices in keep order.
std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_threshold);

struct MultiboxBreakdown {
  double loc = 0;   // summed smooth-L1 before the 1/N normalization
  double conf = 0;  // summed cross-entropy before the 1/N normalization
  int n_match = 0;
};

/// Detection loss over raw head outputs, recorded on the tape as one node.
///
/// Head layout contract: each level's loc map is [N, n_k*4, f_k, f_k] and its
/// conf map [N, n_k*(classes+1), f_k, f_k]; flat prior index runs level-major,
/// row-major over cells, prior-within-cell last, and channel p*4+c (or
/// p*(classes+1)+k) holds prior p's c-th offset (k-th logit). Levels must
/// jointly account for every prior.
///
/// loss = (smoothL1(loc) over matched priors + softmax cross-entropy over
/// matched priors plus per-image hardest negatives, at most neg_pos_ratio per
/// positive) / total matches across the batch; zero when nothing matches.
Var multibox_loss(std::span<const Var> loc_feats, std::span<const Var> conf_feats,
                  const std::vector<PriorBox>& priors,
                  const std::vector<std::vector<Annotation>>& truths, int num_classes,
                  double iou_threshold, double neg_pos_ratio,
                  MultiboxBreakdown* breakdown = nullptr);

/// Eval-path inverse of the head layout above for one image of a batch:
/// softmax scores, per-class score filter and NMS, then a global top_k cut.
/// Output sorted by descending score, ties by (class id, prior index); boxes
/// clipped to [0,1] with degenerate clips dropped.
std::vector<Detection> decode_detections(std::span<const Tensor> loc_feats,
                                         std::span<const Tensor> conf_feats, int image_index,
                                         const std::vector<PriorBox>& priors, int num_classes,
                                         double score_threshold, double nms_iou, int top_k);

}  // namespace mfssd
