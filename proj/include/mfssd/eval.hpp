#pragma once

#include <map>
#include <optional>
#include <vector>

#include "mfssd/detector.hpp"

namespace mfssd {

double iou(const Box& a, const Box& b);

/// One detection attributed to an image, as average_precision consumes it.
struct ScoredDetection {
  int image_id = 0;
  double score = 0;
  Box box;
};

struct ImageTruth {
  int image_id = 0;
  Box box;
};

/// VOC-style AP with all-points interpolation. Detections are sorted by
/// descending score (ties by image id then insertion index) and greedily
/// matched to the highest-IoU unmatched truth of the same image at or above
/// the threshold. Returns nullopt when the class has no ground truths.
std::optional<double> average_precision(std::vector<ScoredDetection> dets,
                                        const std::vector<ImageTruth>& truths,
                                        double iou_threshold);

struct EvalResult {
  double map = 0;
  std::map<int, double> per_class;  // class id -> AP, classes with >= 1 truth
  std::optional<double> ap_small, ap_medium, ap_large;
  double iou_threshold = 0.5;
};

/// Per-image detections/annotations indexed in lockstep. Size buckets come
/// from ground-truth pixel areas: small < 32^2, medium < 96^2, large the
/// rest; a bucket's AP ignores detections matched to out-of-bucket truths.
EvalResult evaluate_map(const std::vector<std::vector<Detection>>& detections,
                        const std::vector<std::vector<Annotation>>& annotations,
                        const std::vector<std::vector<std::int64_t>>& truth_pixel_areas,
                        double iou_threshold);

}  // namespace mfssd
