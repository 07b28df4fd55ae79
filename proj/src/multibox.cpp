#include "mfssd/multibox.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "mfssd/eval.hpp"

namespace mfssd {

namespace {

Box prior_corners(const PriorBox& p) {
  return Box{p.cx - p.w / 2, p.cy - p.h / 2, p.cx + p.w / 2, p.cy + p.h / 2};
}

// Per-level geometry recovered from the head tensors themselves.
struct HeadLayout {
  int batch = 0;
  int num_classes = 0;
  std::vector<int> fmaps, counts;
  std::vector<std::int64_t> offsets;  // flat prior offset per level
  std::int64_t total = 0;
};

HeadLayout derive_layout(std::span<const Shape> loc_shapes, std::span<const Shape> conf_shapes,
                         std::size_t prior_count, int num_classes) {
  if (loc_shapes.empty() || loc_shapes.size() != conf_shapes.size())
    throw ShapeError("multibox: need matching per-level loc/conf head lists");
  HeadLayout L;
  L.num_classes = num_classes;
  for (std::size_t i = 0; i < loc_shapes.size(); ++i) {
    const Shape& ls = loc_shapes[i];
    const Shape& cs = conf_shapes[i];
    if (ls.size() != 4 || cs.size() != 4)
      throw ShapeError("multibox: head maps must be rank-4 N,C,H,W");
    if (i == 0) L.batch = ls[0];
    if (ls[0] != L.batch || cs[0] != L.batch)
      throw ShapeError("multibox: head maps disagree on batch size");
    if (ls[2] != ls[3] || cs[2] != cs[3] || ls[2] != cs[2])
      throw ShapeError("multibox: head maps must be square and spatially paired");
    if (ls[1] % 4 != 0) throw ShapeError("multibox: loc channels must be a multiple of 4");
    const int n = ls[1] / 4;
    if (cs[1] != n * (num_classes + 1))
      throw ShapeError("multibox: conf channels " + std::to_string(cs[1]) +
                       " do not equal priors-per-cell * (classes+1) = " +
                       std::to_string(n * (num_classes + 1)));
    L.fmaps.push_back(ls[2]);
    L.counts.push_back(n);
    L.offsets.push_back(L.total);
    L.total += std::int64_t(ls[2]) * ls[2] * n;
  }
  if (L.total != static_cast<std::int64_t>(prior_count))
    throw ShapeError("multibox: heads describe " + std::to_string(L.total) +
                     " priors but the prior set has " + std::to_string(prior_count));
  return L;
}

// Gathers one image's maps into [P][stride] row-major doubles, where stride
// is 4 for loc or classes+1 for conf.
void flatten_image(const Tensor& feat, int image, int n_per_cell, int stride,
                   std::int64_t level_offset, std::vector<double>& out) {
  const int f = feat.dim(2);
  const int channels = feat.dim(1);
  const std::int64_t plane = std::int64_t(f) * f;
  auto read = [&](std::int64_t idx) {
    return feat.dtype() == DType::f32 ? double(feat.data<float>()[idx])
                                      : feat.data<double>()[idx];
  };
  const std::int64_t base = std::int64_t(image) * channels * plane;
  for (int i = 0; i < f; ++i)
    for (int j = 0; j < f; ++j)
      for (int p = 0; p < n_per_cell; ++p) {
        const std::int64_t prior = level_offset + (std::int64_t(i) * f + j) * n_per_cell + p;
        for (int c = 0; c < stride; ++c)
          out[prior * stride + c] = read(base + (std::int64_t(p) * stride + c) * plane +
                                         std::int64_t(i) * f + j);
      }
}

// Scatters per-prior gradients back into a head map's gradient buffer.
void scatter_image(Tensor& gfeat, int image, int n_per_cell, int stride,
                   std::int64_t level_offset, const std::vector<double>& grad, double scale) {
  const int f = gfeat.dim(2);
  const int channels = gfeat.dim(1);
  const std::int64_t plane = std::int64_t(f) * f;
  const std::int64_t base = std::int64_t(image) * channels * plane;
  for (int i = 0; i < f; ++i)
    for (int j = 0; j < f; ++j)
      for (int p = 0; p < n_per_cell; ++p) {
        const std::int64_t prior = level_offset + (std::int64_t(i) * f + j) * n_per_cell + p;
        for (int c = 0; c < stride; ++c) {
          const double g = grad[prior * stride + c] * scale;
          const std::int64_t idx =
              base + (std::int64_t(p) * stride + c) * plane + std::int64_t(i) * f + j;
          if (gfeat.dtype() == DType::f32)
            gfeat.data<float>()[idx] += static_cast<float>(g);
          else
            gfeat.data<double>()[idx] += g;
        }
      }
}

double smooth_l1(double x) { return std::fabs(x) < 1.0 ? 0.5 * x * x : std::fabs(x) - 0.5; }
double smooth_l1_grad(double x) { return std::fabs(x) < 1.0 ? x : (x > 0 ? 1.0 : -1.0); }

}  // namespace

std::vector<int> match_priors(const std::vector<PriorBox>& priors,
                              const std::vector<Annotation>& truths, double iou_threshold) {
  if (!(iou_threshold > 0) || !(iou_threshold < 1))
    throw ShapeError("match_priors: iou threshold must lie in (0,1)");
  std::vector<int> assign(priors.size(), -1);
  if (truths.empty()) return assign;

  std::vector<Box> pboxes(priors.size());
  for (std::size_t p = 0; p < priors.size(); ++p) pboxes[p] = prior_corners(priors[p]);

  std::vector<char> force_taken(priors.size(), 0);
  for (std::size_t t = 0; t < truths.size(); ++t) {
    int best = -1;
    double best_iou = -1;
    for (std::size_t p = 0; p < priors.size(); ++p) {
      if (force_taken[p]) continue;
      const double v = iou(pboxes[p], truths[t].box);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(p);
      }
    }
    if (best >= 0) {
      force_taken[best] = 1;
      assign[best] = static_cast<int>(t);
    }
  }

  for (std::size_t p = 0; p < priors.size(); ++p) {
    if (force_taken[p]) continue;
    int best = -1;
    double best_iou = 0;
    for (std::size_t t = 0; t < truths.size(); ++t) {
      const double v = iou(pboxes[p], truths[t].box);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(t);
      }
    }
    if (best >= 0 && best_iou >= iou_threshold) assign[p] = best;
  }
  return assign;
}

std::array<double, 4> encode_box(const Box& truth, const PriorBox& prior) {
  const double tcx = (truth.xmin + truth.xmax) / 2;
  const double tcy = (truth.ymin + truth.ymax) / 2;
  const double tw = truth.xmax - truth.xmin;
  const double th = truth.ymax - truth.ymin;
  if (!(tw > 0) || !(th > 0)) throw ShapeError("encode_box: degenerate truth box");
  return {(tcx - prior.cx) / (prior.w * kVarianceCenter),
          (tcy - prior.cy) / (prior.h * kVarianceCenter),
          std::log(tw / prior.w) / kVarianceSize, std::log(th / prior.h) / kVarianceSize};
}

Box decode_box(const std::array<double, 4>& o, const PriorBox& prior) {
  const double cx = prior.cx + o[0] * kVarianceCenter * prior.w;
  const double cy = prior.cy + o[1] * kVarianceCenter * prior.h;
  const double w = prior.w * std::exp(o[2] * kVarianceSize);
  const double h = prior.h * std::exp(o[3] * kVarianceSize);
  return Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_threshold) {
  if (boxes.size() != scores.size()) throw ShapeError("nms: boxes/scores length mismatch");
  if (!(iou_threshold > 0) || !(iou_threshold < 1))
    throw ShapeError("nms: iou threshold must lie in (0,1)");
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  std::vector<char> dead(boxes.size(), 0);
  std::vector<int> keep;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const int a = order[i];
    if (dead[a]) continue;
    keep.push_back(a);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const int b = order[j];
      if (!dead[b] && iou(boxes[a], boxes[b]) > iou_threshold) dead[b] = 1;
    }
  }
  return keep;
}

Var multibox_loss(std::span<const Var> loc_feats, std::span<const Var> conf_feats,
                  const std::vector<PriorBox>& priors,
                  const std::vector<std::vector<Annotation>>& truths, int num_classes,
                  double iou_threshold, double neg_pos_ratio,
                  MultiboxBreakdown* breakdown) {
  if (loc_feats.empty()) throw ShapeError("multibox: no head outputs");
  Tape& tape = *loc_feats[0].tape;

  std::vector<Shape> loc_shapes, conf_shapes;
  for (Var v : loc_feats) loc_shapes.push_back(tape.value(v).shape());
  for (Var v : conf_feats) conf_shapes.push_back(tape.value(v).shape());
  const HeadLayout L = derive_layout(loc_shapes, conf_shapes, priors.size(), num_classes);
  if (static_cast<int>(truths.size()) != L.batch)
    throw ShapeError("multibox: truth list count must equal the batch size");
  if (neg_pos_ratio < 0) throw ShapeError("multibox: neg_pos_ratio must be non-negative");

  const int C1 = num_classes + 1;
  const std::int64_t P = L.total;

  // Dense per-image gradient staging, kept alive for the backward pass.
  struct Saved {
    std::vector<std::vector<double>> dloc, dconf;  // per image, [P*4] / [P*C1]
    HeadLayout layout;
  };
  auto saved = std::make_shared<Saved>();
  saved->layout = L;
  saved->dloc.assign(L.batch, std::vector<double>(P * 4, 0.0));
  saved->dconf.assign(L.batch, std::vector<double>(P * C1, 0.0));

  double loc_sum = 0, conf_sum = 0;
  std::int64_t n_match = 0;

  std::vector<double> loc_flat(P * 4), conf_flat(P * C1);
  std::vector<double> log_probs(C1);
  for (int img = 0; img < L.batch; ++img) {
    for (std::size_t lv = 0; lv < loc_feats.size(); ++lv) {
      flatten_image(tape.value(loc_feats[lv]), img, L.counts[lv], 4, L.offsets[lv], loc_flat);
      flatten_image(tape.value(conf_feats[lv]), img, L.counts[lv], C1, L.offsets[lv],
                    conf_flat);
    }
    for (double v : conf_flat)
      if (!std::isfinite(v))
        throw NumericError("multibox: non-finite confidence logits in image " +
                           std::to_string(img));
    for (double v : loc_flat)
      if (!std::isfinite(v))
        throw NumericError("multibox: non-finite location offsets in image " +
                           std::to_string(img));

    const std::vector<int> assign = match_priors(priors, truths[img], iou_threshold);
    std::vector<std::int64_t> positives;
    for (std::int64_t p = 0; p < P; ++p)
      if (assign[p] >= 0) positives.push_back(p);
    if (positives.empty()) continue;
    n_match += static_cast<std::int64_t>(positives.size());

    auto& dloc = saved->dloc[img];
    auto& dconf = saved->dconf[img];

    // Localization term over positives.
    for (std::int64_t p : positives) {
      const auto target = encode_box(truths[img][assign[p]].box, priors[p]);
      for (int c = 0; c < 4; ++c) {
        const double diff = loc_flat[p * 4 + c] - target[c];
        loc_sum += smooth_l1(diff);
        dloc[p * 4 + c] = smooth_l1_grad(diff);
      }
    }

    // Classification term: positives plus the hardest negatives by
    // background loss, at most neg_pos_ratio per positive.
    auto class_loss = [&](std::int64_t p, int label, bool want_grad) {
      double mx = conf_flat[p * C1];
      for (int k = 1; k < C1; ++k) mx = std::max(mx, conf_flat[p * C1 + k]);
      double sum = 0;
      for (int k = 0; k < C1; ++k) sum += std::exp(conf_flat[p * C1 + k] - mx);
      const double lse = mx + std::log(sum);
      if (want_grad)
        for (int k = 0; k < C1; ++k)
          dconf[p * C1 + k] =
              std::exp(conf_flat[p * C1 + k] - lse) - (k == label ? 1.0 : 0.0);
      return lse - conf_flat[p * C1 + label];
    };

    for (std::int64_t p : positives) conf_sum += class_loss(p, truths[img][assign[p]].cls, true);

    std::vector<std::pair<double, std::int64_t>> neg;  // (bg loss, prior)
    for (std::int64_t p = 0; p < P; ++p)
      if (assign[p] < 0) neg.emplace_back(class_loss(p, 0, false), p);
    std::sort(neg.begin(), neg.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    const std::size_t want =
        std::min(neg.size(), static_cast<std::size_t>(neg_pos_ratio * positives.size()));
    for (std::size_t i = 0; i < want; ++i) conf_sum += class_loss(neg[i].second, 0, true);
  }

  const double total = n_match > 0 ? (loc_sum + conf_sum) / double(n_match) : 0.0;
  if (breakdown) {
    breakdown->loc = loc_sum;
    breakdown->conf = conf_sum;
    breakdown->n_match = static_cast<int>(n_match);
  }

  std::vector<Var> inputs(loc_feats.begin(), loc_feats.end());
  inputs.insert(inputs.end(), conf_feats.begin(), conf_feats.end());
  const std::size_t n_levels = loc_feats.size();
  const double inv_n = n_match > 0 ? 1.0 / double(n_match) : 0.0;

  return tape.record(
      Tensor::full(Shape{1}, total, tape.dtype()), std::move(inputs),
      [saved, n_levels, inv_n](Tape& tp, int node) {
        const double g = tp.node_grad(node).at(0) * inv_n;
        if (g == 0.0) return;
        const auto& in = tp.inputs_of(node);
        const HeadLayout& L = saved->layout;
        for (std::size_t lv = 0; lv < n_levels; ++lv) {
          Var locv{&tp, in[lv]};
          Var confv{&tp, in[n_levels + lv]};
          for (int img = 0; img < L.batch; ++img) {
            if (tp.requires_grad(locv))
              scatter_image(tp.grad_buffer(locv), img, L.counts[lv], 4, L.offsets[lv],
                            saved->dloc[img], g);
            if (tp.requires_grad(confv))
              scatter_image(tp.grad_buffer(confv), img, L.counts[lv], L.num_classes + 1,
                            L.offsets[lv], saved->dconf[img], g);
          }
        }
      });
}

std::vector<Detection> decode_detections(std::span<const Tensor> loc_feats,
                                         std::span<const Tensor> conf_feats, int image_index,
                                         const std::vector<PriorBox>& priors, int num_classes,
                                         double score_threshold, double nms_iou, int top_k) {
  if (!(score_threshold > 0) || !(score_threshold < 1) || !(nms_iou > 0) || !(nms_iou < 1))
    throw ShapeError("decode: thresholds must lie in (0,1)");
  if (top_k < 1) throw ShapeError("decode: top_k must be positive");

  std::vector<Shape> loc_shapes, conf_shapes;
  for (const Tensor& t : loc_feats) loc_shapes.push_back(t.shape());
  for (const Tensor& t : conf_feats) conf_shapes.push_back(t.shape());
  const HeadLayout L = derive_layout(loc_shapes, conf_shapes, priors.size(), num_classes);
  if (image_index < 0 || image_index >= L.batch)
    throw ShapeError("decode: image index out of range");

  const int C1 = num_classes + 1;
  const std::int64_t P = L.total;
  std::vector<double> loc_flat(P * 4), conf_flat(P * C1);
  for (std::size_t lv = 0; lv < loc_feats.size(); ++lv) {
    flatten_image(loc_feats[lv], image_index, L.counts[lv], 4, L.offsets[lv], loc_flat);
    flatten_image(conf_feats[lv], image_index, L.counts[lv], C1, L.offsets[lv], conf_flat);
  }

  // Softmax scores per prior.
  std::vector<double> scores(P * C1);
  for (std::int64_t p = 0; p < P; ++p) {
    double mx = conf_flat[p * C1];
    for (int k = 1; k < C1; ++k) mx = std::max(mx, conf_flat[p * C1 + k]);
    double sum = 0;
    for (int k = 0; k < C1; ++k) sum += std::exp(conf_flat[p * C1 + k] - mx);
    for (int k = 0; k < C1; ++k) scores[p * C1 + k] = std::exp(conf_flat[p * C1 + k] - mx) / sum;
  }

  struct Cand {
    int cls;
    std::int64_t prior;
    double score;
    Box box;
  };
  std::vector<Cand> kept;
  for (int cls = 1; cls <= num_classes; ++cls) {
    std::vector<Box> boxes;
    std::vector<double> cls_scores;
    std::vector<std::int64_t> cls_priors;
    for (std::int64_t p = 0; p < P; ++p) {
      const double s = scores[p * C1 + cls];
      if (s < score_threshold) continue;
      Box b = decode_box({loc_flat[p * 4], loc_flat[p * 4 + 1], loc_flat[p * 4 + 2],
                          loc_flat[p * 4 + 3]},
                         priors[p]);
      b.xmin = std::clamp(b.xmin, 0.0, 1.0);
      b.ymin = std::clamp(b.ymin, 0.0, 1.0);
      b.xmax = std::clamp(b.xmax, 0.0, 1.0);
      b.ymax = std::clamp(b.ymax, 0.0, 1.0);
      if (!(b.xmax > b.xmin) || !(b.ymax > b.ymin)) continue;
      boxes.push_back(b);
      cls_scores.push_back(s);
      cls_priors.push_back(p);
    }
    for (int idx : nms(boxes, cls_scores, nms_iou))
      kept.push_back({cls, cls_priors[idx], cls_scores[idx], boxes[idx]});
  }

  std::sort(kept.begin(), kept.end(), [](const Cand& a, const Cand& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.cls != b.cls) return a.cls < b.cls;
    return a.prior < b.prior;
  });
  if (static_cast<int>(kept.size()) > top_k) kept.resize(top_k);

  std::vector<Detection> out;
  out.reserve(kept.size());
  for (const Cand& c : kept) out.push_back({c.cls, c.score, c.box});
  return out;
}

}  // namespace mfssd
