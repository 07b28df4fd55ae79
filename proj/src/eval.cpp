#include "mfssd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace mfssd {

double iou(const Box& a, const Box& b) {
  if (!(a.xmax > a.xmin) || !(a.ymax > a.ymin) || !(b.xmax > b.xmin) || !(b.ymax > b.ymin))
    throw ShapeError("iou: degenerate box");
  const double ix = std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin);
  const double iy = std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  const double area_a = (a.xmax - a.xmin) * (a.ymax - a.ymin);
  const double area_b = (b.xmax - b.xmin) * (b.ymax - b.ymin);
  return inter / (area_a + area_b - inter);
}

namespace {

struct ApOutcome {
  std::optional<double> ap;
  // Per detection (input order): matched truth index into `truths`, or -1.
  std::vector<int> matched_truth;
};

// Greedy score-ranked matching, then all-points PR integration.
ApOutcome ap_impl(const std::vector<ScoredDetection>& dets,
                  const std::vector<ImageTruth>& truths, double iou_threshold) {
  ApOutcome out;
  out.matched_truth.assign(dets.size(), -1);

  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int x, int y) {
    if (dets[x].score != dets[y].score) return dets[x].score > dets[y].score;
    if (dets[x].image_id != dets[y].image_id) return dets[x].image_id < dets[y].image_id;
    return x < y;
  });

  std::vector<char> truth_used(truths.size(), 0);
  std::vector<char> is_tp(dets.size(), 0);
  for (int di : order) {
    int best = -1;
    double best_iou = 0;
    for (std::size_t ti = 0; ti < truths.size(); ++ti) {
      if (truth_used[ti] || truths[ti].image_id != dets[di].image_id) continue;
      const double v = iou(dets[di].box, truths[ti].box);
      if (v >= iou_threshold && v > best_iou) {
        best_iou = v;
        best = static_cast<int>(ti);
      }
    }
    if (best >= 0) {
      truth_used[best] = 1;
      out.matched_truth[di] = best;
      is_tp[di] = 1;
    }
  }

  if (truths.empty()) return out;  // ap stays undefined

  // PR curve in rank order with precision made monotone from the right.
  std::vector<double> recall, precision;
  int tp = 0, fp = 0;
  for (int di : order) {
    if (is_tp[di]) ++tp; else ++fp;
    recall.push_back(double(tp) / double(truths.size()));
    precision.push_back(double(tp) / double(tp + fp));
  }
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
    precision[i] = std::max(precision[i], precision[i + 1]);

  double ap = 0, prev_r = 0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_r) * precision[i];
    prev_r = recall[i];
  }
  out.ap = ap;
  return out;
}

}  // namespace

std::optional<double> average_precision(std::vector<ScoredDetection> dets,
                                        const std::vector<ImageTruth>& truths,
                                        double iou_threshold) {
  if (!(iou_threshold > 0) || !(iou_threshold < 1))
    throw ShapeError("average_precision: iou threshold must lie in (0,1)");
  return ap_impl(dets, truths, iou_threshold).ap;
}

EvalResult evaluate_map(const std::vector<std::vector<Detection>>& detections,
                        const std::vector<std::vector<Annotation>>& annotations,
                        const std::vector<std::vector<std::int64_t>>& truth_pixel_areas,
                        double iou_threshold) {
  if (annotations.empty()) throw ShapeError("evaluate_map: empty test set");
  if (detections.size() != annotations.size() || truth_pixel_areas.size() != annotations.size())
    throw ShapeError("evaluate_map: detections/annotations/areas must be index-aligned");
  for (std::size_t i = 0; i < annotations.size(); ++i)
    if (truth_pixel_areas[i].size() != annotations[i].size())
      throw ShapeError("evaluate_map: per-image area list misaligned with annotations");

  std::set<int> classes;
  for (const auto& img : annotations)
    for (const auto& a : img) classes.insert(a.cls);

  constexpr std::int64_t kSmallMax = 32 * 32;   // exclusive
  constexpr std::int64_t kMediumMax = 96 * 96;  // exclusive
  auto bucket_of = [&](std::int64_t area) { return area < kSmallMax ? 0 : area < kMediumMax ? 1 : 2; };

  EvalResult res;
  res.iou_threshold = iou_threshold;

  double ap_sum = 0;
  int ap_cnt = 0;
  double bucket_sum[3] = {0, 0, 0};
  int bucket_cnt[3] = {0, 0, 0};

  for (int cls : classes) {
    std::vector<ScoredDetection> dets;
    std::vector<ImageTruth> truths;
    std::vector<int> truth_bucket;
    for (std::size_t img = 0; img < annotations.size(); ++img) {
      for (const auto& d : detections[img])
        if (d.cls == cls) dets.push_back({static_cast<int>(img), d.score, d.box});
      for (std::size_t t = 0; t < annotations[img].size(); ++t)
        if (annotations[img][t].cls == cls) {
          truths.push_back({static_cast<int>(img), annotations[img][t].box});
          truth_bucket.push_back(bucket_of(truth_pixel_areas[img][t]));
        }
    }
    if (truths.empty()) continue;

    const ApOutcome full = ap_impl(dets, truths, iou_threshold);
    res.per_class[cls] = *full.ap;
    ap_sum += *full.ap;
    ++ap_cnt;

    for (int b = 0; b < 3; ++b) {
      std::vector<ImageTruth> btruths;
      for (std::size_t t = 0; t < truths.size(); ++t)
        if (truth_bucket[t] == b) btruths.push_back(truths[t]);
      if (btruths.empty()) continue;
      // Detections matched to an out-of-bucket truth are ignored, the rest
      // are re-evaluated against the bucket's truths alone.
      std::vector<ScoredDetection> bdets;
      for (std::size_t d = 0; d < dets.size(); ++d) {
        const int mt = full.matched_truth[d];
        if (mt >= 0 && truth_bucket[mt] != b) continue;
        bdets.push_back(dets[d]);
      }
      const ApOutcome bo = ap_impl(bdets, btruths, iou_threshold);
      bucket_sum[b] += *bo.ap;
      ++bucket_cnt[b];
    }
  }

  res.map = ap_cnt ? ap_sum / ap_cnt : 0.0;
  if (bucket_cnt[0]) res.ap_small = bucket_sum[0] / bucket_cnt[0];
  if (bucket_cnt[1]) res.ap_medium = bucket_sum[1] / bucket_cnt[1];
  if (bucket_cnt[2]) res.ap_large = bucket_sum[2] / bucket_cnt[2];
  return res;
}

}  // namespace mfssd
