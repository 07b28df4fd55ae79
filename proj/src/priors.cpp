#include "mfssd/priors.hpp"

#include <cmath>
#include <string>

namespace mfssd {

std::int64_t prior_total(const PriorConfig& cfg) {
  std::int64_t total = 0;
  for (std::size_t k = 0; k < cfg.fmaps.size(); ++k)
    total += std::int64_t(cfg.fmaps[k]) * cfg.fmaps[k] * cfg.counts[k];
  return total;
}

std::vector<PriorBox> generate_priors(const PriorConfig& cfg) {
  const std::size_t m = cfg.fmaps.size();
  if (m == 0 || cfg.counts.size() != m)
    throw ShapeError("priors: fmaps and counts must be non-empty and equal-length");
  if (!(cfg.s_min > 0) || !(cfg.s_max <= 1) || cfg.s_min > cfg.s_max)
    throw ShapeError("priors: scales must satisfy 0 < s_min <= s_max <= 1");
  for (std::size_t k = 0; k < m; ++k) {
    if (cfg.fmaps[k] < 1) throw ShapeError("priors: feature map side must be positive");
    if (cfg.counts[k] != 4 && cfg.counts[k] != 6)
      throw ShapeError("priors: per-cell count must be 4 or 6, got " +
                       std::to_string(cfg.counts[k]));
  }

  auto scale_at = [&](std::size_t k) {  // 1-indexed level; k = m+1 extends to 1.0
    if (k > m) return 1.0;
    if (m == 1) return cfg.s_min;
    return cfg.s_min + (cfg.s_max - cfg.s_min) * double(k - 1) / double(m - 1);
  };

  std::vector<PriorBox> out;
  out.reserve(static_cast<std::size_t>(prior_total(cfg)));
  for (std::size_t k = 1; k <= m; ++k) {
    const int f = cfg.fmaps[k - 1];
    const int n = cfg.counts[k - 1];
    const double s = scale_at(k);
    const double s_extra = std::sqrt(s * scale_at(k + 1));
    for (int i = 0; i < f; ++i) {
      for (int j = 0; j < f; ++j) {
        const double cx = (j + 0.5) / f;
        const double cy = (i + 0.5) / f;
        out.push_back({cx, cy, s, s});
        out.push_back({cx, cy, s_extra, s_extra});
        const int pairs = (n - 2) / 2;
        for (int p = 0; p < pairs; ++p) {
          const double r = p == 0 ? 2.0 : 3.0;
          const double sr = std::sqrt(r);
          out.push_back({cx, cy, s * sr, s / sr});
          out.push_back({cx, cy, s / sr, s * sr});
        }
      }
    }
  }
  return out;
}

}  // namespace mfssd
