#pragma once

#include <cstdint>
#include <vector>

#include "mfssd/errors.hpp"

namespace mfssd {

/// Anchor box in normalized center form. w/h may exceed 1 before clipping.
struct PriorBox {
  double cx, cy, w, h;
};

struct PriorConfig {
  std::vector<int> fmaps;   // per-level feature-map side lengths f_k
  std::vector<int> counts;  // per-level priors per cell, each 4 or 6
  double s_min = 0.1;
  double s_max = 0.7;
};

std::int64_t prior_total(const PriorConfig& cfg);  // sum over levels of f_k^2 * n_k

/// Priors grouped by level, row-major over cells, aspect-ratio-major within a
/// cell. Per cell: scale s_k at ratio 1, the extra sqrt(s_k*s_{k+1}) box,
/// then ratio pairs 2, 1/2 (and 3, 1/3 when n_k = 6); w = s*sqrt(r),
/// h = s/sqrt(r). The level scales interpolate linearly from s_min to s_max;
/// the extra box of the last level uses s_{m+1} = 1.
std::vector<PriorBox> generate_priors(const PriorConfig& cfg);

}  // namespace mfssd
