#pragma once

#include <cstdint>
#include <random>
#include <vector>

// Deterministic draws built directly on mt19937_64 raw output. The standard
// distribution objects are implementation-defined, so sequences would differ
// across standard libraries; these mappings are fixed here instead.

namespace mfssd::rng {

// Uniform double in [0, 1): top 53 bits of one raw draw.
inline double canonical(std::mt19937_64& g) {
  return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& g, double lo, double hi) {
  return lo + (hi - lo) * canonical(g);
}

// Uniform integer in [lo, hi], inclusive. Scaled-floor mapping; the clamp
// guards the half-ulp rounding edge at the top of the range.
inline std::int64_t uniform_int(std::mt19937_64& g, std::int64_t lo, std::int64_t hi) {
  const double span = static_cast<double>(hi - lo + 1);
  std::int64_t off = static_cast<std::int64_t>(canonical(g) * span);
  if (off > hi - lo) off = hi - lo;
  return lo + off;
}

// Fisher-Yates with the mapping above, so shuffles are reproducible too.
template <typename T>
void shuffle(std::vector<T>& v, std::mt19937_64& g) {
  for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
    const std::int64_t j = uniform_int(g, 0, i);
    std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
  }
}

}  // namespace mfssd::rng
