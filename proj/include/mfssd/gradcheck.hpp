#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mfssd/autodiff.hpp"

namespace mfssd {

struct GradCheckResult {
  bool ok = false;
  double max_rel_err = 0.0;
  std::string detail;  // empty on success, else which input/index failed and why
};

/// Builds a scalar loss from leaves created on the given tape, in the same
/// order as the input tensors. Must be pure: same inputs, same loss.
using GradCheckFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Central-difference check of every element of every input against the
/// tape's analytic gradient. Relative error is |a - n| / max(1, |a|, |n|).
/// Inputs are converted to f64 internally regardless of their dtype.
GradCheckResult finite_diff_check(const GradCheckFn& fn, std::vector<Tensor> inputs,
                                  double step = 1e-5, double tol = 1e-6);

}  // namespace mfssd
