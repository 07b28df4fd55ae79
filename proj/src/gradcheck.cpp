#include "mfssd/gradcheck.hpp"

#include <cmath>
#include <sstream>

namespace mfssd {

namespace {

double eval_loss(const GradCheckFn& fn, const std::vector<Tensor>& inputs) {
  Tape tape(DType::f64);
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t, false));
  Var loss = fn(tape, leaves);
  const Tensor& lv = tape.value(loss);
  if (lv.numel() != 1)
    throw ShapeError("gradcheck: loss must be scalar, got shape " + shape_str(lv.shape()));
  return lv.at(0);
}

}  // namespace

GradCheckResult finite_diff_check(const GradCheckFn& fn, std::vector<Tensor> inputs,
                                  double step, double tol) {
  for (Tensor& t : inputs) t = t.astype(DType::f64);

  // Analytic pass.
  Tape tape(DType::f64);
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t, true));
  Var loss = fn(tape, leaves);
  tape.backward(loss);

  std::vector<Tensor> analytic;
  analytic.reserve(leaves.size());
  for (Var v : leaves) analytic.push_back(tape.grad(v));

  GradCheckResult res;
  res.ok = true;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    for (std::int64_t i = 0; i < inputs[ti].numel(); ++i) {
      const double orig = inputs[ti].at(i);
      inputs[ti].set(i, orig + step);
      const double lp = eval_loss(fn, inputs);
      inputs[ti].set(i, orig - step);
      const double lm = eval_loss(fn, inputs);
      inputs[ti].set(i, orig);

      const double numeric = (lp - lm) / (2.0 * step);
      const double a = analytic[ti].at(i);
      const double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
      const double rel = std::fabs(a - numeric) / denom;

      const bool finite = std::isfinite(a) && std::isfinite(numeric);
      if (finite && rel <= tol) {
        res.max_rel_err = std::max(res.max_rel_err, rel);
        continue;
      }
      res.ok = false;
      res.max_rel_err = std::max(res.max_rel_err, rel);
      if (res.detail.empty()) {
        std::ostringstream os;
        os << "input " << ti << " element " << i << ": analytic " << a << " vs numeric "
           << numeric << " (rel err " << rel << ")";
        if (!finite) os << " [non-finite]";
        res.detail = os.str();
      }
    }
  }
  return res;
}

}  // namespace mfssd
