#pragma once

#include <map>
#include <ostream>
#include <vector>

#include "mfssd/detector.hpp"
#include "mfssd/graph.hpp"

namespace mfssd {

struct TrainConfig {
  double base_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<int> lr_step_epochs = {30, 45};
  double lr_step_factor = 0.1;
  int warmup_epochs = 1;
  double sparsity_lambda = 0.0;  // L1 pull on batchnorm scaling factors
  int epochs = 60;
  int batch_size = 16;
  int max_steps = 0;  // 0 = run every epoch to completion
  double iou_threshold = 0.5;
  double neg_pos_ratio = 3.0;
  std::uint64_t seed = 0;
};

/// Piecewise schedule: the first warmup_epochs*steps_per_epoch steps climb
/// linearly from base_lr/100 toward base_lr, after which the rate is base_lr
/// scaled by lr_step_factor once per milestone epoch reached.
double lr_at(const TrainConfig& cfg, int epoch, int step_in_epoch, int steps_per_epoch);

/// Momentum-SGD buffers, one per trainable tensor ("node.w", "node.gamma", ...).
struct SgdState {
  std::map<std::string, Tensor> velocity;
};

/// One update from the gradients on the tape: g' = grad + weight_decay * p
/// (decay skipped for batchnorm gamma/beta, which instead receive the
/// sparsity subgradient lambda * sign(gamma)), v <- momentum * v + g',
/// p <- p - lr * v, applied in place to `ps`. Any non-finite gradient
/// rejects the whole step with NumericError before touching parameters.
void sgd_step(const GraphSpec& g, ParamStore& ps, const Tape& tape, const TapeBindings& binds,
              SgdState& state, double lr, double momentum, double weight_decay,
              double sparsity_lambda);

double bn_sparsity_penalty(const GraphSpec& g, const ParamStore& ps, double lambda);

/// Distribution of |gamma| across every batchnorm in the graph.
struct GammaStats {
  double min = 0, median = 0, max = 0;
  double frac_below_001 = 0;  // share with |gamma| < 0.01
  std::int64_t count = 0;
};
GammaStats gamma_stats(const GraphSpec& g, const ParamStore& ps);

struct TrainDataset {
  std::vector<Tensor> images;  // [3,H,W], values in [0,1]
  std::vector<std::vector<Annotation>> annotations;
};

struct TrainResult {
  std::vector<double> epoch_loss;  // mean per-step loss, penalty excluded
  int steps = 0;
  double final_penalty = 0;
};

/// Full training loop: seeded per-epoch shuffles, fixed-size batches (a
/// trailing partial batch is dropped), forward/backward over the detector
/// graph with the multibox loss, and an SGD update per step. When `log` is
/// given, one JSON line per epoch records {epoch, loss, penalty, lr,
/// gamma_min, gamma_median, gamma_max, gamma_frac_below_0p01}. A non-finite
/// loss aborts with NumericError naming the step.
TrainResult train_detector(const Detector& det, ParamStore& ps, const TrainDataset& data,
                           const TrainConfig& cfg, std::ostream* log = nullptr);

}  // namespace mfssd
