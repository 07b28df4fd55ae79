#include "mfssd/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "json.hpp"
#include "mfssd/multibox.hpp"
#include "mfssd/rng.hpp"

namespace mfssd {

namespace {

double sign(double x) { return x > 0 ? 1.0 : x < 0 ? -1.0 : 0.0; }

void check_finite(const Tape& tape, Var v, const std::string& name) {
  if (!tape.grad(v).all_finite())
    throw NumericError("sgd: non-finite gradient for " + name + ", step rejected");
}

void update(Tensor& param, const Tensor& grad, Tensor& vel, double lr, double momentum,
            double decay, double l1) {
  for (std::int64_t i = 0; i < param.numel(); ++i) {
    const double p = param.at(i);
    double g = grad.at(i) + decay * p + l1 * sign(p);
    const double v = momentum * vel.at(i) + g;
    vel.set(i, v);
    param.set(i, p - lr * v);
  }
}

}  // namespace

double lr_at(const TrainConfig& cfg, int epoch, int step_in_epoch, int steps_per_epoch) {
  if (steps_per_epoch < 1) throw ShapeError("lr_at: steps_per_epoch must be positive");
  const std::int64_t global = std::int64_t(epoch) * steps_per_epoch + step_in_epoch;
  const std::int64_t warm = std::int64_t(cfg.warmup_epochs) * steps_per_epoch;
  if (global < warm) {
    const double lr0 = cfg.base_lr / 100.0;
    return lr0 + (cfg.base_lr - lr0) * double(global) / double(warm);
  }
  double lr = cfg.base_lr;
  for (int milestone : cfg.lr_step_epochs)
    if (epoch >= milestone) lr *= cfg.lr_step_factor;
  return lr;
}

void sgd_step(const GraphSpec& g, ParamStore& ps, const Tape& tape, const TapeBindings& binds,
              SgdState& state, double lr, double momentum, double weight_decay,
              double sparsity_lambda) {
  for (const auto& [name, v] : binds.conv_w) check_finite(tape, v, name + ".w");
  for (const auto& [name, v] : binds.conv_b) check_finite(tape, v, name + ".b");
  for (const auto& [name, v] : binds.bn_gamma) check_finite(tape, v, name + ".gamma");
  for (const auto& [name, v] : binds.bn_beta) check_finite(tape, v, name + ".beta");

  auto vel = [&](const std::string& key, const Tensor& like) -> Tensor& {
    auto it = state.velocity.find(key);
    if (it == state.velocity.end())
      it = state.velocity.emplace(key, Tensor::zeros(like.shape(), like.dtype())).first;
    return it->second;
  };
  for (const auto& [name, v] : binds.conv_w)
    update(ps.conv.at(name).weight, tape.grad(v), vel(name + ".w", ps.conv.at(name).weight),
           lr, momentum, weight_decay, 0);
  for (const auto& [name, v] : binds.conv_b)
    update(ps.conv.at(name).bias, tape.grad(v), vel(name + ".b", ps.conv.at(name).bias), lr,
           momentum, weight_decay, 0);
  for (const auto& [name, v] : binds.bn_gamma)
    update(ps.bn.at(name).gamma, tape.grad(v), vel(name + ".gamma", ps.bn.at(name).gamma), lr,
           momentum, 0, sparsity_lambda);
  for (const auto& [name, v] : binds.bn_beta)
    update(ps.bn.at(name).beta, tape.grad(v), vel(name + ".beta", ps.bn.at(name).beta), lr,
           momentum, 0, 0);
  (void)g;
}

double bn_sparsity_penalty(const GraphSpec& g, const ParamStore& ps, double lambda) {
  double sum = 0;
  for (const auto& node : g.nodes) {
    if (node.kind != NodeKind::batchnorm) continue;
    const Tensor& gamma = ps.bn.at(node.name).gamma;
    for (std::int64_t i = 0; i < gamma.numel(); ++i) sum += std::fabs(gamma.at(i));
  }
  return lambda * sum;
}

GammaStats gamma_stats(const GraphSpec& g, const ParamStore& ps) {
  std::vector<double> mags;
  for (const auto& node : g.nodes) {
    if (node.kind != NodeKind::batchnorm) continue;
    const Tensor& gamma = ps.bn.at(node.name).gamma;
    for (std::int64_t i = 0; i < gamma.numel(); ++i) mags.push_back(std::fabs(gamma.at(i)));
  }
  GammaStats s;
  s.count = static_cast<std::int64_t>(mags.size());
  if (mags.empty()) return s;
  std::sort(mags.begin(), mags.end());
  s.min = mags.front();
  s.max = mags.back();
  const std::size_t n = mags.size();
  s.median = n % 2 ? mags[n / 2] : (mags[n / 2 - 1] + mags[n / 2]) / 2.0;
  std::int64_t below = 0;
  for (double m : mags)
    if (m < 0.01) ++below;
  s.frac_below_001 = double(below) / double(n);
  return s;
}

TrainResult train_detector(const Detector& det, ParamStore& ps, const TrainDataset& data,
                           const TrainConfig& cfg, std::ostream* log) {
  if (data.images.empty()) throw ShapeError("train: empty dataset");
  if (data.images.size() != data.annotations.size())
    throw ShapeError("train: images/annotations misaligned");
  if (cfg.batch_size < 1 || cfg.epochs < 0)
    throw ShapeError("train: batch_size must be positive and epochs non-negative");
  const int spe = static_cast<int>(data.images.size()) / cfg.batch_size;
  if (spe < 1) throw ShapeError("train: batch size exceeds the dataset");
  const Shape img_shape = data.images[0].shape();
  for (const Tensor& img : data.images)
    if (img.shape() != img_shape) throw ShapeError("train: images disagree on shape");

  const std::size_t n_levels = det.loc_heads.size();
  const int B = cfg.batch_size;
  const std::int64_t per_image = shape_numel(img_shape);

  std::mt19937_64 order_rng(cfg.seed);
  std::vector<int> order(data.images.size());
  std::iota(order.begin(), order.end(), 0);

  SgdState sgd;
  TrainResult result;
  bool stop = false;
  for (int epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    rng::shuffle(order, order_rng);
    double loss_sum = 0;
    int loss_steps = 0;
    double last_lr = 0;
    for (int step = 0; step < spe; ++step) {
      Tensor input = Tensor::zeros({B, img_shape[0], img_shape[1], img_shape[2]});
      std::vector<std::vector<Annotation>> truths(B);
      for (int b = 0; b < B; ++b) {
        const int idx = order[std::size_t(step) * B + b];
        const Tensor& img = data.images[idx];
        for (std::int64_t i = 0; i < per_image; ++i)
          input.set(std::int64_t(b) * per_image + i, img.at(i));
        truths[b] = data.annotations[idx];
      }

      Tape tape(DType::f32);
      TapeBindings binds;
      Var in = tape.leaf(input, false);
      const std::vector<Var> outs = graph_forward_train(det.graph, ps, tape, in, binds);
      const std::span<const Var> locs(outs.data(), n_levels);
      const std::span<const Var> confs(outs.data() + n_levels, n_levels);
      Var loss = multibox_loss(locs, confs, det.priors, truths, det.config.classes,
                               cfg.iou_threshold, cfg.neg_pos_ratio, nullptr);
      const double loss_val = tape.value(loss).at(0);
      if (!std::isfinite(loss_val))
        throw NumericError("train: loss diverged at epoch " + std::to_string(epoch) +
                           " step " + std::to_string(step));
      tape.backward(loss);

      last_lr = lr_at(cfg, epoch, step, spe);
      sgd_step(det.graph, ps, tape, binds, sgd, last_lr, cfg.momentum, cfg.weight_decay,
               cfg.sparsity_lambda);

      loss_sum += loss_val;
      ++loss_steps;
      ++result.steps;
      if (cfg.max_steps > 0 && result.steps >= cfg.max_steps) {
        stop = true;
        break;
      }
    }

    const double mean_loss = loss_steps ? loss_sum / loss_steps : 0.0;
    result.epoch_loss.push_back(mean_loss);
    if (log) {
      const GammaStats gs = gamma_stats(det.graph, ps);
      nlohmann::ordered_json line;
      line["epoch"] = epoch;
      line["loss"] = mean_loss;
      line["penalty"] = bn_sparsity_penalty(det.graph, ps, cfg.sparsity_lambda);
      line["lr"] = last_lr;
      line["gamma_min"] = gs.min;
      line["gamma_median"] = gs.median;
      line["gamma_max"] = gs.max;
      line["gamma_frac_below_0p01"] = gs.frac_below_001;
      *log << line.dump() << "\n" << std::flush;
    }
  }
  result.final_penalty = bn_sparsity_penalty(det.graph, ps, cfg.sparsity_lambda);
  return result;
}

}  // namespace mfssd
