#include "mfssd/slimming.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

namespace mfssd {

namespace {

std::vector<int> kept_indices(const std::vector<char>& mask) {
  std::vector<int> idx;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) idx.push_back(static_cast<int>(i));
  return idx;
}

Tensor gather_1d(const Tensor& t, const std::vector<int>& idx) {
  Tensor out = Tensor::zeros({static_cast<int>(idx.size())}, t.dtype());
  for (std::size_t i = 0; i < idx.size(); ++i) out.set(i, t.at(idx[i]));
  return out;
}

Tensor gather_conv_weight(const Tensor& w, const std::vector<int>& out_idx,
                          const std::vector<int>& in_idx) {
  const int K = w.dim(2);
  Tensor out = Tensor::zeros(
      {static_cast<int>(out_idx.size()), static_cast<int>(in_idx.size()), K, K}, w.dtype());
  std::int64_t dst = 0;
  const std::int64_t plane = std::int64_t(K) * K;
  for (int o : out_idx)
    for (int i : in_idx) {
      const std::int64_t src = (std::int64_t(o) * w.dim(1) + i) * plane;
      for (std::int64_t k = 0; k < plane; ++k) out.set(dst++, w.at(src + k));
    }
  return out;
}

}  // namespace

std::vector<std::string> prunable_bns(const GraphSpec& g) {
  std::vector<std::string> out;
  for (const auto& node : g.nodes) {
    if (node.kind != NodeKind::batchnorm) continue;
    if (node.inputs.size() == 1 && g.has_node(node.inputs[0]) &&
        g.node(node.inputs[0]).kind == NodeKind::conv)
      out.push_back(node.name);
  }
  return out;
}

PrunePlan plan_prune(const GraphSpec& g, const ParamStore& ps, double ratio) {
  if (!(ratio >= 0) || !(ratio <= 1)) throw ShapeError("prune: ratio must lie in [0,1]");
  const auto bns = prunable_bns(g);

  struct Entry {
    double mag;
    std::int64_t order;
    const std::string* bn;
    int channel;
  };
  std::vector<Entry> entries;
  PrunePlan plan;
  for (const auto& name : bns) {
    const Tensor& gamma = ps.bn.at(name).gamma;
    plan.keep[name].assign(gamma.numel(), 1);
    for (std::int64_t c = 0; c < gamma.numel(); ++c)
      entries.push_back({std::fabs(gamma.at(c)), plan.considered++, &plan.keep.find(name)->first,
                         static_cast<int>(c)});
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    return std::tie(a.mag, a.order) < std::tie(b.mag, b.order);
  });

  const std::int64_t target = static_cast<std::int64_t>(ratio * double(plan.considered));
  for (std::int64_t i = 0; i < target; ++i) plan.keep[*entries[i].bn][entries[i].channel] = 0;

  // No batchnorm may lose every channel: resurrect its largest |gamma|
  // (the latest such channel when tied).
  for (const auto& name : bns) {
    auto& mask = plan.keep[name];
    if (std::count(mask.begin(), mask.end(), 1) > 0) continue;
    const Tensor& gamma = ps.bn.at(name).gamma;
    int best = 0;
    for (std::int64_t c = 1; c < gamma.numel(); ++c)
      if (std::fabs(gamma.at(c)) >= std::fabs(gamma.at(best))) best = static_cast<int>(c);
    mask[best] = 1;
  }

  plan.threshold = 0;
  for (const auto& [name, mask] : plan.keep) {
    const Tensor& gamma = ps.bn.at(name).gamma;
    for (std::size_t c = 0; c < mask.size(); ++c)
      if (!mask[c]) {
        ++plan.dropped;
        plan.threshold = std::max(plan.threshold, std::fabs(gamma.at(c)));
      }
  }
  return plan;
}

PruneResult apply_prune(const GraphSpec& g, const ParamStore& ps, const PrunePlan& plan) {
  const auto prunable = prunable_bns(g);
  for (const auto& [name, mask] : plan.keep) {
    if (std::find(prunable.begin(), prunable.end(), name) == prunable.end())
      throw ShapeError("prune: " + name + " is not a prunable batchnorm");
    if (static_cast<std::int64_t>(mask.size()) != ps.bn.at(name).gamma.numel())
      throw ShapeError("prune: mask width mismatch at " + name);
    if (std::count(mask.begin(), mask.end(), 1) == 0)
      throw ShapeError("prune: " + name + " would lose every channel");
  }

  // Consumers per node, to guarantee a planned conv/batchnorm pair is
  // exclusive: slicing a conv that also feeds something else would corrupt
  // that other path.
  std::map<std::string, int> consumers;
  for (const auto& node : g.nodes)
    for (const auto& in : node.inputs) ++consumers[in];
  std::map<std::string, const std::vector<char>*> conv_mask;
  for (const auto& node : g.nodes) {
    const auto it = plan.keep.find(node.name);
    if (node.kind != NodeKind::batchnorm || it == plan.keep.end()) continue;
    const std::string& conv = node.inputs[0];
    if (consumers[conv] != 1)
      throw ShapeError("prune: " + conv + " feeds multiple nodes and cannot be sliced");
    conv_mask[conv] = &it->second;
  }

  // Per-node output channel masks; absent entry = keep everything.
  std::map<std::string, std::vector<char>> masks;
  auto mask_of = [&](const std::string& name) -> const std::vector<char>* {
    const auto it = masks.find(name);
    return it == masks.end() ? nullptr : &it->second;
  };
  for (const auto& node : g.nodes) {
    switch (node.kind) {
      case NodeKind::conv:
      case NodeKind::head_loc:
      case NodeKind::head_conf: {
        const auto it = conv_mask.find(node.name);
        masks[node.name] = it != conv_mask.end() ? *it->second
                                                 : std::vector<char>(node.cout, 1);
        break;
      }
      case NodeKind::concat: {
        std::vector<char> cat;
        for (const auto& in : node.inputs) {
          const auto* m = mask_of(in);
          if (!m) throw ShapeError("prune: concat over " + in + " is unsupported");
          cat.insert(cat.end(), m->begin(), m->end());
        }
        masks[node.name] = std::move(cat);
        break;
      }
      default: {
        const auto* m = mask_of(node.inputs[0]);
        if (m) masks[node.name] = *m;
        break;
      }
    }
  }

  PruneResult out;
  out.graph = g;
  for (auto& node : out.graph.nodes) {
    if (is_conv_kind(node.kind)) {
      const ConvParams& cp = ps.conv.at(node.name);
      const auto* in_m = mask_of(node.inputs[0]);
      const std::vector<int> in_idx =
          in_m ? kept_indices(*in_m)
               : [&] {
                   std::vector<int> all(cp.weight.dim(1));
                   std::iota(all.begin(), all.end(), 0);
                   return all;
                 }();
      const std::vector<int> out_idx = kept_indices(masks.at(node.name));
      ConvParams np;
      np.weight = gather_conv_weight(cp.weight, out_idx, in_idx);
      np.bias = gather_1d(cp.bias, out_idx);
      np.stride = cp.stride;
      np.pad = cp.pad;
      node.cout = static_cast<int>(out_idx.size());
      out.params.conv.emplace(node.name, std::move(np));
    } else if (node.kind == NodeKind::batchnorm) {
      const BnParams& bp = ps.bn.at(node.name);
      const std::vector<int> idx = kept_indices(masks.at(node.name));
      BnParams np;
      np.gamma = gather_1d(bp.gamma, idx);
      np.beta = gather_1d(bp.beta, idx);
      np.running_mean = gather_1d(bp.running_mean, idx);
      np.running_var = gather_1d(bp.running_var, idx);
      np.eps = bp.eps;
      np.momentum = bp.momentum;
      out.params.bn.emplace(node.name, std::move(np));
    }
  }
  return out;
}

SizeReport size_report(const GraphSpec& g, const ParamStore& ps) {
  SizeReport r;
  auto account = [&](const Tensor& t, bool trainable) {
    (trainable ? r.trainable : r.buffers) += t.numel();
    r.bytes += t.numel() * static_cast<std::int64_t>(dtype_size(t.dtype()));
  };
  for (const auto& node : g.nodes) {
    if (is_conv_kind(node.kind)) {
      account(ps.conv.at(node.name).weight, true);
      account(ps.conv.at(node.name).bias, true);
    } else if (node.kind == NodeKind::batchnorm) {
      account(ps.bn.at(node.name).gamma, true);
      account(ps.bn.at(node.name).beta, true);
      account(ps.bn.at(node.name).running_mean, false);
      account(ps.bn.at(node.name).running_var, false);
    }
  }
  return r;
}

TrainConfig finetune_config(TrainConfig cfg) {
  cfg.base_lr /= 10.0;
  cfg.sparsity_lambda = 0.0;
  return cfg;
}

}  // namespace mfssd
