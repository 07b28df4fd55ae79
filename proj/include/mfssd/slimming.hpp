#pragma once

#include <map>
#include <string>
#include <vector>

#include "mfssd/graph.hpp"
#include "mfssd/optim.hpp"

namespace mfssd {

/// Batchnorms whose channels may be removed: every batchnorm fed directly by
/// a convolution. Batchnorms after a concat are not in the set (their width
/// follows from their inputs), and detection heads carry no batchnorm, so
/// head outputs are never touched.
std::vector<std::string> prunable_bns(const GraphSpec& g);

struct PrunePlan {
  double threshold = 0;        // |gamma| of the largest channel removed
  std::int64_t considered = 0; // channels across the prunable set
  std::int64_t dropped = 0;
  std::map<std::string, std::vector<char>> keep;  // per prunable batchnorm
};

/// Global-percentile selection: the floor(ratio * considered) channels with
/// the smallest |gamma| are dropped, equal magnitudes dropping the
/// earlier-indexed channel first. Every batchnorm keeps at least one channel
/// (its largest |gamma| survives even below the cutoff).
PrunePlan plan_prune(const GraphSpec& g, const ParamStore& ps, double ratio);

struct PruneResult {
  GraphSpec graph;
  ParamStore params;
};

/// Structural rewrite: dropped channels disappear from their conv/batchnorm
/// pair and from every downstream consumer (concat offsets are remapped, the
/// next convs lose the matching input slices). Weights are copied, never
/// recomputed, so a channel whose gamma and beta are exactly zero leaves the
/// network function unchanged.
PruneResult apply_prune(const GraphSpec& g, const ParamStore& ps, const PrunePlan& plan);

struct SizeReport {
  std::int64_t trainable = 0;  // conv weights+biases, batchnorm gamma+beta
  std::int64_t buffers = 0;    // batchnorm running statistics
  std::int64_t bytes = 0;      // everything above at stored precision
};
SizeReport size_report(const GraphSpec& g, const ParamStore& ps);

/// Fine-tuning runs the ordinary loop with the sparsity pull removed and a
/// tenth of the learning rate.
TrainConfig finetune_config(TrainConfig cfg);

}  // namespace mfssd
