#pragma once

#include <map>
#include <string>
#include <vector>

#include "mfssd/autodiff.hpp"
#include "mfssd/layers.hpp"

namespace mfssd {

// head_loc / head_conf are convolutions whose outputs feed the loss directly;
// channel pruning never touches their output layout.
enum class NodeKind { conv, batchnorm, relu, maxpool, upsample, concat, head_loc, head_conf };

const char* node_kind_name(NodeKind k);
NodeKind node_kind_from_name(const std::string& name);
inline bool is_conv_kind(NodeKind k) {
  return k == NodeKind::conv || k == NodeKind::head_loc || k == NodeKind::head_conf;
}

/// One operation in the network. Nodes are stored in topological order and
/// reference producers by name; the reserved name "input" is the image batch.
struct GraphNode {
  std::string name;
  NodeKind kind = NodeKind::conv;
  std::vector<std::string> inputs;

  // conv kinds: cout/k/stride/pad; maxpool: k/stride; upsample: out_h/out_w.
  int cout = 0;
  int k = 0;
  int stride = 1;
  int pad = 0;
  int out_h = 0;
  int out_w = 0;
};

struct GraphSpec {
  std::vector<GraphNode> nodes;
  std::vector<std::string> outputs;

  const GraphNode& node(const std::string& name) const;
  bool has_node(const std::string& name) const;
};

struct ParamStore {
  std::map<std::string, ConvParams> conv;
  std::map<std::string, BnParams> bn;
};

/// Validates structure (unique names, producers defined before use, attribute
/// ranges) and returns the activation shape at every node.
std::map<std::string, Shape> graph_shapes(const GraphSpec& g, const Shape& input_shape);

/// Fresh parameters for every conv/batchnorm node, drawn in node order.
ParamStore init_params(const GraphSpec& g, const Shape& input_shape, std::mt19937_64& rng,
                       DType dt = DType::f32);

/// Throws ShapeError if any parameter tensor disagrees with the propagated
/// shapes (e.g. after a bad rewrite or a checkpoint/graph mismatch).
void check_params(const GraphSpec& g, const ParamStore& ps, const Shape& input_shape);

/// Trainable parameter count: conv weight+bias and batchnorm gamma+beta.
std::int64_t count_params(const GraphSpec& g, const ParamStore& ps);

/// Eval-mode forward; returns the tensors named in g.outputs, in order.
std::vector<Tensor> graph_forward_eval(const GraphSpec& g, const ParamStore& ps,
                                       const Tensor& input);

/// Tape leaves for every trainable parameter, so optimizers can walk them.
struct TapeBindings {
  std::map<std::string, Var> conv_w, conv_b;
  std::map<std::string, Var> bn_gamma, bn_beta;
};

/// Train-mode forward recorded on the tape. Parameters are copied onto the
/// tape as gradient-tracked leaves (bindings name them); batchnorm running
/// stats in `ps` are updated in place.
std::vector<Var> graph_forward_train(const GraphSpec& g, ParamStore& ps, Tape& tape, Var input,
                                     TapeBindings& binds);

}  // namespace mfssd
