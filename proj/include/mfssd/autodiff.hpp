#pragma once

#include <functional>
#include <span>
#include <vector>

#include "mfssd/kernels.hpp"
#include "mfssd/tensor.hpp"

namespace mfssd {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
};

/// Records primitive operations in execution order so that backward() can
/// replay their gradient rules in reverse. A tape and its tensors form a
/// single-threaded unit; tensors detached from any tape are plain values.
class Tape {
 public:
  explicit Tape(DType dtype = DType::f32) : dtype_(dtype) {}

  Var leaf(Tensor value);  // honors value.requires_grad
  Var leaf(Tensor value, bool requires_grad);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  bool has_grad(Var v) const;
  const Tensor& grad(Var v) const;

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded rule in reverse.
  /// After it returns, every leaf with requires_grad has a gradient of the
  /// same shape as its value (zero if the leaf did not influence the loss).
  void backward(Var loss);

  DType dtype() const { return dtype_; }
  std::size_t size() const { return nodes_.size(); }

  // Op-recording interface.
  using BackwardFn = std::function<void(Tape&, int node)>;
  Var record(Tensor out, std::vector<Var> inputs, BackwardFn fn);
  Tensor& grad_buffer(Var v);  // zero-initialized on first touch
  const std::vector<int>& inputs_of(int node) const { return nodes_[node].inputs; }
  const Tensor& node_grad(int node) const { return nodes_[node].grad; }

 private:
  struct Node {
    Tensor value;
    std::vector<int> inputs;
    BackwardFn backward;
    Tensor grad;
    bool requires_grad = false;
    bool is_leaf = false;
  };
  DType dtype_;
  std::vector<Node> nodes_;
  int check(Var v) const;
};

// Primitive differentiable ops. Shapes are validated on entry; violations
// raise ShapeError before anything is recorded.
Var conv2d(Var x, Var w, Var b, int stride, int pad);
Var maxpool2d(Var x, int k, int stride);
Var upsample_bilinear(Var x, int out_h, int out_w);
Var concat_channels(std::span<const Var> xs);
Var relu(Var x);
Var batchnorm_train(Var x, Var gamma, Var beta, Tensor* running_mean, Tensor* running_var,
                    double eps, double momentum);

// Elementwise / reduction helpers used by small losses and the grad checker.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var square(Var x);
Var scale(Var x, double s);
Var sum_all(Var x);  // -> scalar of shape [1]

}  // namespace mfssd
