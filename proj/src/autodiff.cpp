#include "mfssd/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace mfssd {

namespace {

template <typename T>
void axpy(std::span<const T> src, std::span<T> dst) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void accumulate(Tensor& dst, const Tensor& src) {
  if (dst.dtype() == DType::f32)
    axpy(src.data<float>(), dst.data<float>());
  else
    axpy(src.data<double>(), dst.data<double>());
}

}  // namespace

int Tape::check(Var v) const {
  if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
    throw ShapeError("autodiff: variable does not belong to this tape");
  return v.id;
}

Var Tape::leaf(Tensor value) {
  const bool rg = value.requires_grad;
  return leaf(std::move(value), rg);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (value.dtype() != dtype_)
    throw ShapeError("autodiff: leaf dtype does not match tape dtype");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Tensor out, std::vector<Var> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(out);
  bool rg = false;
  for (Var v : inputs) {
    n.inputs.push_back(check(v));
    rg = rg || nodes_[v.id].requires_grad;
  }
  n.requires_grad = rg;
  if (rg) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Tape::value(Var v) const { return nodes_[check(v)].value; }
bool Tape::requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }
bool Tape::has_grad(Var v) const { return nodes_[check(v)].grad.defined(); }

const Tensor& Tape::grad(Var v) const {
  const Node& n = nodes_[check(v)];
  if (!n.grad.defined()) throw ShapeError("autodiff: no gradient recorded for this variable");
  return n.grad;
}

Tensor& Tape::grad_buffer(Var v) {
  Node& n = nodes_[check(v)];
  if (!n.grad.defined()) n.grad = Tensor::zeros(n.value.shape(), dtype_);
  return n.grad;
}

void Tape::backward(Var loss) {
  const int root = check(loss);
  if (nodes_[root].value.numel() != 1)
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     shape_str(nodes_[root].value.shape()));
  grad_buffer(loss).fill(1.0);
  for (int i = root; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.grad.defined() || !n.backward) continue;
    n.backward(*this, i);
  }
  for (auto& n : nodes_)
    if (n.is_leaf && n.requires_grad && !n.grad.defined())
      n.grad = Tensor::zeros(n.value.shape(), dtype_);
}

namespace {

template <typename T>
std::span<const T> vals(Tape& t, Var v) {
  return t.value(v).data<T>();
}

// Gradient accumulation guarded by requires_grad so dead subtrees are skipped.
bool wants_grad(Tape& t, Var v) { return t.requires_grad(v); }

}  // namespace

Var conv2d(Var x, Var w, Var b, int stride, int pad) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  const Tensor& bv = t.value(b);
  const auto d = kernels::conv_dims(xv.shape(), wv.shape(), bv.shape(), stride, pad);
  Tensor out(Shape{d.n, d.cout, d.oh, d.ow}, t.dtype());
  if (t.dtype() == DType::f32)
    kernels::conv2d_forward(xv.data<float>().data(), wv.data<float>().data(),
                            bv.data<float>().data(), out.data<float>().data(), d);
  else
    kernels::conv2d_forward(xv.data<double>().data(), wv.data<double>().data(),
                            bv.data<double>().data(), out.data<double>().data(), d);
  return t.record(std::move(out), {x, w, b}, [d](Tape& tp, int node) {
    const auto& in = tp.inputs_of(node);
    Var xi{&tp, in[0]}, wi{&tp, in[1]}, bi{&tp, in[2]};
    const Tensor& dy = tp.node_grad(node);
    if (tp.dtype() == DType::f32) {
      auto g = dy.data<float>();
      if (wants_grad(tp, xi))
        kernels::conv2d_backward_input(g.data(), vals<float>(tp, wi).data(),
                                       tp.grad_buffer(xi).data<float>().data(), d);
      if (wants_grad(tp, wi) || wants_grad(tp, bi))
        kernels::conv2d_backward_weight(g.data(), vals<float>(tp, xi).data(),
                                        tp.grad_buffer(wi).data<float>().data(),
                                        tp.grad_buffer(bi).data<float>().data(), d);
    } else {
      auto g = dy.data<double>();
      if (wants_grad(tp, xi))
        kernels::conv2d_backward_input(g.data(), vals<double>(tp, wi).data(),
                                       tp.grad_buffer(xi).data<double>().data(), d);
      if (wants_grad(tp, wi) || wants_grad(tp, bi))
        kernels::conv2d_backward_weight(g.data(), vals<double>(tp, xi).data(),
                                        tp.grad_buffer(wi).data<double>().data(),
                                        tp.grad_buffer(bi).data<double>().data(), d);
    }
  });
}

Var maxpool2d(Var x, int k, int stride) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  const auto d = kernels::pool_dims(xv.shape(), k, stride);
  Tensor out(Shape{d.n, d.c, d.oh, d.ow}, t.dtype());
  auto argmax = std::make_shared<std::vector<std::int32_t>>(
      static_cast<std::size_t>(out.numel()));
  if (t.dtype() == DType::f32)
    kernels::maxpool2d_forward(xv.data<float>().data(), out.data<float>().data(),
                               argmax->data(), d);
  else
    kernels::maxpool2d_forward(xv.data<double>().data(), out.data<double>().data(),
                               argmax->data(), d);
  return t.record(std::move(out), {x}, [d, argmax](Tape& tp, int node) {
    Var xi{&tp, tp.inputs_of(node)[0]};
    if (!wants_grad(tp, xi)) return;
    const Tensor& dy = tp.node_grad(node);
    if (tp.dtype() == DType::f32)
      kernels::maxpool2d_backward(dy.data<float>().data(), argmax->data(),
                                  tp.grad_buffer(xi).data<float>().data(), d);
    else
      kernels::maxpool2d_backward(dy.data<double>().data(), argmax->data(),
                                  tp.grad_buffer(xi).data<double>().data(), d);
  });
}

Var upsample_bilinear(Var x, int out_h, int out_w) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  if (xv.rank() != 4)
    throw ShapeError("upsample: input must be rank-4 N,C,H,W, got " + shape_str(xv.shape()));
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (out_h < 1 || out_w < 1) throw ShapeError("upsample: target extents must be positive");
  if (out_h < h || out_w < w)
    throw ShapeError("upsample: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                     " smaller than source " + std::to_string(h) + "x" + std::to_string(w));
  Tensor out(Shape{n, c, out_h, out_w}, t.dtype());
  if (t.dtype() == DType::f32)
    kernels::upsample_bilinear_forward(xv.data<float>().data(), out.data<float>().data(), n, c,
                                       h, w, out_h, out_w);
  else
    kernels::upsample_bilinear_forward(xv.data<double>().data(), out.data<double>().data(), n,
                                       c, h, w, out_h, out_w);
  return t.record(std::move(out), {x}, [n, c, h, w, out_h, out_w](Tape& tp, int node) {
    Var xi{&tp, tp.inputs_of(node)[0]};
    if (!wants_grad(tp, xi)) return;
    const Tensor& dy = tp.node_grad(node);
    if (tp.dtype() == DType::f32)
      kernels::upsample_bilinear_backward(dy.data<float>().data(),
                                          tp.grad_buffer(xi).data<float>().data(), n, c, h, w,
                                          out_h, out_w);
    else
      kernels::upsample_bilinear_backward(dy.data<double>().data(),
                                          tp.grad_buffer(xi).data<double>().data(), n, c, h, w,
                                          out_h, out_w);
  });
}

Var concat_channels(std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("concat: needs at least one input");
  Tape& t = *xs[0].tape;
  const Tensor& first = t.value(xs[0]);
  if (first.rank() != 4)
    throw ShapeError("concat: inputs must be rank-4 N,C,H,W, got " + shape_str(first.shape()));
  const int n = first.dim(0), h = first.dim(2), w = first.dim(3);
  int ctotal = 0;
  std::vector<int> blocks;
  for (Var v : xs) {
    const Tensor& tv = t.value(v);
    if (tv.rank() != 4 || tv.dim(0) != n || tv.dim(2) != h || tv.dim(3) != w)
      throw ShapeError("concat: input shape " + shape_str(tv.shape()) +
                       " does not match batch/spatial of " + shape_str(first.shape()));
    blocks.push_back(tv.dim(1));
    ctotal += tv.dim(1);
  }
  Tensor out(Shape{n, ctotal, h, w}, t.dtype());
  const std::int64_t plane = std::int64_t(h) * w;
  for (int img = 0; img < n; ++img) {
    std::int64_t coff = 0;
    for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
      const Tensor& tv = t.value(xs[bi]);
      const std::int64_t cnt = std::int64_t(blocks[bi]) * plane;
      if (t.dtype() == DType::f32)
        std::copy_n(tv.data<float>().data() + std::int64_t(img) * cnt,
                    cnt, out.data<float>().data() + (std::int64_t(img) * ctotal + coff) * plane);
      else
        std::copy_n(tv.data<double>().data() + std::int64_t(img) * cnt,
                    cnt, out.data<double>().data() + (std::int64_t(img) * ctotal + coff) * plane);
      coff += blocks[bi];
    }
  }
  std::vector<Var> inputs(xs.begin(), xs.end());
  return t.record(std::move(out), std::move(inputs),
                  [n, h, w, blocks, ctotal](Tape& tp, int node) {
    const Tensor& dy = tp.node_grad(node);
    const std::int64_t plane = std::int64_t(h) * w;
    const auto& in = tp.inputs_of(node);
    for (int img = 0; img < n; ++img) {
      std::int64_t coff = 0;
      for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
        Var xi{&tp, in[bi]};
        const std::int64_t cnt = std::int64_t(blocks[bi]) * plane;
        if (wants_grad(tp, xi)) {
          Tensor& gx = tp.grad_buffer(xi);
          if (tp.dtype() == DType::f32) {
            const float* src = dy.data<float>().data() + (std::int64_t(img) * ctotal + coff) * plane;
            float* dst = gx.data<float>().data() + std::int64_t(img) * cnt;
            for (std::int64_t i = 0; i < cnt; ++i) dst[i] += src[i];
          } else {
            const double* src = dy.data<double>().data() + (std::int64_t(img) * ctotal + coff) * plane;
            double* dst = gx.data<double>().data() + std::int64_t(img) * cnt;
            for (std::int64_t i = 0; i < cnt; ++i) dst[i] += src[i];
          }
        }
        coff += blocks[bi];
      }
    }
  });
}

Var relu(Var x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  Tensor out(xv.shape(), t.dtype());
  if (t.dtype() == DType::f32)
    kernels::relu_forward(xv.data<float>().data(), out.data<float>().data(), xv.numel());
  else
    kernels::relu_forward(xv.data<double>().data(), out.data<double>().data(), xv.numel());
  return t.record(std::move(out), {x}, [](Tape& tp, int node) {
    Var xi{&tp, tp.inputs_of(node)[0]};
    if (!wants_grad(tp, xi)) return;
    const Tensor& dy = tp.node_grad(node);
    const Tensor& xv = tp.value(xi);
    if (tp.dtype() == DType::f32)
      kernels::relu_backward(dy.data<float>().data(), xv.data<float>().data(),
                             tp.grad_buffer(xi).data<float>().data(), xv.numel());
    else
      kernels::relu_backward(dy.data<double>().data(), xv.data<double>().data(),
                             tp.grad_buffer(xi).data<double>().data(), xv.numel());
  });
}

Var batchnorm_train(Var x, Var gamma, Var beta, Tensor* running_mean, Tensor* running_var,
                    double eps, double momentum) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  if (xv.rank() != 4)
    throw ShapeError("batchnorm: input must be rank-4 N,C,H,W, got " + shape_str(xv.shape()));
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const Tensor& gv = t.value(gamma);
  const Tensor& bv = t.value(beta);
  if (gv.numel() != c || bv.numel() != c)
    throw ShapeError("batchnorm: gamma/beta extent must equal channel count " +
                     std::to_string(c));
  Tensor out(xv.shape(), t.dtype());
  auto stats = std::make_shared<kernels::BnStats>();
  if (t.dtype() == DType::f32)
    *stats = kernels::batchnorm_train_forward(
        xv.data<float>().data(), gv.data<float>().data(), bv.data<float>().data(),
        out.data<float>().data(), n, c, h, w, eps, momentum,
        running_mean ? running_mean->data<float>().data() : nullptr,
        running_var ? running_var->data<float>().data() : nullptr);
  else
    *stats = kernels::batchnorm_train_forward(
        xv.data<double>().data(), gv.data<double>().data(), bv.data<double>().data(),
        out.data<double>().data(), n, c, h, w, eps, momentum,
        running_mean ? running_mean->data<double>().data() : nullptr,
        running_var ? running_var->data<double>().data() : nullptr);
  return t.record(std::move(out), {x, gamma, beta}, [n, c, h, w, stats](Tape& tp, int node) {
    const auto& in = tp.inputs_of(node);
    Var xi{&tp, in[0]}, gi{&tp, in[1]}, bi{&tp, in[2]};
    const Tensor& dy = tp.node_grad(node);
    if (tp.dtype() == DType::f32)
      kernels::batchnorm_train_backward(
          dy.data<float>().data(), vals<float>(tp, xi).data(), vals<float>(tp, gi).data(),
          *stats, tp.grad_buffer(xi).data<float>().data(),
          tp.grad_buffer(gi).data<float>().data(), tp.grad_buffer(bi).data<float>().data(), n,
          c, h, w);
    else
      kernels::batchnorm_train_backward(
          dy.data<double>().data(), vals<double>(tp, xi).data(), vals<double>(tp, gi).data(),
          *stats, tp.grad_buffer(xi).data<double>().data(),
          tp.grad_buffer(gi).data<double>().data(), tp.grad_buffer(bi).data<double>().data(), n,
          c, h, w);
  });
}

namespace {

template <typename T>
void ew_add(std::span<const T> a, std::span<const T> b, std::span<T> out) {
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  check_same_shape(av, bv, "add");
  Tensor out(av.shape(), t.dtype());
  if (t.dtype() == DType::f32)
    ew_add(av.data<float>(), bv.data<float>(), out.data<float>());
  else
    ew_add(av.data<double>(), bv.data<double>(), out.data<double>());
  return t.record(std::move(out), {a, b}, [](Tape& tp, int node) {
    const Tensor& dy = tp.node_grad(node);
    for (int k = 0; k < 2; ++k) {
      Var vi{&tp, tp.inputs_of(node)[k]};
      if (wants_grad(tp, vi)) accumulate(tp.grad_buffer(vi), dy);
    }
  });
}

Var sub(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  check_same_shape(av, bv, "sub");
  Tensor out(av.shape(), t.dtype());
  for (std::int64_t i = 0; i < out.numel(); ++i) out.set(i, av.at(i) - bv.at(i));
  return t.record(std::move(out), {a, b}, [](Tape& tp, int node) {
    const Tensor& dy = tp.node_grad(node);
    Var ai{&tp, tp.inputs_of(node)[0]}, bi{&tp, tp.inputs_of(node)[1]};
    if (wants_grad(tp, ai)) accumulate(tp.grad_buffer(ai), dy);
    if (wants_grad(tp, bi)) {
      Tensor& g = tp.grad_buffer(bi);
      for (std::int64_t i = 0; i < g.numel(); ++i) g.set(i, g.at(i) - dy.at(i));
    }
  });
}

Var square(Var x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  Tensor out(xv.shape(), t.dtype());
  for (std::int64_t i = 0; i < out.numel(); ++i) out.set(i, xv.at(i) * xv.at(i));
  return t.record(std::move(out), {x}, [](Tape& tp, int node) {
    Var xi{&tp, tp.inputs_of(node)[0]};
    if (!wants_grad(tp, xi)) return;
    const Tensor& dy = tp.node_grad(node);
    const Tensor& xv = tp.value(xi);
    Tensor& g = tp.grad_buffer(xi);
    for (std::int64_t i = 0; i < g.numel(); ++i) g.set(i, g.at(i) + 2.0 * xv.at(i) * dy.at(i));
  });
}

Var scale(Var x, double s) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  Tensor out(xv.shape(), t.dtype());
  for (std::int64_t i = 0; i < out.numel(); ++i) out.set(i, s * xv.at(i));
  return t.record(std::move(out), {x}, [s](Tape& tp, int node) {
    Var xi{&tp, tp.inputs_of(node)[0]};
    if (!wants_grad(tp, xi)) return;
    const Tensor& dy = tp.node_grad(node);
    Tensor& g = tp.grad_buffer(xi);
    for (std::int64_t i = 0; i < g.numel(); ++i) g.set(i, g.at(i) + s * dy.at(i));
  });
}

Var sum_all(Var x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  double s = 0.0;
  for (std::int64_t i = 0; i < xv.numel(); ++i) s += xv.at(i);
  Tensor out = Tensor::full(Shape{1}, s, t.dtype());
  return t.record(std::move(out), {x}, [](Tape& tp, int node) {
    Var xi{&tp, tp.inputs_of(node)[0]};
    if (!wants_grad(tp, xi)) return;
    const double g = tp.node_grad(node).at(0);
    Tensor& gx = tp.grad_buffer(xi);
    for (std::int64_t i = 0; i < gx.numel(); ++i) gx.set(i, gx.at(i) + g);
  });
}

}  // namespace mfssd
