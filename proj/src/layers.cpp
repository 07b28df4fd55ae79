#include "mfssd/layers.hpp"

#include <algorithm>
#include <cmath>

#include "mfssd/rng.hpp"

namespace mfssd {

ConvParams make_conv(int cin, int cout, int k, int stride, int pad, std::mt19937_64& g,
                     DType dt) {
  if (cin < 1 || cout < 1 || k < 1)
    throw ShapeError("make_conv: cin/cout/k must be positive");
  if (k % 2 == 0) throw ShapeError("make_conv: kernel extent must be odd, got " +
                                   std::to_string(k));
  ConvParams p;
  p.weight = Tensor(Shape{cout, cin, k, k}, dt);
  p.bias = Tensor(Shape{cout}, dt);
  p.stride = stride;
  p.pad = pad;
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin) * k * k);
  for (std::int64_t i = 0; i < p.weight.numel(); ++i)
    p.weight.set(i, rng::uniform(g, -bound, bound));
  return p;
}

BnParams make_batchnorm(int c, DType dt) {
  if (c < 1) throw ShapeError("make_batchnorm: channel count must be positive");
  BnParams p;
  p.gamma = Tensor::full(Shape{c}, 1.0, dt);
  p.beta = Tensor(Shape{c}, dt);
  p.running_mean = Tensor(Shape{c}, dt);
  p.running_var = Tensor::full(Shape{c}, 1.0, dt);
  return p;
}

Tensor conv2d_eval(const Tensor& x, const ConvParams& p) {
  const auto d =
      kernels::conv_dims(x.shape(), p.weight.shape(), p.bias.shape(), p.stride, p.pad);
  Tensor y(Shape{d.n, d.cout, d.oh, d.ow}, x.dtype());
  if (x.dtype() == DType::f32)
    kernels::conv2d_forward(x.data<float>().data(), p.weight.data<float>().data(),
                            p.bias.data<float>().data(), y.data<float>().data(), d);
  else
    kernels::conv2d_forward(x.data<double>().data(), p.weight.data<double>().data(),
                            p.bias.data<double>().data(), y.data<double>().data(), d);
  return y;
}

Tensor batchnorm_eval(const Tensor& x, const BnParams& p) {
  if (x.rank() != 4)
    throw ShapeError("batchnorm: input must be rank-4 N,C,H,W, got " + shape_str(x.shape()));
  const int c = x.dim(1);
  if (p.gamma.numel() != c)
    throw ShapeError("batchnorm: gamma extent " + std::to_string(p.gamma.numel()) +
                     " does not match channel count " + std::to_string(c));
  Tensor y(x.shape(), x.dtype());
  if (x.dtype() == DType::f32)
    kernels::batchnorm_eval_forward(x.data<float>().data(), p.gamma.data<float>().data(),
                                    p.beta.data<float>().data(),
                                    p.running_mean.data<float>().data(),
                                    p.running_var.data<float>().data(), y.data<float>().data(),
                                    x.dim(0), c, x.dim(2), x.dim(3), p.eps);
  else
    kernels::batchnorm_eval_forward(x.data<double>().data(), p.gamma.data<double>().data(),
                                    p.beta.data<double>().data(),
                                    p.running_mean.data<double>().data(),
                                    p.running_var.data<double>().data(),
                                    y.data<double>().data(), x.dim(0), c, x.dim(2), x.dim(3),
                                    p.eps);
  return y;
}

Tensor relu_eval(const Tensor& x) {
  Tensor y(x.shape(), x.dtype());
  if (x.dtype() == DType::f32)
    kernels::relu_forward(x.data<float>().data(), y.data<float>().data(), x.numel());
  else
    kernels::relu_forward(x.data<double>().data(), y.data<double>().data(), x.numel());
  return y;
}

Tensor maxpool_eval(const Tensor& x, int k, int stride) {
  const auto d = kernels::pool_dims(x.shape(), k, stride);
  Tensor y(Shape{d.n, d.c, d.oh, d.ow}, x.dtype());
  std::vector<std::int32_t> argmax(static_cast<std::size_t>(y.numel()));
  if (x.dtype() == DType::f32)
    kernels::maxpool2d_forward(x.data<float>().data(), y.data<float>().data(), argmax.data(),
                               d);
  else
    kernels::maxpool2d_forward(x.data<double>().data(), y.data<double>().data(), argmax.data(),
                               d);
  return y;
}

Tensor upsample_eval(const Tensor& x, int out_h, int out_w) {
  if (x.rank() != 4)
    throw ShapeError("upsample: input must be rank-4 N,C,H,W, got " + shape_str(x.shape()));
  if (out_h < x.dim(2) || out_w < x.dim(3))
    throw ShapeError("upsample: target smaller than source");
  Tensor y(Shape{x.dim(0), x.dim(1), out_h, out_w}, x.dtype());
  if (x.dtype() == DType::f32)
    kernels::upsample_bilinear_forward(x.data<float>().data(), y.data<float>().data(), x.dim(0),
                                       x.dim(1), x.dim(2), x.dim(3), out_h, out_w);
  else
    kernels::upsample_bilinear_forward(x.data<double>().data(), y.data<double>().data(),
                                       x.dim(0), x.dim(1), x.dim(2), x.dim(3), out_h, out_w);
  return y;
}

Tensor concat_eval(std::span<const Tensor> xs) {
  if (xs.empty()) throw ShapeError("concat: needs at least one input");
  const Tensor& first = xs[0];
  if (first.rank() != 4)
    throw ShapeError("concat: inputs must be rank-4 N,C,H,W");
  const int n = first.dim(0), h = first.dim(2), w = first.dim(3);
  int ctotal = 0;
  for (const Tensor& t : xs) {
    if (t.rank() != 4 || t.dim(0) != n || t.dim(2) != h || t.dim(3) != w ||
        t.dtype() != first.dtype())
      throw ShapeError("concat: input shape " + shape_str(t.shape()) +
                       " does not match batch/spatial of " + shape_str(first.shape()));
    ctotal += t.dim(1);
  }
  Tensor y(Shape{n, ctotal, h, w}, first.dtype());
  const std::int64_t plane = std::int64_t(h) * w;
  for (int img = 0; img < n; ++img) {
    std::int64_t coff = 0;
    for (const Tensor& t : xs) {
      const std::int64_t cnt = std::int64_t(t.dim(1)) * plane;
      if (first.dtype() == DType::f32)
        std::copy_n(t.data<float>().data() + std::int64_t(img) * cnt, cnt,
                    y.data<float>().data() + (std::int64_t(img) * ctotal + coff) * plane);
      else
        std::copy_n(t.data<double>().data() + std::int64_t(img) * cnt, cnt,
                    y.data<double>().data() + (std::int64_t(img) * ctotal + coff) * plane);
      coff += t.dim(1);
    }
  }
  return y;
}

}  // namespace mfssd
