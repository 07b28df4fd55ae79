#pragma once

#include <random>
#include <span>

#include "mfssd/kernels.hpp"
#include "mfssd/tensor.hpp"

namespace mfssd {

struct ConvParams {
  Tensor weight;  // [cout, cin, k, k], k odd
  Tensor bias;    // [cout]
  int stride = 1;
  int pad = 0;
};

struct BnParams {
  Tensor gamma, beta;               // trainable, [c]
  Tensor running_mean, running_var;  // EMA buffers, [c]
  double eps = 1e-5;
  double momentum = 0.1;
};

// Weights U(-b, b) with b = 1/sqrt(cin * k * k), bias zero.
ConvParams make_conv(int cin, int cout, int k, int stride, int pad, std::mt19937_64& g,
                     DType dt = DType::f32);
// gamma 1, beta 0, running_mean 0, running_var 1.
BnParams make_batchnorm(int c, DType dt = DType::f32);

// Plain-tensor forward surfaces for the inference path and tests.
Tensor conv2d_eval(const Tensor& x, const ConvParams& p);
Tensor batchnorm_eval(const Tensor& x, const BnParams& p);
Tensor relu_eval(const Tensor& x);
Tensor maxpool_eval(const Tensor& x, int k, int stride);
Tensor upsample_eval(const Tensor& x, int out_h, int out_w);
Tensor concat_eval(std::span<const Tensor> xs);

}  // namespace mfssd
