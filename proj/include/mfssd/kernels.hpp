#pragma once

#include <cstdint>
#include <vector>

#include "mfssd/errors.hpp"
#include "mfssd/tensor.hpp"

// Raw numeric kernels shared by the inference path and the autodiff tape.
// All kernels are single-threaded with a fixed accumulation order, so results
// are bitwise reproducible run to run. Backward kernels accumulate (+=) into
// their gradient buffers; callers zero-initialize.

namespace mfssd::kernels {

struct ConvDims {
  int n, cin, h, w;
  int cout, k, stride, pad;
  int oh, ow;
};

// Validates shapes and the integral-output constraint; throws ShapeError.
ConvDims conv_dims(const Shape& input, const Shape& weight, const Shape& bias, int stride,
                   int pad);

struct PoolDims {
  int n, c, h, w;
  int k, stride;
  int oh, ow;
};

PoolDims pool_dims(const Shape& input, int k, int stride);

template <typename T>
void conv2d_forward(const T* x, const T* w, const T* b, T* y, const ConvDims& d);
template <typename T>
void conv2d_backward_input(const T* dy, const T* w, T* dx, const ConvDims& d);
template <typename T>
void conv2d_backward_weight(const T* dy, const T* x, T* dw, T* db, const ConvDims& d);

// Backward routes each window's gradient to its first row-major argmax,
// recorded in `argmax` as flat plane offsets.
template <typename T>
void maxpool2d_forward(const T* x, T* y, std::int32_t* argmax, const PoolDims& d);
template <typename T>
void maxpool2d_backward(const T* dy, const std::int32_t* argmax, T* dx, const PoolDims& d);

// Half-pixel-center sampling: x_s = (x_d + 0.5) * (W / out_w) - 0.5, clamped
// to [0, W-1], then a bilinear blend of the four neighbors.
template <typename T>
void upsample_bilinear_forward(const T* x, T* y, int n, int c, int h, int w, int oh, int ow);
template <typename T>
void upsample_bilinear_backward(const T* dy, T* dx, int n, int c, int h, int w, int oh, int ow);

template <typename T>
void relu_forward(const T* x, T* y, std::int64_t count);
template <typename T>
void relu_backward(const T* dy, const T* x, T* dx, std::int64_t count);

struct BnStats {
  std::vector<double> mean;     // per-channel batch mean
  std::vector<double> inv_std;  // 1 / sqrt(var + eps)
};

// Training-mode batch norm over the N*H*W elements of each channel, biased
// (population) variance. Updates running stats in place with the EMA
// running <- (1 - momentum) * running + momentum * batch_stat.
template <typename T>
BnStats batchnorm_train_forward(const T* x, const T* gamma, const T* beta, T* y, int n, int c,
                                int h, int w, double eps, double momentum, T* running_mean,
                                T* running_var);
template <typename T>
void batchnorm_train_backward(const T* dy, const T* x, const T* gamma, const BnStats& stats,
                              T* dx, T* dgamma, T* dbeta, int n, int c, int h, int w);

template <typename T>
void batchnorm_eval_forward(const T* x, const T* gamma, const T* beta, const T* running_mean,
                            const T* running_var, T* y, int n, int c, int h, int w, double eps);

}  // namespace mfssd::kernels
