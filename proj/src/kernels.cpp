#include "mfssd/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace mfssd::kernels {

namespace {

// Smallest out-index whose source index out*stride - pad + koff is >= 0.
inline int lo_index(int koff, int pad, int stride) {
  int num = pad - koff;
  if (num <= 0) return 0;
  return (num + stride - 1) / stride;
}

// One past the largest out-index whose source index stays < extent.
inline int hi_index(int koff, int pad, int stride, int extent, int out_extent) {
  int num = extent - 1 + pad - koff;
  if (num < 0) return 0;
  return std::min(out_extent, num / stride + 1);
}

}  // namespace

ConvDims conv_dims(const Shape& input, const Shape& weight, const Shape& bias, int stride,
                   int pad) {
  if (input.size() != 4)
    throw ShapeError("conv2d: input must be rank-4 N,C,H,W, got " + shape_str(input));
  if (weight.size() != 4)
    throw ShapeError("conv2d: weight must be rank-4 Cout,Cin,K,K, got " + shape_str(weight));
  if (weight[2] != weight[3])
    throw ShapeError("conv2d: kernel must be square, got " + shape_str(weight));
  if (input[1] != weight[1])
    throw ShapeError("conv2d: input channels (" + std::to_string(input[1]) +
                     ") do not match weight Cin (" + std::to_string(weight[1]) + ")");
  if (bias.size() != 1 || bias[0] != weight[0])
    throw ShapeError("conv2d: bias extent (" + shape_str(bias) + ") must equal Cout (" +
                     std::to_string(weight[0]) + ")");
  if (stride < 1) throw ShapeError("conv2d: stride must be positive");
  if (pad < 0) throw ShapeError("conv2d: pad must be non-negative");
  ConvDims d{input[0], input[1], input[2], input[3], weight[0], weight[2], stride, pad, 0, 0};
  int num_h = d.h + 2 * pad - d.k;
  int num_w = d.w + 2 * pad - d.k;
  if (num_h < 0 || num_h % stride != 0 || num_w < 0 || num_w % stride != 0)
    throw ShapeError("conv2d: output extent (" + std::to_string(d.h) + "+2*" +
                     std::to_string(pad) + "-" + std::to_string(d.k) + ")/" +
                     std::to_string(stride) + "+1 is not a positive integer");
  d.oh = num_h / stride + 1;
  d.ow = num_w / stride + 1;
  return d;
}

PoolDims pool_dims(const Shape& input, int k, int stride) {
  if (input.size() != 4)
    throw ShapeError("maxpool2d: input must be rank-4 N,C,H,W, got " + shape_str(input));
  if (k < 1 || stride < 1) throw ShapeError("maxpool2d: k and stride must be positive");
  PoolDims d{input[0], input[1], input[2], input[3], k, stride, 0, 0};
  if (d.h < k || d.w < k || (d.h - k) % stride != 0 || (d.w - k) % stride != 0)
    throw ShapeError("maxpool2d: extent " + std::to_string(d.h) + "x" + std::to_string(d.w) +
                     " does not divide into k=" + std::to_string(k) +
                     " stride=" + std::to_string(stride) + " windows");
  d.oh = (d.h - k) / stride + 1;
  d.ow = (d.w - k) / stride + 1;
  return d;
}

template <typename T>
void conv2d_forward(const T* x, const T* w, const T* b, T* y, const ConvDims& d) {
  const std::int64_t xplane = std::int64_t(d.h) * d.w;
  const std::int64_t yplane = std::int64_t(d.oh) * d.ow;
  for (int n = 0; n < d.n; ++n) {
    const T* xn = x + n * d.cin * xplane;
    T* yn = y + n * d.cout * yplane;
    for (int co = 0; co < d.cout; ++co) {
      T* yp = yn + co * yplane;
      std::fill(yp, yp + yplane, b ? b[co] : T(0));
      const T* wf = w + std::int64_t(co) * d.cin * d.k * d.k;
      for (int ci = 0; ci < d.cin; ++ci) {
        const T* xp = xn + ci * xplane;
        for (int kh = 0; kh < d.k; ++kh) {
          const int oh_lo = lo_index(kh, d.pad, d.stride);
          const int oh_hi = hi_index(kh, d.pad, d.stride, d.h, d.oh);
          for (int kw = 0; kw < d.k; ++kw) {
            const T wv = wf[(ci * d.k + kh) * d.k + kw];
            const int ow_lo = lo_index(kw, d.pad, d.stride);
            const int ow_hi = hi_index(kw, d.pad, d.stride, d.w, d.ow);
            const int len = ow_hi - ow_lo;
            if (len <= 0) continue;
            for (int oh = oh_lo; oh < oh_hi; ++oh) {
              const int ih = oh * d.stride - d.pad + kh;
              const int iw0 = ow_lo * d.stride - d.pad + kw;
              const T* xrow = xp + std::int64_t(ih) * d.w + iw0;
              T* yrow = yp + std::int64_t(oh) * d.ow + ow_lo;
              if (d.stride == 1) {
                for (int i = 0; i < len; ++i) yrow[i] += wv * xrow[i];
              } else {
                for (int i = 0; i < len; ++i) yrow[i] += wv * xrow[std::int64_t(i) * d.stride];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_input(const T* dy, const T* w, T* dx, const ConvDims& d) {
  const std::int64_t xplane = std::int64_t(d.h) * d.w;
  const std::int64_t yplane = std::int64_t(d.oh) * d.ow;
  for (int n = 0; n < d.n; ++n) {
    const T* dyn = dy + n * d.cout * yplane;
    T* dxn = dx + n * d.cin * xplane;
    for (int co = 0; co < d.cout; ++co) {
      const T* dyp = dyn + co * yplane;
      const T* wf = w + std::int64_t(co) * d.cin * d.k * d.k;
      for (int ci = 0; ci < d.cin; ++ci) {
        T* dxp = dxn + ci * xplane;
        for (int kh = 0; kh < d.k; ++kh) {
          const int oh_lo = lo_index(kh, d.pad, d.stride);
          const int oh_hi = hi_index(kh, d.pad, d.stride, d.h, d.oh);
          for (int kw = 0; kw < d.k; ++kw) {
            const T wv = wf[(ci * d.k + kh) * d.k + kw];
            const int ow_lo = lo_index(kw, d.pad, d.stride);
            const int ow_hi = hi_index(kw, d.pad, d.stride, d.w, d.ow);
            const int len = ow_hi - ow_lo;
            if (len <= 0) continue;
            for (int oh = oh_lo; oh < oh_hi; ++oh) {
              const int ih = oh * d.stride - d.pad + kh;
              const int iw0 = ow_lo * d.stride - d.pad + kw;
              const T* dyrow = dyp + std::int64_t(oh) * d.ow + ow_lo;
              T* dxrow = dxp + std::int64_t(ih) * d.w + iw0;
              if (d.stride == 1) {
                for (int i = 0; i < len; ++i) dxrow[i] += wv * dyrow[i];
              } else {
                for (int i = 0; i < len; ++i) dxrow[std::int64_t(i) * d.stride] += wv * dyrow[i];
              }
            }
          }
        }
      }
    }
  }
}

// dW is computed as a patch-major GEMM: for each image an im2row matrix
// col[p][j] (p = output position, j = ci*k*k + kh*k + kw) is built once, then
// dW[co][j] += dy[co][p] * col[p][j] with a contiguous inner loop over j.
template <typename T>
void conv2d_backward_weight(const T* dy, const T* x, T* dw, T* db, const ConvDims& d) {
  const std::int64_t xplane = std::int64_t(d.h) * d.w;
  const std::int64_t yplane = std::int64_t(d.oh) * d.ow;
  const int cols = d.cin * d.k * d.k;
  std::vector<T> col(static_cast<std::size_t>(yplane) * cols);
  for (int n = 0; n < d.n; ++n) {
    const T* xn = x + n * d.cin * xplane;
    const T* dyn = dy + n * d.cout * yplane;
    std::fill(col.begin(), col.end(), T(0));
    for (int oh = 0; oh < d.oh; ++oh) {
      for (int ow = 0; ow < d.ow; ++ow) {
        T* crow = col.data() + (std::int64_t(oh) * d.ow + ow) * cols;
        for (int ci = 0; ci < d.cin; ++ci) {
          const T* xp = xn + ci * xplane;
          for (int kh = 0; kh < d.k; ++kh) {
            const int ih = oh * d.stride - d.pad + kh;
            if (ih < 0 || ih >= d.h) continue;
            for (int kw = 0; kw < d.k; ++kw) {
              const int iw = ow * d.stride - d.pad + kw;
              if (iw < 0 || iw >= d.w) continue;
              crow[(ci * d.k + kh) * d.k + kw] = xp[std::int64_t(ih) * d.w + iw];
            }
          }
        }
      }
    }
    for (int co = 0; co < d.cout; ++co) {
      const T* dyp = dyn + co * yplane;
      T* dwrow = dw + std::int64_t(co) * cols;
      double bsum = 0.0;
      for (std::int64_t p = 0; p < yplane; ++p) {
        const T g = dyp[p];
        bsum += static_cast<double>(g);
        const T* crow = col.data() + p * cols;
        for (int j = 0; j < cols; ++j) dwrow[j] += g * crow[j];
      }
      db[co] += static_cast<T>(bsum);
    }
  }
}

template <typename T>
void maxpool2d_forward(const T* x, T* y, std::int32_t* argmax, const PoolDims& d) {
  const std::int64_t xplane = std::int64_t(d.h) * d.w;
  const std::int64_t yplane = std::int64_t(d.oh) * d.ow;
  for (std::int64_t plane = 0; plane < std::int64_t(d.n) * d.c; ++plane) {
    const T* xp = x + plane * xplane;
    T* yp = y + plane * yplane;
    std::int32_t* ap = argmax + plane * yplane;
    for (int oh = 0; oh < d.oh; ++oh) {
      for (int ow = 0; ow < d.ow; ++ow) {
        const int h0 = oh * d.stride, w0 = ow * d.stride;
        T best = xp[std::int64_t(h0) * d.w + w0];
        std::int32_t best_idx = h0 * d.w + w0;
        for (int i = 0; i < d.k; ++i) {
          for (int j = 0; j < d.k; ++j) {
            const std::int32_t idx = (h0 + i) * d.w + (w0 + j);
            const T v = xp[idx];
            if (v > best) {  // strict: first row-major maximum wins
              best = v;
              best_idx = idx;
            }
          }
        }
        yp[std::int64_t(oh) * d.ow + ow] = best;
        ap[std::int64_t(oh) * d.ow + ow] = best_idx;
      }
    }
  }
}

template <typename T>
void maxpool2d_backward(const T* dy, const std::int32_t* argmax, T* dx, const PoolDims& d) {
  const std::int64_t xplane = std::int64_t(d.h) * d.w;
  const std::int64_t yplane = std::int64_t(d.oh) * d.ow;
  for (std::int64_t plane = 0; plane < std::int64_t(d.n) * d.c; ++plane) {
    const T* dyp = dy + plane * yplane;
    const std::int32_t* ap = argmax + plane * yplane;
    T* dxp = dx + plane * xplane;
    for (std::int64_t i = 0; i < yplane; ++i) dxp[ap[i]] += dyp[i];
  }
}

namespace {

struct SampleAxis {
  std::vector<int> i0, i1;
  std::vector<double> w1;  // weight of the i1 neighbor
};

SampleAxis make_axis(int in_extent, int out_extent) {
  SampleAxis a;
  a.i0.resize(out_extent);
  a.i1.resize(out_extent);
  a.w1.resize(out_extent);
  const double scale = static_cast<double>(in_extent) / out_extent;
  for (int o = 0; o < out_extent; ++o) {
    double s = (o + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in_extent - 1));
    const int i0 = static_cast<int>(std::floor(s));
    a.i0[o] = i0;
    a.i1[o] = std::min(i0 + 1, in_extent - 1);
    a.w1[o] = s - i0;
  }
  return a;
}

}  // namespace

template <typename T>
void upsample_bilinear_forward(const T* x, T* y, int n, int c, int h, int w, int oh, int ow) {
  const SampleAxis ay = make_axis(h, oh), ax = make_axis(w, ow);
  const std::int64_t xplane = std::int64_t(h) * w, yplane = std::int64_t(oh) * ow;
  for (std::int64_t plane = 0; plane < std::int64_t(n) * c; ++plane) {
    const T* xp = x + plane * xplane;
    T* yp = y + plane * yplane;
    for (int r = 0; r < oh; ++r) {
      const T* row0 = xp + std::int64_t(ay.i0[r]) * w;
      const T* row1 = xp + std::int64_t(ay.i1[r]) * w;
      const double wy1 = ay.w1[r], wy0 = 1.0 - wy1;
      for (int col = 0; col < ow; ++col) {
        const double wx1 = ax.w1[col], wx0 = 1.0 - wx1;
        const double v = wy0 * (wx0 * row0[ax.i0[col]] + wx1 * row0[ax.i1[col]]) +
                         wy1 * (wx0 * row1[ax.i0[col]] + wx1 * row1[ax.i1[col]]);
        yp[std::int64_t(r) * ow + col] = static_cast<T>(v);
      }
    }
  }
}

template <typename T>
void upsample_bilinear_backward(const T* dy, T* dx, int n, int c, int h, int w, int oh, int ow) {
  const SampleAxis ay = make_axis(h, oh), ax = make_axis(w, ow);
  const std::int64_t xplane = std::int64_t(h) * w, yplane = std::int64_t(oh) * ow;
  for (std::int64_t plane = 0; plane < std::int64_t(n) * c; ++plane) {
    const T* dyp = dy + plane * yplane;
    T* dxp = dx + plane * xplane;
    for (int r = 0; r < oh; ++r) {
      const double wy1 = ay.w1[r], wy0 = 1.0 - wy1;
      for (int col = 0; col < ow; ++col) {
        const double wx1 = ax.w1[col], wx0 = 1.0 - wx1;
        const double g = static_cast<double>(dyp[std::int64_t(r) * ow + col]);
        dxp[std::int64_t(ay.i0[r]) * w + ax.i0[col]] += static_cast<T>(wy0 * wx0 * g);
        dxp[std::int64_t(ay.i0[r]) * w + ax.i1[col]] += static_cast<T>(wy0 * wx1 * g);
        dxp[std::int64_t(ay.i1[r]) * w + ax.i0[col]] += static_cast<T>(wy1 * wx0 * g);
        dxp[std::int64_t(ay.i1[r]) * w + ax.i1[col]] += static_cast<T>(wy1 * wx1 * g);
      }
    }
  }
}

template <typename T>
void relu_forward(const T* x, T* y, std::int64_t count) {
  for (std::int64_t i = 0; i < count; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
void relu_backward(const T* dy, const T* x, T* dx, std::int64_t count) {
  for (std::int64_t i = 0; i < count; ++i)
    if (x[i] > T(0)) dx[i] += dy[i];
}

template <typename T>
BnStats batchnorm_train_forward(const T* x, const T* gamma, const T* beta, T* y, int n, int c,
                                int h, int w, double eps, double momentum, T* running_mean,
                                T* running_var) {
  const std::int64_t plane = std::int64_t(h) * w;
  const std::int64_t m = std::int64_t(n) * plane;
  if (m < 2) throw ShapeError("batchnorm train: N*H*W must be >= 2, got " + std::to_string(m));
  BnStats stats;
  stats.mean.resize(c);
  stats.inv_std.resize(c);
  for (int ch = 0; ch < c; ++ch) {
    double sum = 0.0, sumsq = 0.0;
    for (int img = 0; img < n; ++img) {
      const T* xp = x + (std::int64_t(img) * c + ch) * plane;
      for (std::int64_t i = 0; i < plane; ++i) {
        const double v = static_cast<double>(xp[i]);
        sum += v;
        sumsq += v * v;
      }
    }
    const double mean = sum / static_cast<double>(m);
    double var = sumsq / static_cast<double>(m) - mean * mean;
    var = std::max(var, 0.0);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    stats.mean[ch] = mean;
    stats.inv_std[ch] = inv_std;
    const double g = static_cast<double>(gamma[ch]), b = static_cast<double>(beta[ch]);
    for (int img = 0; img < n; ++img) {
      const T* xp = x + (std::int64_t(img) * c + ch) * plane;
      T* yp = y + (std::int64_t(img) * c + ch) * plane;
      for (std::int64_t i = 0; i < plane; ++i)
        yp[i] = static_cast<T>(g * ((static_cast<double>(xp[i]) - mean) * inv_std) + b);
    }
    if (running_mean && running_var) {
      running_mean[ch] = static_cast<T>((1.0 - momentum) * static_cast<double>(running_mean[ch]) +
                                        momentum * mean);
      running_var[ch] = static_cast<T>((1.0 - momentum) * static_cast<double>(running_var[ch]) +
                                       momentum * var);
    }
  }
  return stats;
}

template <typename T>
void batchnorm_train_backward(const T* dy, const T* x, const T* gamma, const BnStats& stats,
                              T* dx, T* dgamma, T* dbeta, int n, int c, int h, int w) {
  const std::int64_t plane = std::int64_t(h) * w;
  const std::int64_t m = std::int64_t(n) * plane;
  for (int ch = 0; ch < c; ++ch) {
    const double mean = stats.mean[ch], inv_std = stats.inv_std[ch];
    const double g = static_cast<double>(gamma[ch]);
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int img = 0; img < n; ++img) {
      const T* dyp = dy + (std::int64_t(img) * c + ch) * plane;
      const T* xp = x + (std::int64_t(img) * c + ch) * plane;
      for (std::int64_t i = 0; i < plane; ++i) {
        const double d = static_cast<double>(dyp[i]);
        const double xhat = (static_cast<double>(xp[i]) - mean) * inv_std;
        sum_dy += d;
        sum_dy_xhat += d * xhat;
      }
    }
    dbeta[ch] += static_cast<T>(sum_dy);
    dgamma[ch] += static_cast<T>(sum_dy_xhat);
    const double k = g * inv_std / static_cast<double>(m);
    for (int img = 0; img < n; ++img) {
      const T* dyp = dy + (std::int64_t(img) * c + ch) * plane;
      const T* xp = x + (std::int64_t(img) * c + ch) * plane;
      T* dxp = dx + (std::int64_t(img) * c + ch) * plane;
      for (std::int64_t i = 0; i < plane; ++i) {
        const double d = static_cast<double>(dyp[i]);
        const double xhat = (static_cast<double>(xp[i]) - mean) * inv_std;
        dxp[i] += static_cast<T>(k * (static_cast<double>(m) * d - sum_dy - xhat * sum_dy_xhat));
      }
    }
  }
}

template <typename T>
void batchnorm_eval_forward(const T* x, const T* gamma, const T* beta, const T* running_mean,
                            const T* running_var, T* y, int n, int c, int h, int w, double eps) {
  const std::int64_t plane = std::int64_t(h) * w;
  for (int ch = 0; ch < c; ++ch) {
    const double rv = static_cast<double>(running_var[ch]);
    if (rv < 0.0)
      throw ShapeError("batchnorm eval: running_var[" + std::to_string(ch) + "] is negative");
    const double scale = static_cast<double>(gamma[ch]) / std::sqrt(rv + eps);
    const double shift =
        static_cast<double>(beta[ch]) - scale * static_cast<double>(running_mean[ch]);
    for (int img = 0; img < n; ++img) {
      const T* xp = x + (std::int64_t(img) * c + ch) * plane;
      T* yp = y + (std::int64_t(img) * c + ch) * plane;
      for (std::int64_t i = 0; i < plane; ++i)
        yp[i] = static_cast<T>(scale * static_cast<double>(xp[i]) + shift);
    }
  }
}

#define MFSSD_INSTANTIATE(T)                                                                  \
  template void conv2d_forward<T>(const T*, const T*, const T*, T*, const ConvDims&);         \
  template void conv2d_backward_input<T>(const T*, const T*, T*, const ConvDims&);            \
  template void conv2d_backward_weight<T>(const T*, const T*, T*, T*, const ConvDims&);       \
  template void maxpool2d_forward<T>(const T*, T*, std::int32_t*, const PoolDims&);           \
  template void maxpool2d_backward<T>(const T*, const std::int32_t*, T*, const PoolDims&);    \
  template void upsample_bilinear_forward<T>(const T*, T*, int, int, int, int, int, int);     \
  template void upsample_bilinear_backward<T>(const T*, T*, int, int, int, int, int, int);    \
  template void relu_forward<T>(const T*, T*, std::int64_t);                                  \
  template void relu_backward<T>(const T*, const T*, T*, std::int64_t);                       \
  template BnStats batchnorm_train_forward<T>(const T*, const T*, const T*, T*, int, int,     \
                                              int, int, double, double, T*, T*);              \
  template void batchnorm_train_backward<T>(const T*, const T*, const T*, const BnStats&,     \
                                            T*, T*, T*, int, int, int, int);                  \
  template void batchnorm_eval_forward<T>(const T*, const T*, const T*, const T*, const T*,   \
                                          T*, int, int, int, int, double);

MFSSD_INSTANTIATE(float)
MFSSD_INSTANTIATE(double)
#undef MFSSD_INSTANTIATE

}  // namespace mfssd::kernels
