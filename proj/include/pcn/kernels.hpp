#pragma once

// Forward and backward kernels on plain tensors. No tape, no allocation beyond
// outputs and im2col scratch. Every loop runs sequentially in a fixed order, so
// results are bit-reproducible for a given build.

#include <Eigen/Core>
#include <algorithm>
#include <cstdint>
#include <limits>
#include <vector>

#include "pcn/tensor.hpp"

namespace pcn::kernels {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr std::size_t kKernel = 3;
constexpr std::size_t kTaps = kKernel * kKernel;

// Valid output columns [lo, hi) for a horizontal tap offset dx in {-1,0,1}.
inline std::pair<std::size_t, std::size_t> tap_span(std::ptrdiff_t dx, std::size_t W) {
  const std::size_t lo = dx < 0 ? 1 : 0;
  const std::size_t hi = dx > 0 ? W - 1 : W;
  return {std::min(lo, W), hi};
}

// col[(c*9 + ky*3 + kx) * ld + y*W + x] = img[c, y+ky-1, x+kx-1] (zero outside).
// `ld` is the row stride, so several images can share one column matrix.
template <class T>
void im2col(const T* img, std::size_t C, std::size_t H, std::size_t W, T* col, std::size_t ld) {
  const std::size_t hw = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    const T* plane = img + c * hw;
    for (std::size_t ky = 0; ky < kKernel; ++ky) {
      const std::ptrdiff_t dy = std::ptrdiff_t(ky) - 1;
      for (std::size_t kx = 0; kx < kKernel; ++kx) {
        const std::ptrdiff_t dx = std::ptrdiff_t(kx) - 1;
        const auto [lo, hi] = tap_span(dx, W);
        T* row = col + (c * kTaps + ky * kKernel + kx) * ld;
        for (std::size_t y = 0; y < H; ++y) {
          const std::ptrdiff_t sy = std::ptrdiff_t(y) + dy;
          T* dst = row + y * W;
          if (sy < 0 || sy >= std::ptrdiff_t(H) || lo >= hi) {
            std::fill(dst, dst + W, T(0));
            continue;
          }
          const T* src = plane + std::size_t(sy) * W;
          std::fill(dst, dst + lo, T(0));
          std::copy(src + (std::ptrdiff_t(lo) + dx), src + (std::ptrdiff_t(hi) + dx), dst + lo);
          std::fill(dst + hi, dst + W, T(0));
        }
      }
    }
  }
}

template <class T>
void im2col(const T* img, std::size_t C, std::size_t H, std::size_t W, T* col) {
  im2col(img, C, H, W, col, H * W);
}

// Adjoint of im2col: img[c, y+ky-1, x+kx-1] += col[...]
template <class T>
void col2im_add(const T* col, std::size_t C, std::size_t H, std::size_t W, T* img, std::size_t ld) {
  const std::size_t hw = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    T* plane = img + c * hw;
    for (std::size_t ky = 0; ky < kKernel; ++ky) {
      const std::ptrdiff_t dy = std::ptrdiff_t(ky) - 1;
      for (std::size_t kx = 0; kx < kKernel; ++kx) {
        const std::ptrdiff_t dx = std::ptrdiff_t(kx) - 1;
        const auto [lo, hi] = tap_span(dx, W);
        const T* row = col + (c * kTaps + ky * kKernel + kx) * ld;
        for (std::size_t y = 0; y < H; ++y) {
          const std::ptrdiff_t sy = std::ptrdiff_t(y) + dy;
          if (sy < 0 || sy >= std::ptrdiff_t(H)) continue;
          const T* __restrict src = row + y * W + lo;
          T* __restrict dst = plane + std::size_t(sy) * W + (std::ptrdiff_t(lo) + dx);
          for (std::size_t x = 0; x < hi - lo; ++x) dst[x] += src[x];
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, std::size_t C, std::size_t H, std::size_t W, T* img) {
  col2im_add(col, C, H, W, img, H * W);
}

// Images per GEMM group: large enough for efficient products, small enough
// that the column matrix stays around 16 MB.
inline std::size_t group_size(std::size_t N, std::size_t rows, std::size_t hw) {
  constexpr std::size_t kBudget = std::size_t(1) << 18;
  return std::max<std::size_t>(1, std::min(N, kBudget / (rows * hw)));
}

// Fills col (rows x G*hw) from images [n0, n0+G) of an NCHW buffer.
template <class T>
void im2col_group(const T* x, std::size_t n0, std::size_t G, std::size_t C, std::size_t H, std::size_t W,
                  T* col) {
  const std::size_t hw = H * W;
  for (std::size_t g = 0; g < G; ++g) im2col(x + (n0 + g) * C * hw, C, H, W, col + g * hw, G * hw);
}

template <class T>
void col2im_group(const T* col, std::size_t n0, std::size_t G, std::size_t C, std::size_t H, std::size_t W,
                  T* x) {
  const std::size_t hw = H * W;
  for (std::size_t g = 0; g < G; ++g) col2im_add(col + g * hw, C, H, W, x + (n0 + g) * C * hw, G * hw);
}

// NCHW images [n0, n0+G) <-> channel-major matrix (K x G*hw).
template <class T>
void gather_cm(const T* src, std::size_t n0, std::size_t G, std::size_t K, std::size_t hw, T* dst) {
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t k = 0; k < K; ++k)
      std::copy_n(src + ((n0 + g) * K + k) * hw, hw, dst + k * G * hw + g * hw);
}

template <class T>
void scatter_cm(const T* src, std::size_t n0, std::size_t G, std::size_t K, std::size_t hw, T* dst) {
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t k = 0; k < K; ++k)
      std::copy_n(src + k * G * hw + g * hw, hw, dst + ((n0 + g) * K + k) * hw);
}

template <class T>
void scatter_cm_add(const T* src, std::size_t n0, std::size_t G, std::size_t K, std::size_t hw, T* dst) {
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t k = 0; k < K; ++k) {
      const T* s = src + k * G * hw + g * hw;
      T* d = dst + ((n0 + g) * K + k) * hw;
      for (std::size_t i = 0; i < hw; ++i) d[i] += s[i];
    }
}

inline void check_conv_weight(const Shape& w, std::size_t out_c, std::size_t in_c, const char* what) {
  if (w.size() != 4 || w[2] != kKernel || w[3] != kKernel)
    throw ShapeError(std::string(what) + ": weight must be [outC,inC,3,3], got " + shape_str(w));
  if (w[1] != in_c)
    throw ShapeError(std::string(what) + ": input channels " + std::to_string(in_c) +
                     " do not match weight inC " + std::to_string(w[1]));
  if (out_c != 0 && w[0] != out_c)
    throw ShapeError(std::string(what) + ": channels " + std::to_string(out_c) +
                     " do not match weight outC " + std::to_string(w[0]));
}

/// 3x3 cross-correlation, stride 1, zero padding 1. `bias` may be null.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias) {
  const auto [N, C, H, W] = dims4(x.shape(), "conv2d");
  check_conv_weight(w.shape(), 0, C, "conv2d");
  const std::size_t K = w.dim(0), hw = H * W, rows = C * kTaps;
  if (bias && (bias->rank() != 1 || bias->dim(0) != K))
    throw ShapeError("conv2d: bias shape " + shape_str(bias->shape()) + " does not match outC " +
                     std::to_string(K));
  auto y = Tensor<T>::uninit({N, K, H, W});
  const std::size_t G = group_size(N, rows, hw);
  Buffer<T> col(rows * G * hw), out(K * G * hw);
  Eigen::Map<const RowMat<T>> wm(w.data().data(), K, rows);
  for (std::size_t n0 = 0; n0 < N; n0 += G) {
    const std::size_t g = std::min(G, N - n0), cols = g * hw;
    im2col_group(x.data().data(), n0, g, C, H, W, col.data());
    Eigen::Map<RowMat<T>> om(out.data(), K, cols);
    om.noalias() = wm * Eigen::Map<const RowMat<T>>(col.data(), rows, cols);
    if (bias)
      for (std::size_t k = 0; k < K; ++k) om.row(k).array() += (*bias)[k];
    scatter_cm(out.data(), n0, g, K, hw, y.data().data());
  }
  return y;
}

/// Gradients of conv2d. Any output pointer may be null; gw and gb accumulate.
template <class T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy, Tensor<T>* gx,
                     Tensor<T>* gw, Tensor<T>* gb) {
  const auto [N, C, H, W] = dims4(x.shape(), "conv2d_backward");
  const std::size_t K = w.dim(0), hw = H * W, rows = C * kTaps;
  const std::size_t G = group_size(N, rows, hw);
  Buffer<T> col(rows * G * hw), gcm(K * G * hw);
  Eigen::Map<const RowMat<T>> wm(w.data().data(), K, rows);
  for (std::size_t n0 = 0; n0 < N; n0 += G) {
    const std::size_t g = std::min(G, N - n0), cols = g * hw;
    gather_cm(gy.data().data(), n0, g, K, hw, gcm.data());
    Eigen::Map<const RowMat<T>> gym(gcm.data(), K, cols);
    if (gw) {
      im2col_group(x.data().data(), n0, g, C, H, W, col.data());
      Eigen::Map<RowMat<T>> gwm(gw->data().data(), K, rows);
      gwm.noalias() += gym * Eigen::Map<const RowMat<T>>(col.data(), rows, cols).transpose();
    }
    if (gb)
      for (std::size_t k = 0; k < K; ++k) (*gb)[k] += gym.row(k).sum();
    if (gx) {
      Eigen::Map<RowMat<T>> colm(col.data(), rows, cols);
      colm.noalias() = wm.transpose() * gym;
      col2im_group(col.data(), n0, g, C, H, W, gx->data().data());
    }
  }
}

/// Exact adjoint of bias-free conv2d with the same weight: maps B*outC*H*W to B*inC*H*W.
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& y, const Tensor<T>& w) {
  const auto [N, K, H, W] = dims4(y.shape(), "conv_transpose2d");
  if (w.rank() != 4)
    throw ShapeError("conv_transpose2d: weight must be [outC,inC,3,3], got " + shape_str(w.shape()));
  check_conv_weight(w.shape(), K, w.dim(1), "conv_transpose2d");
  const std::size_t C = w.dim(1), hw = H * W, rows = C * kTaps;
  Tensor<T> x({N, C, H, W});
  const std::size_t G = group_size(N, rows, hw);
  Buffer<T> col(rows * G * hw), ycm(K * G * hw);
  Eigen::Map<const RowMat<T>> wm(w.data().data(), K, rows);
  for (std::size_t n0 = 0; n0 < N; n0 += G) {
    const std::size_t g = std::min(G, N - n0), cols = g * hw;
    gather_cm(y.data().data(), n0, g, K, hw, ycm.data());
    Eigen::Map<RowMat<T>> colm(col.data(), rows, cols);
    colm.noalias() = wm.transpose() * Eigen::Map<const RowMat<T>>(ycm.data(), K, cols);
    col2im_group(col.data(), n0, g, C, H, W, x.data().data());
  }
  return x;
}

template <class T>
void conv_transpose2d_backward(const Tensor<T>& y, const Tensor<T>& w, const Tensor<T>& gx,
                               Tensor<T>* gy, Tensor<T>* gw) {
  const auto [N, K, H, W] = dims4(y.shape(), "conv_transpose2d_backward");
  const std::size_t C = w.dim(1), hw = H * W, rows = C * kTaps;
  const std::size_t G = group_size(N, rows, hw);
  Buffer<T> col(rows * G * hw), cm(K * G * hw);
  Eigen::Map<const RowMat<T>> wm(w.data().data(), K, rows);
  for (std::size_t n0 = 0; n0 < N; n0 += G) {
    const std::size_t g = std::min(G, N - n0), cols = g * hw;
    im2col_group(gx.data().data(), n0, g, C, H, W, col.data());
    Eigen::Map<const RowMat<T>> colm(col.data(), rows, cols);
    Eigen::Map<RowMat<T>> cmm(cm.data(), K, cols);
    if (gy) {
      cmm.noalias() = wm * colm;
      scatter_cm_add(cm.data(), n0, g, K, hw, gy->data().data());
    }
    if (gw) {
      gather_cm(y.data().data(), n0, g, K, hw, cm.data());
      Eigen::Map<RowMat<T>> gwm(gw->data().data(), K, rows);
      gwm.noalias() += cmm * colm.transpose();
    }
  }
}

/// 2x2 max-pool, stride 2. `argmax` receives the flat input index of each output;
/// ties resolve to the first position in row-major scan order.
template <class T>
Tensor<T> maxpool2x2(const Tensor<T>& x, std::vector<std::uint32_t>* argmax) {
  const auto [N, C, H, W] = dims4(x.shape(), "maxpool2x2");
  if (H % 2 || W % 2)
    throw ShapeError("maxpool2x2: H and W must be even, got " + shape_str(x.shape()));
  const std::size_t oh = H / 2, ow = W / 2;
  auto y = Tensor<T>::uninit({N, C, oh, ow});
  if (argmax) argmax->resize(y.numel());
  std::size_t o = 0;
  for (std::size_t p = 0; p < N * C; ++p) {
    const std::size_t base = p * H * W;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j, ++o) {
        std::size_t best = base + (2 * i) * W + 2 * j;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = base + (2 * i + dy) * W + 2 * j + dx;
            if (x[idx] > x[best]) best = idx;
          }
        y[o] = x[best];
        if (argmax) (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return y;
}

/// Per-axis taps for align-corners-false bilinear resampling at scale 2.
struct UpsampleTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> w_hi;  // weight of `hi`; weight of `lo` is 1 - w_hi
};

inline UpsampleTaps upsample_taps(std::size_t in) {
  UpsampleTaps t;
  const std::size_t out = 2 * in;
  t.lo.resize(out);
  t.hi.resize(out);
  t.w_hi.resize(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (double(o) + 0.5) / 2.0 - 0.5;
    if (src < 0) src = 0;
    const auto lo = static_cast<std::size_t>(src);
    t.lo[o] = lo;
    t.hi[o] = std::min(lo + 1, in - 1);
    t.w_hi[o] = src - double(lo);
  }
  return t;
}

template <class T>
Tensor<T> bilinear_upsample2x(const Tensor<T>& x) {
  const auto [N, C, H, W] = dims4(x.shape(), "bilinear_upsample2x");
  const auto ty = upsample_taps(H), tx = upsample_taps(W);
  const std::size_t oh = 2 * H, ow = 2 * W;
  auto y = Tensor<T>::uninit({N, C, oh, ow});
  for (std::size_t p = 0; p < N * C; ++p) {
    const T* src = x.data().data() + p * H * W;
    T* dst = y.data().data() + p * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      const T wy1 = T(ty.w_hi[i]), wy0 = T(1) - wy1;
      const T* r0 = src + ty.lo[i] * W;
      const T* r1 = src + ty.hi[i] * W;
      for (std::size_t j = 0; j < ow; ++j) {
        const T wx1 = T(tx.w_hi[j]), wx0 = T(1) - wx1;
        dst[i * ow + j] = wy0 * (wx0 * r0[tx.lo[j]] + wx1 * r0[tx.hi[j]]) +
                          wy1 * (wx0 * r1[tx.lo[j]] + wx1 * r1[tx.hi[j]]);
      }
    }
  }
  return y;
}

/// Adjoint of bilinear_upsample2x; `gx` has the pre-upsample shape and accumulates.
template <class T>
void bilinear_upsample2x_backward(const Tensor<T>& gy, Tensor<T>& gx) {
  const auto [N, C, H, W] = dims4(gx.shape(), "bilinear_upsample2x_backward");
  const auto ty = upsample_taps(H), tx = upsample_taps(W);
  const std::size_t oh = 2 * H, ow = 2 * W;
  for (std::size_t p = 0; p < N * C; ++p) {
    const T* g = gy.data().data() + p * oh * ow;
    T* dst = gx.data().data() + p * H * W;
    for (std::size_t i = 0; i < oh; ++i) {
      const T wy1 = T(ty.w_hi[i]), wy0 = T(1) - wy1;
      T* r0 = dst + ty.lo[i] * W;
      T* r1 = dst + ty.hi[i] * W;
      for (std::size_t j = 0; j < ow; ++j) {
        const T wx1 = T(tx.w_hi[j]), wx0 = T(1) - wx1;
        const T v = g[i * ow + j];
        r0[tx.lo[j]] += wy0 * wx0 * v;
        r0[tx.hi[j]] += wy0 * wx1 * v;
        r1[tx.lo[j]] += wy1 * wx0 * v;
        r1[tx.hi[j]] += wy1 * wx1 * v;
      }
    }
  }
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const auto [N, C, H, W] = dims4(x.shape(), "global_avg_pool");
  auto y = Tensor<T>::uninit({N, C});
  const std::size_t hw = H * W;
  for (std::size_t p = 0; p < N * C; ++p) {
    T s = 0;
    const T* src = x.data().data() + p * hw;
    for (std::size_t i = 0; i < hw; ++i) s += src[i];
    y[p] = s / T(hw);
  }
  return y;
}

/// input [B,C] times weight [K,C] transposed, plus bias [K].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1)
    throw ShapeError("linear: expected [B,C] input, [K,C] weight, [K] bias");
  if (x.dim(1) != w.dim(1))
    throw ShapeError("linear: input features " + std::to_string(x.dim(1)) +
                     " do not match weight columns " + std::to_string(w.dim(1)));
  if (b.dim(0) != w.dim(0))
    throw ShapeError("linear: bias length " + std::to_string(b.dim(0)) + " does not match weight rows " +
                     std::to_string(w.dim(0)));
  const std::size_t B = x.dim(0), C = x.dim(1), K = w.dim(0);
  auto y = Tensor<T>::uninit({B, K});
  Eigen::Map<RowMat<T>> ym(y.data().data(), B, K);
  ym.noalias() = Eigen::Map<const RowMat<T>>(x.data().data(), B, C) *
                 Eigen::Map<const RowMat<T>>(w.data().data(), K, C).transpose();
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t k = 0; k < K; ++k) y[i * K + k] += b[k];
  return y;
}

/// Row-wise max-subtracted softmax of a [B,K] matrix.
template <class T>
Tensor<T> softmax(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax: expected [B,K], got " + shape_str(logits.shape()));
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  auto p = Tensor<T>::uninit(logits.shape());
  for (std::size_t i = 0; i < B; ++i) {
    const T* row = logits.data().data() + i * K;
    const T m = *std::max_element(row, row + K);
    T s = 0;
    for (std::size_t k = 0; k < K; ++k) s += (p[i * K + k] = std::exp(row[k] - m));
    for (std::size_t k = 0; k < K; ++k) p[i * K + k] /= s;
  }
  return p;
}

}  // namespace pcn::kernels
