#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>

#include <Eigen/Core>

namespace ugformer::kernels {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// C[M,N] = alpha * op(A) * op(B) + beta * C, all row-major contiguous.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, const T* b, T beta, T* c) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  MatMap<T> cm(c, M, N);
  if (beta == T(0)) {
    cm.setZero();
  } else if (beta != T(1)) {
    cm *= beta;
  }
  if (!trans_a && !trans_b) {
    cm.noalias() += alpha * ConstMatMap<T>(a, M, K) * ConstMatMap<T>(b, K, N);
  } else if (trans_a && !trans_b) {
    cm.noalias() += alpha * ConstMatMap<T>(a, K, M).transpose() * ConstMatMap<T>(b, K, N);
  } else if (!trans_a && trans_b) {
    cm.noalias() += alpha * ConstMatMap<T>(a, M, K) * ConstMatMap<T>(b, N, K).transpose();
  } else {
    cm.noalias() += alpha * ConstMatMap<T>(a, K, M).transpose() * ConstMatMap<T>(b, N, K).transpose();
  }
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel, stride, pad;

  std::size_t out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
  std::size_t col_rows() const { return channels * kernel * kernel; }
  std::size_t col_cols() const { return out_height() * out_width(); }
};

// cols[(c*k + ki)*k + kj, oy*Wo + ox] = x[c, oy*s - p + ki, ox*s - p + kj] (zero outside).
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  const auto h = static_cast<std::ptrdiff_t>(g.height), w = static_cast<std::ptrdiff_t>(g.width);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* xc = x + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj, ++row) {
        T* dst = cols + row * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          T* drow = dst + oy * wo;
          if (iy < 0 || iy >= h) {
            for (std::size_t ox = 0; ox < wo; ++ox) drow[ox] = T(0);
            continue;
          }
          const T* src = xc + iy * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            drow[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates into dx.
template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* dx) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  const auto h = static_cast<std::ptrdiff_t>(g.height), w = static_cast<std::ptrdiff_t>(g.width);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* xc = dx + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj, ++row) {
        const T* src = cols + row * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= h) continue;
          T* dst = xc + iy * w;
          const T* srow = src + oy * wo;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < w) dst[ix] += srow[ox];
          }
        }
      }
    }
  }
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// Row-wise softmax in place over an [rows, cols] row-major block.
template <typename T>
void softmax_rows(T* m, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = m + r * cols;
    T mx = row[0];
    for (std::size_t c = 1; c < cols; ++c) mx = row[c] > mx ? row[c] : mx;
    T sum = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      sum += row[c];
    }
    const T inv = T(1) / sum;
    for (std::size_t c = 0; c < cols; ++c) row[c] *= inv;
  }
}

// Given probabilities p and upstream dp (both [rows, cols]), writes d(logits) into dp.
template <typename T>
void softmax_rows_backward(const T* p, T* dp, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* pr = p + r * cols;
    T* dr = dp + r * cols;
    T inner = 0;
    for (std::size_t c = 0; c < cols; ++c) inner += pr[c] * dr[c];
    for (std::size_t c = 0; c < cols; ++c) dr[c] = pr[c] * (dr[c] - inner);
  }
}

}  // namespace ugformer::kernels
