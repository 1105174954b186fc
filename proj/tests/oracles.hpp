#pragma once

// Independent reference implementations used by the tests. Deliberately naive:
// scalar loops in double precision, no shared code with the library kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <utility>
#include <vector>

#include "ugformer/network.hpp"
#include "ugformer/tensor.hpp"

namespace oracle {

using ugformer::Shape;
using ugformer::Tensor;

template <typename T>
Tensor<T> random_tensor(Shape dims, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(std::move(dims));
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

// Direct sliding-window convolution; x [B,Ci,H,W], w [Co,Ci,k,k], bias [Co].
inline Tensor<double> conv2d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& bias,
                             std::size_t stride, std::size_t pad) {
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), k = w.dim(2);
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  Tensor<double> y({B, Co, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = bias[o];
          for (std::size_t c = 0; c < Ci; ++c)
            for (std::size_t di = 0; di < k; ++di)
              for (std::size_t dj = 0; dj < k; ++dj) {
                const long r = static_cast<long>(i * stride + di) - static_cast<long>(pad);
                const long s = static_cast<long>(j * stride + dj) - static_cast<long>(pad);
                if (r < 0 || s < 0 || r >= static_cast<long>(H) || s >= static_cast<long>(W)) continue;
                acc += x(b, c, r, s) * w(o, c, di, dj);
              }
          y(b, o, i, j) = acc;
        }
  return y;
}

// Transposed 2x2 stride-2 convolution computed as: insert one zero between input
// pixels, pad by one, and run a stride-1 convolution with the spatially flipped,
// in/out-swapped kernel. w is [Ci, Co, 2, 2].
inline Tensor<double> conv_transpose_zero_insert(const Tensor<double>& x, const Tensor<double>& w,
                                                 const Tensor<double>& bias) {
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3), Co = w.dim(1);
  Tensor<double> z({B, Ci, 2 * H + 1, 2 * W + 1});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < Ci; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) z(b, c, 1 + 2 * i, 1 + 2 * j) = x(b, c, i, j);
  Tensor<double> flipped({Co, Ci, 2, 2});
  for (std::size_t o = 0; o < Co; ++o)
    for (std::size_t c = 0; c < Ci; ++c)
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t e = 0; e < 2; ++e) flipped(o, c, a, e) = w(c, o, 1 - a, 1 - e);
  return conv2d(z, flipped, bias, 1, 0);
}

// Bilinear read at fractional (row, col) with zero outside, written from the
// four-neighbour definition.
inline double bilinear(const std::vector<std::vector<double>>& img, double row, double col) {
  const long H = static_cast<long>(img.size()), W = static_cast<long>(img[0].size());
  const long r0 = static_cast<long>(std::floor(row)), c0 = static_cast<long>(std::floor(col));
  const double fr = row - r0, fc = col - c0;
  auto at = [&](long r, long c) { return (r < 0 || c < 0 || r >= H || c >= W) ? 0.0 : img[r][c]; };
  return (1 - fr) * (1 - fc) * at(r0, c0) + (1 - fr) * fc * at(r0, c0 + 1) + fr * (1 - fc) * at(r0 + 1, c0) +
         fr * fc * at(r0 + 1, c0 + 1);
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// Spectral radius of a symmetric matrix by power iteration on M^2 (robust to a
// dominant negative eigenvalue).
inline double spectral_radius(const Tensor<double>& m, int iters = 2000) {
  const std::size_t n = m.dim(0);
  std::vector<double> v(n), w(n), u(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i);
  double lambda2 = 0;
  for (int it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) s += m(i, j) * v[j];
      w[i] = s;
    }
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) s += m(i, j) * w[j];
      u[i] = s;
    }
    double norm = 0, dot = 0;
    for (std::size_t i = 0; i < n; ++i) {
      norm += u[i] * u[i];
      dot += u[i] * v[i];
    }
    double vnorm = 0;
    for (double x : v) vnorm += x * x;
    lambda2 = dot / vnorm;
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < n; ++i) v[i] = u[i] / norm;
  }
  return std::sqrt(std::abs(lambda2));
}

struct Box {
  std::size_t x_min, y_min, x_max, y_max;
};

// Bounding box by scanning every pixel; nullopt-like flag when empty.
inline std::pair<bool, Box> bounding_box(const Tensor<float>& mask) {
  bool any = false;
  Box b{0, 0, 0, 0};
  for (std::size_t r = 0; r < mask.dim(0); ++r)
    for (std::size_t c = 0; c < mask.dim(1); ++c) {
      if (mask(r, c) == 0.0f) continue;
      if (!any) {
        b = {c, r, c, r};
        any = true;
      }
      b.x_min = std::min(b.x_min, c);
      b.x_max = std::max(b.x_max, c);
      b.y_min = std::min(b.y_min, r);
      b.y_max = std::max(b.y_max, r);
    }
  return {any, b};
}

// Dice via explicit index sets.
template <typename T>
double dice_sets(const Tensor<T>& p, const Tensor<T>& g) {
  std::set<std::size_t> ps, gs;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] != T(0)) ps.insert(i);
    if (g[i] != T(0)) gs.insert(i);
  }
  if (ps.empty() && gs.empty()) return 1.0;
  std::size_t inter = 0;
  for (std::size_t i : ps) inter += gs.count(i);
  return 2.0 * static_cast<double>(inter) / static_cast<double>(ps.size() + gs.size());
}

// Trainable parameter count of a SegmentationNet, from the architecture alone.
inline std::size_t parameter_count(const ugformer::ModelConfig& c) {
  const std::size_t C0 = c.base_channels, L = c.num_stages;
  auto conv = [](std::size_t in, std::size_t out, std::size_t k) { return in * out * k * k + out; };
  auto cgn = [&](std::size_t in, std::size_t out) { return conv(in, out, 3) + 2 * out; };
  std::size_t n = 0;
  if (c.architecture == ugformer::Architecture::UGformer) {
    n += cgn(c.in_channels, C0);
    for (std::size_t s = 1; s <= L; ++s) {
      const std::size_t in = C0 << (s - 1), D = C0 << s;
      n += conv(in, D, 2);
      n += 2 * D;                                    // norm2
      if (c.use_mhsa) n += 2 * D + 4 * D * D + 1;    // norm1, projections, a
      if (c.use_dconv) n += conv(D, D, 3) + conv(D, 18, 3) + 1;  // kernel, offsets, b
      n += conv(D, 4 * D, 1) + conv(4 * D, D, 1);    // feed-forward
    }
  } else {
    for (std::size_t s = 0; s <= L; ++s) {
      const std::size_t in = s == 0 ? c.in_channels : C0 << (s - 1), out = C0 << s;
      n += cgn(in, out) + cgn(out, out);
    }
  }
  if (c.use_gcn)
    for (std::size_t s = 0; s < L; ++s) n += 2 * (C0 << s) * (C0 << s);
  for (std::size_t k = 0; k < L; ++k) {
    const std::size_t C = C0 << (L - k), h = C / 2;
    n += C * h * 4 + h;  // transposed conv
    n += cgn(C, h) + cgn(h, h);
  }
  n += C0 * C0 * 4 + C0;  // head transposed conv
  n += conv(C0, c.num_classes, 1);
  return n;
}

}  // namespace oracle
