#include "ugformer/deform_conv.hpp"

#include <cmath>
#include <limits>

#include "ugformer/kernels.hpp"

namespace ugformer {

namespace {

template <typename T>
struct Corners {
  std::ptrdiff_t y0, x0;
  T ly, lx;
};

template <typename T>
Corners<T> corners(T row, T col) {
  const T fy = std::floor(row), fx = std::floor(col);
  return {static_cast<std::ptrdiff_t>(fy), static_cast<std::ptrdiff_t>(fx), row - fy, col - fx};
}

template <typename T>
T read(const T* plane, std::ptrdiff_t h, std::ptrdiff_t w, std::ptrdiff_t y, std::ptrdiff_t x) {
  return (y >= 0 && y < h && x >= 0 && x < w) ? plane[y * w + x] : T(0);
}

}  // namespace

template <typename T>
T bilinear_zero_pad(const T* plane, std::size_t h, std::size_t w, T row, T col) {
  const auto c = corners(row, col);
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  const T v00 = read(plane, H, W, c.y0, c.x0), v01 = read(plane, H, W, c.y0, c.x0 + 1);
  const T v10 = read(plane, H, W, c.y0 + 1, c.x0), v11 = read(plane, H, W, c.y0 + 1, c.x0 + 1);
  return (T(1) - c.ly) * ((T(1) - c.lx) * v00 + c.lx * v01) + c.ly * ((T(1) - c.lx) * v10 + c.lx * v11);
}

template <typename T>
DeformConv2d<T>::DeformConv2d(std::size_t in_channels, std::size_t out_channels, const ParamInit& init,
                              const std::string& name)
    : offset_conv(in_channels, kOffsetChannels, 3, 1, 1, init, name + ".offset"),
      in_(in_channels),
      out_(out_channels) {
  weight = Param<T>(init.normal<T>(name + ".weight", {out_, in_, 3, 3},
                                   std::sqrt(2.0 / static_cast<double>(in_ * kTaps))));
  bias = Param<T>(Tensor<T>({out_}));
  // Zero offsets: the block starts out as a regular convolution.
  offset_conv.weight.value.fill(T(0));
  offset_conv.bias.value.fill(T(0));
}

template <typename T>
void DeformConv2d<T>::sample_columns(const T* x, const T* off, std::size_t h, std::size_t w, T* cols) const {
  const std::size_t n = h * w;
  for (std::size_t c = 0; c < in_; ++c) {
    const T* plane = x + c * n;
    for (std::size_t k = 0; k < kTaps; ++k) {
      const auto ki = static_cast<T>(k / 3) - T(1), kj = static_cast<T>(k % 3) - T(1);
      const T* dy = off + (2 * k) * n;
      const T* dx = off + (2 * k + 1) * n;
      T* row = cols + (c * kTaps + k) * n;
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          const std::size_t p = i * w + j;
          row[p] = bilinear_zero_pad(plane, h, w, static_cast<T>(i) + ki + dy[p], static_cast<T>(j) + kj + dx[p]);
        }
      }
    }
  }
}

template <typename T>
Tensor<T> DeformConv2d<T>::forward(const Tensor<T>& x) {
  if (x.rank() != 4 || x.dim(1) != in_) {
    throw Error(ErrorKind::ShapeMismatch, "deformable conv expects [B," + std::to_string(in_) + ",H,W], got " +
                                              shape_string(x.dims()));
  }
  input_ = x;
  offsets_ = offset_conv.forward(x);
  const std::size_t batch = x.dim(0), h = x.dim(2), w = x.dim(3), n = h * w;
  Tensor<T> y({batch, out_, h, w});
  std::vector<T> cols(in_ * kTaps * n);
  for (std::size_t b = 0; b < batch; ++b) {
    sample_columns(x.data() + b * in_ * n, offsets_.data() + b * kOffsetChannels * n, h, w, cols.data());
    T* yb = y.data() + b * out_ * n;
    kernels::gemm(false, false, out_, n, in_ * kTaps, T(1), weight.value.data(), cols.data(), T(0), yb);
    for (std::size_t o = 0; o < out_; ++o)
      for (std::size_t p = 0; p < n; ++p) yb[o * n + p] += bias.value[o];
  }
  return y;
}

template <typename T>
Tensor<T> DeformConv2d<T>::backward(const Tensor<T>& dy) {
  const Tensor<T>& x = input_;
  const std::size_t batch = x.dim(0), h = x.dim(2), w = x.dim(3), n = h * w;
  require_shape(dy, {batch, out_, h, w}, "deformable conv backward");
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  Tensor<T> dx(x.dims());
  Tensor<T> doff(offsets_.dims());
  std::vector<T> cols(in_ * kTaps * n), dcols(in_ * kTaps * n);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* xb = x.data() + b * in_ * n;
    const T* off = offsets_.data() + b * kOffsetChannels * n;
    const T* dyb = dy.data() + b * out_ * n;
    sample_columns(xb, off, h, w, cols.data());
    kernels::gemm(false, true, out_, in_ * kTaps, n, T(1), dyb, cols.data(), T(1), weight.grad.data());
    for (std::size_t o = 0; o < out_; ++o) {
      T acc = 0;
      for (std::size_t p = 0; p < n; ++p) acc += dyb[o * n + p];
      bias.grad[o] += acc;
    }
    kernels::gemm(true, false, in_ * kTaps, n, out_, T(1), weight.value.data(), dyb, T(0), dcols.data());

    T* dxb = dx.data() + b * in_ * n;
    T* doffb = doff.data() + b * kOffsetChannels * n;
    for (std::size_t c = 0; c < in_; ++c) {
      const T* plane = xb + c * n;
      T* dplane = dxb + c * n;
      for (std::size_t k = 0; k < kTaps; ++k) {
        const auto ki = static_cast<T>(k / 3) - T(1), kj = static_cast<T>(k % 3) - T(1);
        const T* oy = off + (2 * k) * n;
        const T* ox = off + (2 * k + 1) * n;
        T* goy = doffb + (2 * k) * n;
        T* gox = doffb + (2 * k + 1) * n;
        const T* g = dcols.data() + (c * kTaps + k) * n;
        for (std::size_t i = 0; i < h; ++i) {
          for (std::size_t j = 0; j < w; ++j) {
            const std::size_t p = i * w + j;
            if (g[p] == T(0)) continue;
            const auto cr = corners(static_cast<T>(i) + ki + oy[p], static_cast<T>(j) + kj + ox[p]);
            const T v00 = read(plane, H, W, cr.y0, cr.x0), v01 = read(plane, H, W, cr.y0, cr.x0 + 1);
            const T v10 = read(plane, H, W, cr.y0 + 1, cr.x0), v11 = read(plane, H, W, cr.y0 + 1, cr.x0 + 1);
            goy[p] += g[p] * ((T(1) - cr.lx) * (v10 - v00) + cr.lx * (v11 - v01));
            gox[p] += g[p] * ((T(1) - cr.ly) * (v01 - v00) + cr.ly * (v11 - v10));
            const std::ptrdiff_t ys[2] = {cr.y0, cr.y0 + 1}, xs[2] = {cr.x0, cr.x0 + 1};
            const T wy[2] = {T(1) - cr.ly, cr.ly}, wx[2] = {T(1) - cr.lx, cr.lx};
            for (int a = 0; a < 2; ++a) {
              if (ys[a] < 0 || ys[a] >= H) continue;
              for (int e = 0; e < 2; ++e) {
                if (xs[e] < 0 || xs[e] >= W) continue;
                dplane[ys[a] * W + xs[e]] += g[p] * wy[a] * wx[e];
              }
            }
          }
        }
      }
    }
  }
  add_inplace(dx, offset_conv.backward(doff));
  return dx;
}

template <typename T>
T DeformConv2d<T>::min_seam_distance() const {
  T best = std::numeric_limits<T>::infinity();
  if (offsets_.empty()) return best;
  // Nominal tap positions are integers, so seams depend only on the offsets.
  for (std::size_t i = 0; i < offsets_.size(); ++i) {
    const T frac = offsets_[i] - std::floor(offsets_[i]);
    best = std::min(best, std::min(frac, T(1) - frac));
  }
  return best;
}

template <typename T>
void DeformConv2d<T>::collect(const std::string& prefix, ParamList<T>& out) {
  out.push_back({prefix + ".weight", &weight});
  out.push_back({prefix + ".bias", &bias});
  offset_conv.collect(prefix + ".offset", out);
}

template class DeformConv2d<float>;
template class DeformConv2d<double>;
template float bilinear_zero_pad<float>(const float*, std::size_t, std::size_t, float, float);
template double bilinear_zero_pad<double>(const double*, std::size_t, std::size_t, double, double);

}  // namespace ugformer
