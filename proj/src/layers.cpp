#include "ugformer/layers.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "ugformer/kernels.hpp"

namespace ugformer {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

template <typename T>
Tensor<T> ParamInit::normal(const std::string& name, Shape dims, double stddev) const {
  std::mt19937_64 rng(seed_ ^ fnv1a(name));
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> t(std::move(dims));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template Tensor<float> ParamInit::normal<float>(const std::string&, Shape, double) const;
template Tensor<double> ParamInit::normal<double>(const std::string&, Shape, double) const;

namespace {

void require_nchw(const Shape& d, std::size_t channels, const char* what) {
  if (d.size() != 4 || d[1] != channels) {
    throw Error(ErrorKind::ShapeMismatch, std::string(what) + ": expected [B," + std::to_string(channels) +
                                              ",H,W], got " + shape_string(d));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d

template <typename T>
Conv2d<T>::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                  std::size_t stride, std::size_t pad, const ParamInit& init, const std::string& name)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), pad_(pad) {
  const double fan_in = static_cast<double>(in_channels * kernel * kernel);
  weight = Param<T>(init.normal<T>(name + ".weight", {out_, in_, kernel_, kernel_}, std::sqrt(2.0 / fan_in)));
  bias = Param<T>(Tensor<T>({out_}));
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) {
  require_nchw(x.dims(), in_, "conv2d");
  const kernels::ConvGeometry g{in_, x.dim(2), x.dim(3), kernel_, stride_, pad_};
  if (x.dim(2) + 2 * pad_ < kernel_ || x.dim(3) + 2 * pad_ < kernel_) {
    throw Error(ErrorKind::ShapeMismatch, "conv2d: input smaller than kernel");
  }
  input_ = x;
  const std::size_t batch = x.dim(0), ho = g.out_height(), wo = g.out_width(), n = ho * wo;
  const std::size_t kk = g.col_rows();
  Tensor<T> y({batch, out_, ho, wo});
  const bool pointwise = kernel_ == 1 && stride_ == 1 && pad_ == 0;
  std::vector<T> cols(pointwise ? 0 : kk * n);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* xb = x.data() + b * in_ * x.dim(2) * x.dim(3);
    const T* src = xb;
    if (!pointwise) {
      kernels::im2col(xb, g, cols.data());
      src = cols.data();
    }
    T* yb = y.data() + b * out_ * n;
    kernels::gemm(false, false, out_, n, kk, T(1), weight.value.data(), src, T(0), yb);
    for (std::size_t o = 0; o < out_; ++o) {
      const T bv = bias.value[o];
      for (std::size_t i = 0; i < n; ++i) yb[o * n + i] += bv;
    }
  }
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& dy) {
  const Tensor<T>& x = input_;
  const kernels::ConvGeometry g{in_, x.dim(2), x.dim(3), kernel_, stride_, pad_};
  const std::size_t batch = x.dim(0), n = g.col_cols(), kk = g.col_rows();
  require_shape(dy, {batch, out_, g.out_height(), g.out_width()}, "conv2d backward");
  Tensor<T> dx(x.dims());
  const bool pointwise = kernel_ == 1 && stride_ == 1 && pad_ == 0;
  std::vector<T> cols(pointwise ? 0 : kk * n);
  std::vector<T> dcols(pointwise ? 0 : kk * n);
  const std::size_t plane = in_ * x.dim(2) * x.dim(3);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* xb = x.data() + b * plane;
    const T* dyb = dy.data() + b * out_ * n;
    const T* src = xb;
    if (!pointwise) {
      kernels::im2col(xb, g, cols.data());
      src = cols.data();
    }
    kernels::gemm(false, true, out_, kk, n, T(1), dyb, src, T(1), weight.grad.data());
    for (std::size_t o = 0; o < out_; ++o) {
      T acc = 0;
      for (std::size_t i = 0; i < n; ++i) acc += dyb[o * n + i];
      bias.grad[o] += acc;
    }
    T* dxb = dx.data() + b * plane;
    if (pointwise) {
      kernels::gemm(true, false, kk, n, out_, T(1), weight.value.data(), dyb, T(0), dxb);
    } else {
      kernels::gemm(true, false, kk, n, out_, T(1), weight.value.data(), dyb, T(0), dcols.data());
      kernels::col2im(dcols.data(), g, dxb);
    }
  }
  return dx;
}

template <typename T>
void Conv2d<T>::collect(const std::string& prefix, ParamList<T>& out) {
  out.push_back({prefix + ".weight", &weight});
  out.push_back({prefix + ".bias", &bias});
}

// ---------------------------------------------------------------------------
// ConvTranspose2x2

template <typename T>
ConvTranspose2x2<T>::ConvTranspose2x2(std::size_t in_channels, std::size_t out_channels,
                                      const ParamInit& init, const std::string& name)
    : in_(in_channels), out_(out_channels) {
  weight = Param<T>(init.normal<T>(name + ".weight", {in_, out_, 2, 2}, std::sqrt(2.0 / static_cast<double>(in_))));
  bias = Param<T>(Tensor<T>({out_}));
}

template <typename T>
Tensor<T> ConvTranspose2x2<T>::forward(const Tensor<T>& x) {
  require_nchw(x.dims(), in_, "conv_transpose");
  input_ = x;
  const std::size_t batch = x.dim(0), h = x.dim(2), w = x.dim(3), n = h * w;
  Tensor<T> y({batch, out_, 2 * h, 2 * w});
  std::vector<T> tmp(out_ * 4 * n);
  for (std::size_t b = 0; b < batch; ++b) {
    // tmp[(o*4 + tap), p] = sum_c W[c, o, tap] x[c, p]
    kernels::gemm(true, false, out_ * 4, n, in_, T(1), weight.value.data(), x.data() + b * in_ * n, T(0),
                  tmp.data());
    T* yb = y.data() + b * out_ * 4 * n;
    for (std::size_t o = 0; o < out_; ++o) {
      for (std::size_t tap = 0; tap < 4; ++tap) {
        const std::size_t ty = tap / 2, tx = tap % 2;
        const T* src = tmp.data() + (o * 4 + tap) * n;
        for (std::size_t i = 0; i < h; ++i) {
          T* dst = yb + (o * 2 * h + 2 * i + ty) * 2 * w + tx;
          for (std::size_t j = 0; j < w; ++j) dst[2 * j] = src[i * w + j] + bias.value[o];
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> ConvTranspose2x2<T>::backward(const Tensor<T>& dy) {
  const Tensor<T>& x = input_;
  const std::size_t batch = x.dim(0), h = x.dim(2), w = x.dim(3), n = h * w;
  require_shape(dy, {batch, out_, 2 * h, 2 * w}, "conv_transpose backward");
  Tensor<T> dx(x.dims());
  std::vector<T> tmp(out_ * 4 * n);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* dyb = dy.data() + b * out_ * 4 * n;
    for (std::size_t o = 0; o < out_; ++o) {
      T acc = 0;
      for (std::size_t tap = 0; tap < 4; ++tap) {
        const std::size_t ty = tap / 2, tx = tap % 2;
        T* dst = tmp.data() + (o * 4 + tap) * n;
        for (std::size_t i = 0; i < h; ++i) {
          const T* src = dyb + (o * 2 * h + 2 * i + ty) * 2 * w + tx;
          for (std::size_t j = 0; j < w; ++j) {
            dst[i * w + j] = src[2 * j];
            acc += src[2 * j];
          }
        }
      }
      bias.grad[o] += acc;
    }
    const T* xb = x.data() + b * in_ * n;
    // dW[c, (o,tap)] += x[c, p] tmp[(o,tap), p]
    kernels::gemm(false, true, in_, out_ * 4, n, T(1), xb, tmp.data(), T(1), weight.grad.data());
    kernels::gemm(false, false, in_, n, out_ * 4, T(1), weight.value.data(), tmp.data(), T(0),
                  dx.data() + b * in_ * n);
  }
  return dx;
}

template <typename T>
void ConvTranspose2x2<T>::collect(const std::string& prefix, ParamList<T>& out) {
  out.push_back({prefix + ".weight", &weight});
  out.push_back({prefix + ".bias", &bias});
}

// ---------------------------------------------------------------------------
// BatchNorm2d

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::size_t channels, const ParamInit& init) : channels_(channels) {
  gamma = Param<T>(init.constant<T>({channels}, 1.0));
  beta = Param<T>(init.constant<T>({channels}, 0.0));
  running_mean = Param<T>(init.constant<T>({channels}, 0.0), false);
  running_var = Param<T>(init.constant<T>({channels}, 1.0), false);
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, Mode mode) {
  require_nchw(x.dims(), channels_, "batch_norm");
  const std::size_t batch = x.dim(0), hw = x.dim(2) * x.dim(3);
  const std::size_t count = batch * hw;
  last_mode_ = mode;
  xhat_ = Tensor<T>(x.dims());
  inv_std_.assign(channels_, T(0));
  Tensor<T> y(x.dims());
  for (std::size_t c = 0; c < channels_; ++c) {
    T mean, var;
    if (mode == Mode::Train) {
      T sum = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = x.data() + (b * channels_ + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) sum += p[i];
      }
      mean = sum / static_cast<T>(count);
      T sq = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = x.data() + (b * channels_ + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) sq += (p[i] - mean) * (p[i] - mean);
      }
      var = sq / static_cast<T>(count);
      const T unbiased = count > 1 ? sq / static_cast<T>(count - 1) : var;
      running_mean.value[c] = (T(1) - momentum) * running_mean.value[c] + momentum * mean;
      running_var.value[c] = (T(1) - momentum) * running_var.value[c] + momentum * unbiased;
    } else {
      mean = running_mean.value[c];
      var = running_var.value[c];
    }
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std_[c] = inv;
    const T g = gamma.value[c], bt = beta.value[c];
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * channels_ + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const T xh = (x[off + i] - mean) * inv;
        xhat_[off + i] = xh;
        y[off + i] = g * xh + bt;
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> BatchNorm2d<T>::backward(const Tensor<T>& dy) {
  require_shape(dy, xhat_.dims(), "batch_norm backward");
  const std::size_t batch = dy.dim(0), hw = dy.dim(2) * dy.dim(3);
  const T count = static_cast<T>(batch * hw);
  Tensor<T> dx(dy.dims());
  for (std::size_t c = 0; c < channels_; ++c) {
    T sum_dy = 0, sum_dy_xh = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * channels_ + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        sum_dy += dy[off + i];
        sum_dy_xh += dy[off + i] * xhat_[off + i];
      }
    }
    gamma.grad[c] += sum_dy_xh;
    beta.grad[c] += sum_dy;
    const T g = gamma.value[c], inv = inv_std_[c];
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * channels_ + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        if (last_mode_ == Mode::Train) {
          dx[off + i] = g * inv / count * (count * dy[off + i] - sum_dy - xhat_[off + i] * sum_dy_xh);
        } else {
          dx[off + i] = g * inv * dy[off + i];
        }
      }
    }
  }
  return dx;
}

template <typename T>
void BatchNorm2d<T>::collect(const std::string& prefix, ParamList<T>& out) {
  out.push_back({prefix + ".gamma", &gamma});
  out.push_back({prefix + ".beta", &beta});
  out.push_back({prefix + ".running_mean", &running_mean});
  out.push_back({prefix + ".running_var", &running_var});
}

// ---------------------------------------------------------------------------
// TokenNorm

template <typename T>
TokenNorm<T>::TokenNorm(std::size_t channels, const ParamInit& init) {
  gamma = Param<T>(init.constant<T>({channels}, 1.0));
  beta = Param<T>(init.constant<T>({channels}, 0.0));
}

template <typename T>
Tensor<T> TokenNorm<T>::forward(const Tensor<T>& x) {
  const std::size_t channels = gamma.value.size();
  require_nchw(x.dims(), channels, "token_norm");
  const std::size_t batch = x.dim(0), hw = x.dim(2) * x.dim(3);
  xhat_ = Tensor<T>(x.dims());
  inv_std_.assign(batch * hw, T(0));
  Tensor<T> y(x.dims());
  std::vector<T> mean(hw), sq(hw);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* xb = x.data() + b * channels * hw;
    std::fill(mean.begin(), mean.end(), T(0));
    std::fill(sq.begin(), sq.end(), T(0));
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < hw; ++i) mean[i] += xb[c * hw + i];
    for (std::size_t i = 0; i < hw; ++i) mean[i] /= static_cast<T>(channels);
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < hw; ++i) {
        const T d = xb[c * hw + i] - mean[i];
        sq[i] += d * d;
      }
    for (std::size_t i = 0; i < hw; ++i) {
      inv_std_[b * hw + i] = T(1) / std::sqrt(sq[i] / static_cast<T>(channels) + eps);
    }
    for (std::size_t c = 0; c < channels; ++c) {
      const T g = gamma.value[c], bt = beta.value[c];
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t off = b * channels * hw + c * hw + i;
        const T xh = (xb[c * hw + i] - mean[i]) * inv_std_[b * hw + i];
        xhat_[off] = xh;
        y[off] = g * xh + bt;
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> TokenNorm<T>::backward(const Tensor<T>& dy) {
  require_shape(dy, xhat_.dims(), "token_norm backward");
  const std::size_t channels = gamma.value.size();
  const std::size_t batch = dy.dim(0), hw = dy.dim(2) * dy.dim(3);
  const T cn = static_cast<T>(channels);
  Tensor<T> dx(dy.dims());
  std::vector<T> s1(hw), s2(hw);
  for (std::size_t b = 0; b < batch; ++b) {
    std::fill(s1.begin(), s1.end(), T(0));
    std::fill(s2.begin(), s2.end(), T(0));
    for (std::size_t c = 0; c < channels; ++c) {
      const T g = gamma.value[c];
      T gg = 0, gb = 0;
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t off = b * channels * hw + c * hw + i;
        gg += dy[off] * xhat_[off];
        gb += dy[off];
        const T dxh = dy[off] * g;
        s1[i] += dxh;
        s2[i] += dxh * xhat_[off];
      }
      gamma.grad[c] += gg;
      beta.grad[c] += gb;
    }
    for (std::size_t c = 0; c < channels; ++c) {
      const T g = gamma.value[c];
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t off = b * channels * hw + c * hw + i;
        const T dxh = dy[off] * g;
        dx[off] = inv_std_[b * hw + i] / cn * (cn * dxh - s1[i] - xhat_[off] * s2[i]);
      }
    }
  }
  return dx;
}

template <typename T>
void TokenNorm<T>::collect(const std::string& prefix, ParamList<T>& out) {
  out.push_back({prefix + ".gamma", &gamma});
  out.push_back({prefix + ".beta", &beta});
}

// ---------------------------------------------------------------------------
// Gelu, MaxPool2

template <typename T>
Tensor<T> Gelu<T>::forward(const Tensor<T>& x) {
  input_ = x;
  Tensor<T> y(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = kernels::gelu(x[i]);
  return y;
}

template <typename T>
Tensor<T> Gelu<T>::backward(const Tensor<T>& dy) const {
  require_shape(dy, input_.dims(), "gelu backward");
  Tensor<T> dx(dy.dims());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * kernels::gelu_grad(input_[i]);
  return dx;
}

template <typename T>
Tensor<T> MaxPool2<T>::forward(const Tensor<T>& x) {
  require_rank(x, 4, "max_pool");
  if (x.dim(2) % 2 || x.dim(3) % 2) throw Error(ErrorKind::OddSpatialDim, "max_pool needs even H,W");
  in_dims_ = x.dims();
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> y({x.dim(0), x.dim(1), h / 2, w / 2});
  argmax_.assign(y.size(), 0);
  std::size_t k = 0;
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < h / 2; ++i) {
      for (std::size_t j = 0; j < w / 2; ++j, ++k) {
        std::size_t best = p * h * w + 2 * i * w + 2 * j;
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t idx = p * h * w + (2 * i + di) * w + 2 * j + dj;
            if (x[idx] > x[best]) best = idx;
          }
        argmax_[k] = best;
        y[k] = x[best];
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> MaxPool2<T>::backward(const Tensor<T>& dy) const {
  Tensor<T> dx(in_dims_);
  for (std::size_t k = 0; k < dy.size(); ++k) dx[argmax_[k]] += dy[k];
  return dx;
}

// ---------------------------------------------------------------------------
// FeedForward, ConvGeluNorm

template <typename T>
FeedForward<T>::FeedForward(std::size_t channels, const ParamInit& init, const std::string& name)
    : expand(channels, 4 * channels, 1, 1, 0, init, name + ".expand"),
      project(4 * channels, channels, 1, 1, 0, init, name + ".project") {
  // Residual branch starts small so a fresh block stays close to identity.
  for (auto& v : project.weight.value.values()) v *= T(0.1);
}

template <typename T>
Tensor<T> FeedForward<T>::forward(const Tensor<T>& x) {
  return project.forward(act_.forward(expand.forward(x)));
}

template <typename T>
Tensor<T> FeedForward<T>::backward(const Tensor<T>& dy) {
  return expand.backward(act_.backward(project.backward(dy)));
}

template <typename T>
void FeedForward<T>::collect(const std::string& prefix, ParamList<T>& out) {
  expand.collect(prefix + ".expand", out);
  project.collect(prefix + ".project", out);
}

template <typename T>
ConvGeluNorm<T>::ConvGeluNorm(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                              std::size_t stride, std::size_t pad, const ParamInit& init,
                              const std::string& name)
    : conv(in_channels, out_channels, kernel, stride, pad, init, name + ".conv"), norm(out_channels, init) {}

template <typename T>
Tensor<T> ConvGeluNorm<T>::forward(const Tensor<T>& x, Mode mode) {
  return norm.forward(act_.forward(conv.forward(x)), mode);
}

template <typename T>
Tensor<T> ConvGeluNorm<T>::backward(const Tensor<T>& dy) {
  return conv.backward(act_.backward(norm.backward(dy)));
}

template <typename T>
void ConvGeluNorm<T>::collect(const std::string& prefix, ParamList<T>& out) {
  conv.collect(prefix + ".conv", out);
  norm.collect(prefix + ".norm", out);
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 4, "concat");
  require_rank(b, 4, "concat");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw Error(ErrorKind::ShapeMismatch, "concat " + shape_string(a.dims()) + " with " + shape_string(b.dims()));
  }
  const std::size_t batch = a.dim(0), hw = a.dim(2) * a.dim(3), ca = a.dim(1), cb = b.dim(1);
  Tensor<T> y({batch, ca + cb, a.dim(2), a.dim(3)});
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy_n(a.data() + n * ca * hw, ca * hw, y.data() + n * (ca + cb) * hw);
    std::copy_n(b.data() + n * cb * hw, cb * hw, y.data() + n * (ca + cb) * hw + ca * hw);
  }
  return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, std::size_t first) {
  require_rank(x, 4, "split");
  const std::size_t batch = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> a({batch, first, x.dim(2), x.dim(3)});
  Tensor<T> b({batch, c - first, x.dim(2), x.dim(3)});
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy_n(x.data() + n * c * hw, first * hw, a.data() + n * first * hw);
    std::copy_n(x.data() + n * c * hw + first * hw, (c - first) * hw, b.data() + n * (c - first) * hw);
  }
  return {std::move(a), std::move(b)};
}

#define UGFORMER_INSTANTIATE(T)                                                   \
  template class Conv2d<T>;                                                       \
  template class ConvTranspose2x2<T>;                                             \
  template class BatchNorm2d<T>;                                                  \
  template class TokenNorm<T>;                                                    \
  template class Gelu<T>;                                                         \
  template class MaxPool2<T>;                                                     \
  template class FeedForward<T>;                                                  \
  template class ConvGeluNorm<T>;                                                 \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);      \
  template std::pair<Tensor<T>, Tensor<T>> split_channels<T>(const Tensor<T>&, std::size_t);

UGFORMER_INSTANTIATE(float)
UGFORMER_INSTANTIATE(double)

#undef UGFORMER_INSTANTIATE

}  // namespace ugformer
