#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ugformer/tensor.hpp"

namespace ugformer {

enum class Mode { Train, Eval };

template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Param() = default;
  explicit Param(Tensor<T> v, bool train = true)
      : value(std::move(v)), grad(value.dims()), trainable(train) {}

  void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
struct NamedParam {
  std::string name;
  Param<T>* param;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

// Seeded per-parameter initializer: each tensor draws from its own stream keyed by
// (seed, name), so identically named parameters initialize identically across models.
class ParamInit {
 public:
  explicit ParamInit(std::uint64_t seed) : seed_(seed) {}

  template <typename T>
  Tensor<T> normal(const std::string& name, Shape dims, double stddev) const;

  template <typename T>
  Tensor<T> constant(Shape dims, double value) const {
    return Tensor<T>(std::move(dims), static_cast<T>(value));
  }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
};

std::uint64_t fnv1a(const std::string& s);

// Standard 2-D convolution, weights [out, in, k, k], bias [out].
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
         std::size_t pad, const ParamInit& init, const std::string& name);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(const std::string& prefix, ParamList<T>& out);

  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }

  Param<T> weight;
  Param<T> bias;

 private:
  std::size_t in_ = 0, out_ = 0, kernel_ = 1, stride_ = 1, pad_ = 0;
  Tensor<T> input_;
};

// Transposed convolution with a 2x2 kernel and stride 2 (exact x2 upsampling).
// Weights [in, out, 2, 2], bias [out].
template <typename T>
class ConvTranspose2x2 {
 public:
  ConvTranspose2x2() = default;
  ConvTranspose2x2(std::size_t in_channels, std::size_t out_channels, const ParamInit& init,
                   const std::string& name);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(const std::string& prefix, ParamList<T>& out);

  Param<T> weight;
  Param<T> bias;

 private:
  std::size_t in_ = 0, out_ = 0;
  Tensor<T> input_;
};

// Batch normalization over (batch, height, width) per channel.
template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::size_t channels, const ParamInit& init);

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(const std::string& prefix, ParamList<T>& out);

  Param<T> gamma;
  Param<T> beta;
  Param<T> running_mean;
  Param<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

 private:
  std::size_t channels_ = 0;
  Mode last_mode_ = Mode::Train;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
};

// Per-position normalization across channels with a per-channel affine map
// (layer norm over the channel axis of each token).
template <typename T>
class TokenNorm {
 public:
  TokenNorm() = default;
  TokenNorm(std::size_t channels, const ParamInit& init);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(const std::string& prefix, ParamList<T>& out);

  Param<T> gamma;
  Param<T> beta;
  T eps = T(1e-5);

 private:
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
};

template <typename T>
class Gelu {
 public:
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy) const;

 private:
  Tensor<T> input_;
};

template <typename T>
class MaxPool2 {
 public:
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy) const;

 private:
  Shape in_dims_;
  std::vector<std::size_t> argmax_;
};

// Pointwise feed-forward: 1x1 conv C->4C, GELU, 1x1 conv 4C->C.
template <typename T>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(std::size_t channels, const ParamInit& init, const std::string& name);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(const std::string& prefix, ParamList<T>& out);

  Conv2d<T> expand;
  Conv2d<T> project;

 private:
  Gelu<T> act_;
};

// Conv -> GELU -> BatchNorm, the unit used by the stem and decoder.
template <typename T>
class ConvGeluNorm {
 public:
  ConvGeluNorm() = default;
  ConvGeluNorm(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
               std::size_t stride, std::size_t pad, const ParamInit& init, const std::string& name);

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(const std::string& prefix, ParamList<T>& out);

  Conv2d<T> conv;
  BatchNorm2d<T> norm;

 private:
  Gelu<T> act_;
};

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, std::size_t first);

}  // namespace ugformer
