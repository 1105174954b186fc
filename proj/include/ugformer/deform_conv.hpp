#pragma once

#include <string>

#include "ugformer/layers.hpp"

namespace ugformer {

// 3x3 deformable convolution, stride 1, pad 1. A companion 3x3 convolution predicts
// 18 offset channels per position: channel 2k is the row shift and 2k+1 the column
// shift of tap k (row-major over the 3x3 window). Taps are read with bilinear
// interpolation; samples outside the image read as zero.
template <typename T>
class DeformConv2d {
 public:
  static constexpr std::size_t kTaps = 9;
  static constexpr std::size_t kOffsetChannels = 2 * kTaps;

  DeformConv2d() = default;
  DeformConv2d(std::size_t in_channels, std::size_t out_channels, const ParamInit& init,
               const std::string& name);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(const std::string& prefix, ParamList<T>& out);

  // Offsets computed by the last forward call, [B, 18, H, W].
  const Tensor<T>& last_offsets() const { return offsets_; }

  // Smallest distance from any fractional sampling coordinate of the last forward
  // call to an integer gridline (where bilinear sampling is not differentiable).
  T min_seam_distance() const;

  Param<T> weight;  // [out, in, 3, 3]
  Param<T> bias;    // [out]
  Conv2d<T> offset_conv;

 private:
  void sample_columns(const T* x, const T* off, std::size_t h, std::size_t w, T* cols) const;

  std::size_t in_ = 0, out_ = 0;
  Tensor<T> input_;
  Tensor<T> offsets_;
};

// Bilinear read of a single [H, W] plane at fractional (row, col); zero outside.
template <typename T>
T bilinear_zero_pad(const T* plane, std::size_t h, std::size_t w, T row, T col);

}  // namespace ugformer
