#pragma once

#include <string>

#include "ugformer/attention.hpp"
#include "ugformer/deform_conv.hpp"
#include "ugformer/layers.hpp"

namespace ugformer {

struct EtbOptions {
  std::size_t channels = 32;
  std::size_t num_heads = 4;
  bool use_mhsa = true;
  bool use_dconv = true;
};

// Enhanced transformer block: attention and deformable convolution run in parallel
// and are mixed by learnable scalars a and b.
//
//   z = x + a * mhsa(norm1(x)) + b * dconv(x)
//   y = z + ffn(norm2(z))
//
// A disabled branch contributes nothing and its mixer is excluded from the
// parameter list.
template <typename T>
class EnhancedTransformerBlock {
 public:
  EnhancedTransformerBlock() = default;
  EnhancedTransformerBlock(const EtbOptions& opts, const ParamInit& init, const std::string& name);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(const std::string& prefix, ParamList<T>& out);

  const EtbOptions& options() const { return opts_; }

  // Branch outputs of the last forward call (before mixing).
  const Tensor<T>& last_attention() const { return attn_out_; }
  const Tensor<T>& last_deform() const { return dconv_out_; }

  TokenNorm<T> norm1;
  TokenNorm<T> norm2;
  MultiHeadSelfAttention<T> mhsa;
  DeformConv2d<T> dconv;
  Param<T> a;  // scalar, shape [1]
  Param<T> b;  // scalar, shape [1]
  FeedForward<T> ffn;

 private:
  EtbOptions opts_;
  Tensor<T> attn_out_;
  Tensor<T> dconv_out_;
};

}  // namespace ugformer
