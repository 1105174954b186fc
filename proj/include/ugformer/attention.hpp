#pragma once

#include <string>
#include <vector>

#include "ugformer/kernels.hpp"
#include "ugformer/layers.hpp"

namespace ugformer {

// Scaled dot-product self-attention over the H*W spatial tokens of a feature map.
// Tokens are rows of X [N, C]; Q = X w_q, K = X w_k, V = X w_v, output O w_o with
// O the concatenation of softmax(Q_h K_h^T / sqrt(d)) V_h over heads.
template <typename T>
class MultiHeadSelfAttention {
 public:
  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(std::size_t channels, std::size_t num_heads, const ParamInit& init,
                         const std::string& name);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(const std::string& prefix, ParamList<T>& out);

  std::size_t channels() const { return channels_; }
  std::size_t num_heads() const { return heads_; }
  std::size_t head_dim() const { return channels_ / heads_; }

  Param<T> w_q, w_k, w_v, w_o;

 private:
  using Mat = kernels::RowMat<T>;
  struct Cache {
    Mat x, q, k, v, o;
    std::vector<Mat> attn;
  };

  std::size_t channels_ = 0, heads_ = 1;
  Shape in_dims_;
  std::vector<Cache> cache_;
};

}  // namespace ugformer
