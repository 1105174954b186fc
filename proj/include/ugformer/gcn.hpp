#pragma once

#include <string>
#include <vector>

#include "ugformer/kernels.hpp"
#include "ugformer/layers.hpp"

namespace ugformer {

// Row-softmax of the scaled feature Gram matrix X X^T / sqrt(C), X = f flattened to
// [N, C] with N = H*W. Input f is [C, H, W]. Every row of the result sums to 1.
template <typename T>
Tensor<T> gram_softmax(const Tensor<T>& f);

// (A + A^T) / 2 of gram_softmax(f): the symmetric pixel graph used by the bridge.
template <typename T>
Tensor<T> gram_adjacency(const Tensor<T>& f);

// P = D^{-1/2} (A + I) D^{-1/2} with D the row sums of A + I.
template <typename T>
Tensor<T> normalize_adjacency(const Tensor<T>& adjacency);

// ReLU(P H W).
template <typename T>
Tensor<T> gcn_layer_forward(const Tensor<T>& propagation, const Tensor<T>& features, const Tensor<T>& weight);

// Skip-connection transform: two graph-convolution layers over the pixel graph of
// each feature map, added back onto the map. Maps with more than node_budget
// pixels pass through unchanged.
template <typename T>
class GcnBridge {
 public:
  GcnBridge() = default;
  GcnBridge(std::size_t channels, std::size_t node_budget, const ParamInit& init, const std::string& name);

  Tensor<T> forward(const Tensor<T>& f);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(const std::string& prefix, ParamList<T>& out);

  bool applies_to(std::size_t height, std::size_t width) const {
    return enabled && height * width <= node_budget_;
  }
  std::size_t node_budget() const { return node_budget_; }

  Param<T> w1;
  Param<T> w2;
  bool enabled = true;

 private:
  using Mat = kernels::RowMat<T>;
  struct Cache {
    std::vector<std::size_t> order;  // canonical node order: row k of x is node order[k]
    Mat x, a, adj_hat, p, px, z1, h1, ph1, z2;
    Eigen::Matrix<T, Eigen::Dynamic, 1> inv_sqrt_deg;
  };

  std::size_t channels_ = 0, node_budget_ = 0;
  bool bypassed_ = true;
  Shape in_dims_;
  std::vector<Cache> cache_;
};

}  // namespace ugformer
