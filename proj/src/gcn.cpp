#include "ugformer/gcn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

namespace ugformer {

namespace {

template <typename T>
kernels::RowMat<T> flatten_nodes(const T* plane, std::size_t c, std::size_t n) {
  kernels::ConstMatMap<T> m(plane, static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(n));
  return m.transpose();
}

// Nodes sorted by the bit patterns of their feature vectors (ties are bitwise-identical
// nodes). Running the bridge in this order makes every node reduction independent of
// the input's spatial order, so the bridge is exactly permutation-equivariant.
template <typename T>
std::vector<std::size_t> canonical_order(const T* plane, std::size_t c, std::size_t n) {
  using Bits = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t u, std::size_t v) {
    for (std::size_t k = 0; k < c; ++k) {
      const Bits a = std::bit_cast<Bits>(plane[k * n + u]), b = std::bit_cast<Bits>(plane[k * n + v]);
      if (a != b) return a < b;
    }
    return false;
  });
  return order;
}

// [N, C] node matrix with row k = node order[k].
template <typename T>
kernels::RowMat<T> gather_nodes(const T* plane, std::size_t c, std::size_t n, const std::vector<std::size_t>& order) {
  kernels::RowMat<T> m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c));
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t ch = 0; ch < c; ++ch) m(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(ch)) = plane[ch * n + order[k]];
  return m;
}

// plane[:, order[k]] += m.row(k)
template <typename T>
void scatter_add_nodes(const kernels::RowMat<T>& m, const std::vector<std::size_t>& order, T* plane, std::size_t c,
                       std::size_t n) {
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t ch = 0; ch < c; ++ch) plane[ch * n + order[k]] += m(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(ch));
}

template <typename T>
Tensor<T> to_tensor(const kernels::RowMat<T>& m) {
  Tensor<T> t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  kernels::MatMap<T>(t.data(), m.rows(), m.cols()) = m;
  return t;
}

template <typename T>
kernels::RowMat<T> to_mat(const Tensor<T>& t) {
  return kernels::ConstMatMap<T>(t.data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}

template <typename T>
kernels::RowMat<T> softmax_gram(const kernels::RowMat<T>& x) {
  const T scale = T(1) / std::sqrt(static_cast<T>(x.cols()));
  kernels::RowMat<T> a = scale * (x * x.transpose());
  kernels::softmax_rows(a.data(), static_cast<std::size_t>(a.rows()), static_cast<std::size_t>(a.cols()));
  return a;
}

template <typename T>
kernels::RowMat<T> symmetrize(const kernels::RowMat<T>& a) {
  kernels::RowMat<T> s(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) s(i, j) = (a(i, j) + a(j, i)) / T(2);
  return s;
}

template <typename T>
kernels::RowMat<T> relu(const kernels::RowMat<T>& m) {
  return m.cwiseMax(T(0));
}

}  // namespace

template <typename T>
Tensor<T> gram_softmax(const Tensor<T>& f) {
  require_rank(f, 3, "gram adjacency");
  const std::size_t n = f.dim(1) * f.dim(2);
  return to_tensor<T>(softmax_gram<T>(flatten_nodes(f.data(), f.dim(0), n)));
}

template <typename T>
Tensor<T> gram_adjacency(const Tensor<T>& f) {
  require_rank(f, 3, "gram adjacency");
  const std::size_t n = f.dim(1) * f.dim(2);
  return to_tensor<T>(symmetrize<T>(softmax_gram<T>(flatten_nodes(f.data(), f.dim(0), n))));
}

template <typename T>
Tensor<T> normalize_adjacency(const Tensor<T>& adjacency) {
  require_rank(adjacency, 2, "normalize adjacency");
  const std::size_t n = adjacency.dim(0);
  if (adjacency.dim(1) != n) throw Error(ErrorKind::ShapeMismatch, "adjacency must be square");
  for (T v : adjacency.values()) {
    if (v < T(0)) throw Error(ErrorKind::NegativeAdjacency, "adjacency entry " + std::to_string(v) + " < 0");
  }
  Tensor<T> p(adjacency.dims());
  std::vector<T> inv_sqrt(n);
  for (std::size_t i = 0; i < n; ++i) {
    T deg = T(1);
    for (std::size_t j = 0; j < n; ++j) deg += adjacency(i, j);
    inv_sqrt[i] = T(1) / std::sqrt(deg);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      p(i, j) = (adjacency(i, j) + (i == j ? T(1) : T(0))) * inv_sqrt[i] * inv_sqrt[j];
  return p;
}

template <typename T>
Tensor<T> gcn_layer_forward(const Tensor<T>& propagation, const Tensor<T>& features, const Tensor<T>& weight) {
  require_rank(propagation, 2, "gcn layer P");
  require_rank(features, 2, "gcn layer H");
  require_rank(weight, 2, "gcn layer W");
  if (propagation.dim(0) != propagation.dim(1) || propagation.dim(1) != features.dim(0) ||
      features.dim(1) != weight.dim(0)) {
    throw Error(ErrorKind::ShapeMismatch, "gcn layer: P " + shape_string(propagation.dims()) + ", H " +
                                              shape_string(features.dims()) + ", W " + shape_string(weight.dims()));
  }
  const kernels::RowMat<T> out = relu<T>(to_mat(propagation) * to_mat(features) * to_mat(weight));
  return to_tensor<T>(out);
}

template <typename T>
GcnBridge<T>::GcnBridge(std::size_t channels, std::size_t node_budget, const ParamInit& init,
                        const std::string& name)
    : channels_(channels), node_budget_(node_budget) {
  const double s = 1.0 / std::sqrt(static_cast<double>(channels));
  w1 = Param<T>(init.normal<T>(name + ".w1", {channels, channels}, s));
  w2 = Param<T>(init.normal<T>(name + ".w2", {channels, channels}, s));
}

template <typename T>
Tensor<T> GcnBridge<T>::forward(const Tensor<T>& f) {
  if (f.rank() != 4 || f.dim(1) != channels_) {
    throw Error(ErrorKind::ShapeMismatch, "gcn bridge expects " + std::to_string(channels_) + " channels, got " +
                                              shape_string(f.dims()));
  }
  in_dims_ = f.dims();
  bypassed_ = !applies_to(f.dim(2), f.dim(3));
  cache_.clear();
  if (bypassed_) return f;

  const std::size_t n = f.dim(2) * f.dim(3);
  const auto C = static_cast<Eigen::Index>(channels_);
  kernels::ConstMatMap<T> W1(w1.value.data(), C, C), W2(w2.value.data(), C, C);
  Tensor<T> y = f;
  cache_.resize(f.dim(0));
  for (std::size_t b = 0; b < f.dim(0); ++b) {
    Cache& c = cache_[b];
    const T* plane = f.data() + b * channels_ * n;
    c.order = canonical_order(plane, channels_, n);
    c.x = gather_nodes(plane, channels_, n, c.order);
    c.a = softmax_gram<T>(c.x);
    c.adj_hat = symmetrize<T>(c.a);
    c.adj_hat.diagonal().array() += T(1);
    c.inv_sqrt_deg = c.adj_hat.rowwise().sum().array().rsqrt();
    c.p = c.inv_sqrt_deg.asDiagonal() * c.adj_hat * c.inv_sqrt_deg.asDiagonal();
    c.px.noalias() = c.p * c.x;
    c.z1.noalias() = c.px * W1;
    c.h1 = relu<T>(c.z1);
    c.ph1.noalias() = c.p * c.h1;
    c.z2.noalias() = c.ph1 * W2;
    scatter_add_nodes<T>(relu<T>(c.z2), c.order, y.data() + b * channels_ * n, channels_, n);
  }
  return y;
}

template <typename T>
Tensor<T> GcnBridge<T>::backward(const Tensor<T>& dy) {
  require_shape(dy, in_dims_, "gcn bridge backward");
  if (bypassed_) return dy;
  const std::size_t n = in_dims_[2] * in_dims_[3];
  const auto C = static_cast<Eigen::Index>(channels_);
  const T scale = T(1) / std::sqrt(static_cast<T>(channels_));
  kernels::ConstMatMap<T> W1(w1.value.data(), C, C), W2(w2.value.data(), C, C);
  kernels::MatMap<T> G1(w1.grad.data(), C, C), G2(w2.grad.data(), C, C);
  Tensor<T> dx = dy;
  for (std::size_t b = 0; b < in_dims_[0]; ++b) {
    const Cache& c = cache_[b];
    kernels::RowMat<T> dz2 = gather_nodes(dy.data() + b * channels_ * n, channels_, n, c.order);
    dz2 = (c.z2.array() > T(0)).select(dz2, T(0));
    G2.noalias() += c.ph1.transpose() * dz2;
    const kernels::RowMat<T> dph1 = dz2 * W2.transpose();
    kernels::RowMat<T> dp = dph1 * c.h1.transpose();
    kernels::RowMat<T> dz1 = c.p.transpose() * dph1;
    dz1 = (c.z1.array() > T(0)).select(dz1, T(0));
    G1.noalias() += c.px.transpose() * dz1;
    const kernels::RowMat<T> dpx = dz1 * W1.transpose();
    dp.noalias() += dpx * c.x.transpose();
    kernels::RowMat<T> dxn = c.p.transpose() * dpx;

    // P = r_i Ahat_ij r_j with r = deg^{-1/2}, deg = rowsum(Ahat).
    const auto& r = c.inv_sqrt_deg;
    kernels::RowMat<T> dadj = r.asDiagonal() * dp * r.asDiagonal();
    const kernels::RowMat<T> weighted = dp.cwiseProduct(c.adj_hat);
    Eigen::Matrix<T, Eigen::Dynamic, 1> dr = weighted * r + weighted.transpose() * r;
    const Eigen::Matrix<T, Eigen::Dynamic, 1> ddeg = (T(-0.5) * dr.array() * r.array().cube()).matrix();
    dadj.colwise() += ddeg;
    // Ahat = (A + A^T)/2 + I
    kernels::RowMat<T> da = T(0.5) * (dadj + dadj.transpose());
    kernels::softmax_rows_backward(c.a.data(), da.data(), n, n);
    // S = scale * X X^T
    dxn.noalias() += scale * (da + da.transpose()) * c.x;

    scatter_add_nodes<T>(dxn, c.order, dx.data() + b * channels_ * n, channels_, n);
  }
  return dx;
}

template <typename T>
void GcnBridge<T>::collect(const std::string& prefix, ParamList<T>& out) {
  out.push_back({prefix + ".w1", &w1});
  out.push_back({prefix + ".w2", &w2});
}

#define UGFORMER_INSTANTIATE(T)                                                        \
  template Tensor<T> gram_softmax<T>(const Tensor<T>&);                                \
  template Tensor<T> gram_adjacency<T>(const Tensor<T>&);                              \
  template Tensor<T> normalize_adjacency<T>(const Tensor<T>&);                         \
  template Tensor<T> gcn_layer_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template class GcnBridge<T>;

UGFORMER_INSTANTIATE(float)
UGFORMER_INSTANTIATE(double)

#undef UGFORMER_INSTANTIATE

}  // namespace ugformer
