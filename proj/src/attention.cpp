#include "ugformer/attention.hpp"

#include <cmath>

namespace ugformer {

namespace {

template <typename T>
kernels::RowMat<T> tokens_of(const Tensor<T>& x, std::size_t b) {
  const std::size_t c = x.dim(1), n = x.dim(2) * x.dim(3);
  kernels::ConstMatMap<T> plane(x.data() + b * c * n, static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(n));
  return plane.transpose();
}

template <typename T>
void store_tokens(const kernels::RowMat<T>& tokens, Tensor<T>& y, std::size_t b) {
  const std::size_t c = y.dim(1), n = y.dim(2) * y.dim(3);
  kernels::MatMap<T> plane(y.data() + b * c * n, static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(n));
  plane = tokens.transpose();
}

}  // namespace

template <typename T>
MultiHeadSelfAttention<T>::MultiHeadSelfAttention(std::size_t channels, std::size_t num_heads,
                                                  const ParamInit& init, const std::string& name)
    : channels_(channels), heads_(num_heads) {
  if (num_heads == 0 || channels % num_heads != 0) {
    throw Error(ErrorKind::HeadMismatch, std::to_string(num_heads) + " heads do not divide " +
                                             std::to_string(channels) + " channels");
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(channels));
  w_q = Param<T>(init.normal<T>(name + ".w_q", {channels, channels}, s));
  w_k = Param<T>(init.normal<T>(name + ".w_k", {channels, channels}, s));
  w_v = Param<T>(init.normal<T>(name + ".w_v", {channels, channels}, s));
  w_o = Param<T>(init.normal<T>(name + ".w_o", {channels, channels}, s));
}

template <typename T>
Tensor<T> MultiHeadSelfAttention<T>::forward(const Tensor<T>& x) {
  if (x.rank() != 4 || x.dim(1) != channels_) {
    throw Error(ErrorKind::HeadMismatch, "attention configured for " + std::to_string(channels_) +
                                             " channels, got input " + shape_string(x.dims()));
  }
  const auto C = static_cast<Eigen::Index>(channels_);
  const auto d = static_cast<Eigen::Index>(head_dim());
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  kernels::ConstMatMap<T> wq(w_q.value.data(), C, C), wk(w_k.value.data(), C, C),
      wv(w_v.value.data(), C, C), wo(w_o.value.data(), C, C);

  in_dims_ = x.dims();
  cache_.assign(x.dim(0), Cache{});
  Tensor<T> y(x.dims());
  for (std::size_t b = 0; b < x.dim(0); ++b) {
    Cache& c = cache_[b];
    c.x = tokens_of(x, b);
    c.q.noalias() = c.x * wq;
    c.k.noalias() = c.x * wk;
    c.v.noalias() = c.x * wv;
    c.o.resize(c.x.rows(), C);
    c.attn.resize(heads_);
    for (std::size_t h = 0; h < heads_; ++h) {
      const auto col = static_cast<Eigen::Index>(h) * d;
      Mat& a = c.attn[h];
      a.noalias() = scale * c.q.middleCols(col, d) * c.k.middleCols(col, d).transpose();
      kernels::softmax_rows(a.data(), static_cast<std::size_t>(a.rows()), static_cast<std::size_t>(a.cols()));
      c.o.middleCols(col, d).noalias() = a * c.v.middleCols(col, d);
    }
    Mat out = c.o * wo;
    store_tokens(out, y, b);
  }
  return y;
}

template <typename T>
Tensor<T> MultiHeadSelfAttention<T>::backward(const Tensor<T>& dy) {
  require_shape(dy, in_dims_, "attention backward");
  const auto C = static_cast<Eigen::Index>(channels_);
  const auto d = static_cast<Eigen::Index>(head_dim());
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  kernels::ConstMatMap<T> wq(w_q.value.data(), C, C), wk(w_k.value.data(), C, C),
      wv(w_v.value.data(), C, C), wo(w_o.value.data(), C, C);
  kernels::MatMap<T> gq(w_q.grad.data(), C, C), gk(w_k.grad.data(), C, C), gv(w_v.grad.data(), C, C),
      go(w_o.grad.data(), C, C);

  Tensor<T> dx(in_dims_);
  for (std::size_t b = 0; b < in_dims_[0]; ++b) {
    const Cache& c = cache_[b];
    const Mat dout = tokens_of(dy, b);
    go.noalias() += c.o.transpose() * dout;
    const Mat d_o = dout * wo.transpose();
    Mat dq(c.q.rows(), C), dk(c.k.rows(), C), dv(c.v.rows(), C);
    for (std::size_t h = 0; h < heads_; ++h) {
      const auto col = static_cast<Eigen::Index>(h) * d;
      const Mat& a = c.attn[h];
      Mat da = d_o.middleCols(col, d) * c.v.middleCols(col, d).transpose();
      dv.middleCols(col, d).noalias() = a.transpose() * d_o.middleCols(col, d);
      kernels::softmax_rows_backward(a.data(), da.data(), static_cast<std::size_t>(a.rows()),
                                     static_cast<std::size_t>(a.cols()));
      dq.middleCols(col, d).noalias() = scale * da * c.k.middleCols(col, d);
      dk.middleCols(col, d).noalias() = scale * da.transpose() * c.q.middleCols(col, d);
    }
    gq.noalias() += c.x.transpose() * dq;
    gk.noalias() += c.x.transpose() * dk;
    gv.noalias() += c.x.transpose() * dv;
    Mat dxt = dq * wq.transpose();
    dxt.noalias() += dk * wk.transpose();
    dxt.noalias() += dv * wv.transpose();
    store_tokens(dxt, dx, b);
  }
  return dx;
}

template <typename T>
void MultiHeadSelfAttention<T>::collect(const std::string& prefix, ParamList<T>& out) {
  out.push_back({prefix + ".w_q", &w_q});
  out.push_back({prefix + ".w_k", &w_k});
  out.push_back({prefix + ".w_v", &w_v});
  out.push_back({prefix + ".w_o", &w_o});
}

template class MultiHeadSelfAttention<float>;
template class MultiHeadSelfAttention<double>;

}  // namespace ugformer
