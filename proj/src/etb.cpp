#include "ugformer/etb.hpp"

namespace ugformer {

template <typename T>
EnhancedTransformerBlock<T>::EnhancedTransformerBlock(const EtbOptions& opts, const ParamInit& init,
                                                      const std::string& name)
    : norm1(opts.channels, init),
      norm2(opts.channels, init),
      ffn(opts.channels, init, name + ".ffn"),
      opts_(opts) {
  if (!opts.use_mhsa && !opts.use_dconv) {
    throw Error(ErrorKind::InvalidConfig, "enhanced transformer block needs at least one of attention or deformable conv");
  }
  if (opts.use_mhsa) mhsa = MultiHeadSelfAttention<T>(opts.channels, opts.num_heads, init, name + ".mhsa");
  if (opts.use_dconv) dconv = DeformConv2d<T>(opts.channels, opts.channels, init, name + ".dconv");
  a = Param<T>(Tensor<T>({1}, T(1)));
  b = Param<T>(Tensor<T>({1}, T(1)));
}

template <typename T>
Tensor<T> EnhancedTransformerBlock<T>::forward(const Tensor<T>& x) {
  if (x.rank() != 4 || x.dim(1) != opts_.channels) {
    throw Error(ErrorKind::ShapeMismatch, "ETB expects " + std::to_string(opts_.channels) + " channels, got " +
                                              shape_string(x.dims()));
  }
  Tensor<T> z = x;
  if (opts_.use_mhsa) {
    attn_out_ = mhsa.forward(norm1.forward(x));
    const T av = a.value[0];
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += av * attn_out_[i];
  }
  if (opts_.use_dconv) {
    dconv_out_ = dconv.forward(x);
    const T bv = b.value[0];
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += bv * dconv_out_[i];
  }
  Tensor<T> y = ffn.forward(norm2.forward(z));
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += z[i];
  return y;
}

template <typename T>
Tensor<T> EnhancedTransformerBlock<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dz = norm2.backward(ffn.backward(dy));
  add_inplace(dz, dy);
  Tensor<T> dx = dz;
  if (opts_.use_mhsa) {
    a.grad[0] += dot(dz, attn_out_);
    Tensor<T> dm(dz.dims());
    const T av = a.value[0];
    for (std::size_t i = 0; i < dm.size(); ++i) dm[i] = av * dz[i];
    add_inplace(dx, norm1.backward(mhsa.backward(dm)));
  }
  if (opts_.use_dconv) {
    b.grad[0] += dot(dz, dconv_out_);
    Tensor<T> dd(dz.dims());
    const T bv = b.value[0];
    for (std::size_t i = 0; i < dd.size(); ++i) dd[i] = bv * dz[i];
    add_inplace(dx, dconv.backward(dd));
  }
  return dx;
}

template <typename T>
void EnhancedTransformerBlock<T>::collect(const std::string& prefix, ParamList<T>& out) {
  if (opts_.use_mhsa) {
    norm1.collect(prefix + ".norm1", out);
    mhsa.collect(prefix + ".mhsa", out);
    out.push_back({prefix + ".a", &a});
  }
  if (opts_.use_dconv) {
    dconv.collect(prefix + ".dconv", out);
    out.push_back({prefix + ".b", &b});
  }
  norm2.collect(prefix + ".norm2", out);
  ffn.collect(prefix + ".ffn", out);
}

template class EnhancedTransformerBlock<float>;
template class EnhancedTransformerBlock<double>;

}  // namespace ugformer
