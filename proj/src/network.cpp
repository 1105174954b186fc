#include "ugformer/network.hpp"

namespace ugformer {

std::string architecture_name(Architecture arch) {
  return arch == Architecture::UGformer ? "ugformer" : "unet";
}

Architecture parse_architecture(const std::string& name) {
  if (name == "ugformer") return Architecture::UGformer;
  if (name == "unet") return Architecture::UNet;
  throw Error(ErrorKind::InvalidConfig, "unknown architecture '" + name + "'");
}

void ModelConfig::validate() const {
  if (in_channels == 0 || base_channels == 0 || num_stages == 0) {
    throw Error(ErrorKind::InvalidConfig, "channels and stage count must be positive");
  }
  if (num_classes != 1) throw Error(ErrorKind::InvalidConfig, "only single-logit binary output is supported");
  if (architecture == Architecture::UGformer) {
    if (!use_mhsa && !use_dconv) {
      throw Error(ErrorKind::InvalidConfig, "use_mhsa and use_dconv cannot both be disabled");
    }
    for (std::size_t s = 1; s <= num_stages; ++s) {
      if (num_heads == 0 || stage_channels(s) % num_heads != 0) {
        throw Error(ErrorKind::HeadMismatch, std::to_string(num_heads) + " heads do not divide stage " +
                                                 std::to_string(s) + " width " + std::to_string(stage_channels(s)));
      }
    }
  }
}

// ---------------------------------------------------------------------------

template <typename T>
Stem<T>::Stem(std::size_t in_channels, std::size_t out_channels, const ParamInit& init, const std::string& name)
    : unit(in_channels, out_channels, 3, 2, 1, init, name) {}

template <typename T>
Tensor<T> Stem<T>::forward(const Tensor<T>& x, Mode mode) {
  require_rank(x, 4, "stem");
  if (x.dim(2) % 2 || x.dim(3) % 2) {
    throw Error(ErrorKind::OddSpatialDim, "stem needs even H,W, got " + shape_string(x.dims()));
  }
  x.require_finite("stem input");
  return unit.forward(x, mode);
}

template <typename T>
PatchAggregation<T>::PatchAggregation(std::size_t in_channels, const ParamInit& init, const std::string& name)
    : conv(in_channels, 2 * in_channels, 2, 2, 0, init, name) {}

template <typename T>
Tensor<T> PatchAggregation<T>::forward(const Tensor<T>& x) {
  require_rank(x, 4, "patch aggregation");
  if (x.dim(2) % 2 || x.dim(3) % 2) {
    throw Error(ErrorKind::OddSpatialDim, "patch aggregation needs even H,W, got " + shape_string(x.dims()));
  }
  return conv.forward(x);
}

template <typename T>
DecoderStage<T>::DecoderStage(std::size_t in_channels, const ParamInit& init, const std::string& name)
    : up(in_channels, in_channels / 2, init, name + ".up"),
      conv1(in_channels, in_channels / 2, 3, 1, 1, init, name + ".conv1"),
      conv2(in_channels / 2, in_channels / 2, 3, 1, 1, init, name + ".conv2"),
      in_(in_channels) {}

template <typename T>
Tensor<T> DecoderStage<T>::forward(const Tensor<T>& x, const Tensor<T>& skip, Mode mode) {
  require_rank(x, 4, "decoder input");
  if (x.dim(1) != in_) {
    throw Error(ErrorKind::ShapeMismatch, "decoder stage expects " + std::to_string(in_) + " channels, got " +
                                              shape_string(x.dims()));
  }
  const Shape expected{x.dim(0), in_ / 2, 2 * x.dim(2), 2 * x.dim(3)};
  if (skip.dims() != expected) {
    throw Error(ErrorKind::SkipShapeMismatch,
                "skip " + shape_string(skip.dims()) + " does not match " + shape_string(expected));
  }
  return conv2.forward(conv1.forward(concat_channels(up.forward(x), skip), mode), mode);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> DecoderStage<T>::backward(const Tensor<T>& dy) {
  auto [dup, dskip] = split_channels(conv1.backward(conv2.backward(dy)), in_ / 2);
  return {up.backward(dup), std::move(dskip)};
}

template <typename T>
void DecoderStage<T>::collect(const std::string& prefix, ParamList<T>& out) {
  up.collect(prefix + ".up", out);
  conv1.collect(prefix + ".conv1", out);
  conv2.collect(prefix + ".conv2", out);
}

// ---------------------------------------------------------------------------

template <typename T>
SegmentationNet<T>::SegmentationNet(const ModelConfig& config) : config_(config) {
  config_.validate();
  const ParamInit init(config_.init_seed);
  const std::size_t L = config_.num_stages;
  if (config_.architecture == Architecture::UGformer) {
    stem = Stem<T>(config_.in_channels, config_.base_channels, init, "encoder.stem");
    for (std::size_t s = 1; s <= L; ++s) {
      const std::string name = "encoder.stage" + std::to_string(s);
      patch_aggregation.emplace_back(config_.stage_channels(s - 1), init, name + ".aggregate");
      EtbOptions opts{config_.stage_channels(s), config_.num_heads, config_.use_mhsa, config_.use_dconv};
      etb.emplace_back(opts, init, name + ".etb");
    }
  } else {
    for (std::size_t s = 0; s <= L; ++s) {
      const std::string name = "encoder.level" + std::to_string(s);
      const std::size_t in = s == 0 ? config_.in_channels : config_.stage_channels(s - 1);
      const std::size_t out = config_.stage_channels(s);
      unet_levels.emplace_back(ConvGeluNorm<T>(in, out, 3, 1, 1, init, name + ".conv1"),
                               ConvGeluNorm<T>(out, out, 3, 1, 1, init, name + ".conv2"));
    }
    pools_.resize(L + 1);
  }
  for (std::size_t s = 0; s < L; ++s) {
    bridges.emplace_back(config_.stage_channels(s), config_.node_budget, init, "bridge" + std::to_string(s));
    bridges.back().enabled = config_.use_gcn;
  }
  for (std::size_t k = 0; k < L; ++k) {
    decoder.emplace_back(config_.stage_channels(L - k), init, "decoder.stage" + std::to_string(k));
  }
  head_up = ConvTranspose2x2<T>(config_.base_channels, config_.base_channels, init, "head.up");
  head_out = Conv2d<T>(config_.base_channels, config_.num_classes, 1, 1, 0, init, "head.out");
}

template <typename T>
std::vector<Tensor<T>> SegmentationNet<T>::encode(const Tensor<T>& x, Mode mode, const Probe<T>& probe) {
  const std::size_t L = config_.num_stages;
  std::vector<Tensor<T>> feats;
  feats.reserve(L + 1);
  auto emit = [&](const std::string& name, const Tensor<T>& t) {
    if (probe) probe(name, t);
  };
  if (config_.architecture == Architecture::UGformer) {
    feats.push_back(stem.forward(x, mode));
    emit("encoder.stem", feats.back());
    for (std::size_t s = 1; s <= L; ++s) {
      Tensor<T> t = patch_aggregation[s - 1].forward(feats.back());
      emit("encoder.stage" + std::to_string(s) + ".aggregate", t);
      feats.push_back(etb[s - 1].forward(t));
      emit("encoder.stage" + std::to_string(s) + ".etb", feats.back());
    }
  } else {
    x.require_finite("network input");
    Tensor<T> t = unet_levels[0].second.forward(unet_levels[0].first.forward(x, mode), mode);
    feats.push_back(pools_[0].forward(t));
    emit("encoder.level0", feats.back());
    for (std::size_t s = 1; s <= L; ++s) {
      t = pools_[s].forward(feats.back());
      feats.push_back(unet_levels[s].second.forward(unet_levels[s].first.forward(t, mode), mode));
      emit("encoder.level" + std::to_string(s), feats.back());
    }
  }
  return feats;
}

template <typename T>
Tensor<T> SegmentationNet<T>::encode_backward(std::vector<Tensor<T>>& grads) {
  const std::size_t L = config_.num_stages;
  if (config_.architecture == Architecture::UGformer) {
    for (std::size_t s = L; s >= 1; --s) {
      Tensor<T> g = patch_aggregation[s - 1].backward(etb[s - 1].backward(grads[s]));
      add_inplace(grads[s - 1], g);
    }
    return stem.backward(grads[0]);
  }
  for (std::size_t s = L; s >= 1; --s) {
    Tensor<T> g = unet_levels[s].first.backward(unet_levels[s].second.backward(grads[s]));
    add_inplace(grads[s - 1], pools_[s].backward(g));
  }
  Tensor<T> g = pools_[0].backward(grads[0]);
  return unet_levels[0].first.backward(unet_levels[0].second.backward(g));
}

template <typename T>
Tensor<T> SegmentationNet<T>::forward(const Tensor<T>& x, Mode mode, const Probe<T>& probe) {
  require_rank(x, 4, "network input");
  if (x.dim(1) != config_.in_channels) {
    throw Error(ErrorKind::ShapeMismatch, "network expects " + std::to_string(config_.in_channels) +
                                              " input channels, got " + shape_string(x.dims()));
  }
  const std::size_t div = config_.spatial_divisor();
  if (x.dim(2) % div || x.dim(3) % div) {
    throw Error(ErrorKind::BadSpatialDivisibility, "input " + shape_string(x.dims()) + " not divisible by " +
                                                       std::to_string(div));
  }
  const std::size_t L = config_.num_stages;
  std::vector<Tensor<T>> feats = encode(x, mode, probe);
  std::vector<Tensor<T>> skips(L);
  for (std::size_t s = 0; s < L; ++s) {
    skips[s] = bridges[s].forward(feats[s]);
    if (probe) probe("bridge" + std::to_string(s), skips[s]);
  }
  Tensor<T> d = feats[L];
  for (std::size_t k = 0; k < L; ++k) {
    d = decoder[k].forward(d, skips[L - 1 - k], mode);
    if (probe) probe("decoder.stage" + std::to_string(k), d);
  }
  d = head_act_.forward(head_up.forward(d));
  if (probe) probe("head.up", d);
  Tensor<T> logits = head_out.forward(d);
  if (probe) probe("head.out", logits);
  return logits;
}

template <typename T>
Tensor<T> SegmentationNet<T>::backward(const Tensor<T>& dlogits) {
  const std::size_t L = config_.num_stages;
  Tensor<T> d = head_up.backward(head_act_.backward(head_out.backward(dlogits)));
  std::vector<Tensor<T>> grads(L + 1);
  for (std::size_t k = L; k-- > 0;) {
    auto [din, dskip] = decoder[k].backward(d);
    grads[L - 1 - k] = bridges[L - 1 - k].backward(dskip);
    d = std::move(din);
  }
  grads[L] = std::move(d);
  return encode_backward(grads);
}

template <typename T>
ParamList<T> SegmentationNet<T>::parameters() {
  ParamList<T> out;
  if (config_.architecture == Architecture::UGformer) {
    stem.collect("encoder.stem", out);
    for (std::size_t s = 1; s <= config_.num_stages; ++s) {
      const std::string name = "encoder.stage" + std::to_string(s);
      patch_aggregation[s - 1].collect(name + ".aggregate", out);
      etb[s - 1].collect(name + ".etb", out);
    }
  } else {
    for (std::size_t s = 0; s < unet_levels.size(); ++s) {
      const std::string name = "encoder.level" + std::to_string(s);
      unet_levels[s].first.collect(name + ".conv1", out);
      unet_levels[s].second.collect(name + ".conv2", out);
    }
  }
  if (config_.use_gcn) {
    for (std::size_t s = 0; s < bridges.size(); ++s) bridges[s].collect("bridge" + std::to_string(s), out);
  }
  for (std::size_t k = 0; k < decoder.size(); ++k) decoder[k].collect("decoder.stage" + std::to_string(k), out);
  head_up.collect("head.up", out);
  head_out.collect("head.out", out);
  return out;
}

template <typename T>
std::size_t SegmentationNet<T>::parameter_count() {
  std::size_t n = 0;
  for (const auto& p : parameters()) {
    if (p.param->trainable) n += p.param->value.size();
  }
  return n;
}

template <typename T>
void SegmentationNet<T>::zero_grad() {
  for (auto& p : parameters()) p.param->zero_grad();
}

template class Stem<float>;
template class Stem<double>;
template class PatchAggregation<float>;
template class PatchAggregation<double>;
template class DecoderStage<float>;
template class DecoderStage<double>;
template class SegmentationNet<float>;
template class SegmentationNet<double>;

}  // namespace ugformer
