#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ugformer/etb.hpp"
#include "ugformer/gcn.hpp"
#include "ugformer/layers.hpp"

namespace ugformer {

enum class Architecture { UGformer, UNet };

std::string architecture_name(Architecture arch);
Architecture parse_architecture(const std::string& name);

struct ModelConfig {
  Architecture architecture = Architecture::UGformer;
  std::size_t in_channels = 1;
  std::size_t base_channels = 32;
  std::size_t num_stages = 3;
  std::size_t num_heads = 4;
  bool use_mhsa = true;
  bool use_dconv = true;
  bool use_gcn = true;
  std::size_t node_budget = 1024;
  std::size_t num_classes = 1;
  std::uint64_t init_seed = 0;

  // Throws InvalidConfig on inconsistent settings.
  void validate() const;
  // Required divisor of input height and width: 2^(num_stages + 1).
  std::size_t spatial_divisor() const { return std::size_t{1} << (num_stages + 1); }
  std::size_t stage_channels(std::size_t stage) const { return base_channels << stage; }
};

// 3x3 stride-2 convolution, GELU, batch norm: [B,in,H,W] -> [B,C0,H/2,W/2].
template <typename T>
class Stem {
 public:
  Stem() = default;
  Stem(std::size_t in_channels, std::size_t out_channels, const ParamInit& init, const std::string& name);

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy) { return unit.backward(dy); }
  void collect(const std::string& prefix, ParamList<T>& out) { unit.collect(prefix, out); }

  ConvGeluNorm<T> unit;
};

// 2x2 stride-2 convolution doubling channels: [B,C,H,W] -> [B,2C,H/2,W/2].
template <typename T>
class PatchAggregation {
 public:
  PatchAggregation() = default;
  PatchAggregation(std::size_t in_channels, const ParamInit& init, const std::string& name);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy) { return conv.backward(dy); }
  void collect(const std::string& prefix, ParamList<T>& out) { conv.collect(prefix, out); }

  Conv2d<T> conv;
};

// Transposed-conv x2 upsample C -> C/2, concatenate the skip, then two
// 3x3 conv + GELU + norm units: [B,C,H,W] + [B,C/2,2H,2W] -> [B,C/2,2H,2W].
template <typename T>
class DecoderStage {
 public:
  DecoderStage() = default;
  DecoderStage(std::size_t in_channels, const ParamInit& init, const std::string& name);

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& skip, Mode mode);
  // Returns (d input, d skip).
  std::pair<Tensor<T>, Tensor<T>> backward(const Tensor<T>& dy);
  void collect(const std::string& prefix, ParamList<T>& out);

  ConvTranspose2x2<T> up;
  ConvGeluNorm<T> conv1;
  ConvGeluNorm<T> conv2;

 private:
  std::size_t in_ = 0;
};

template <typename T>
using Probe = std::function<void(const std::string& name, const Tensor<T>& value)>;

// UGformer (stem + patch aggregation + ETB encoder) or a plain U-Net encoder
// (double conv + max pool), sharing the GCN skip bridges, decoder and head.
// Output is a single-channel logit map at input resolution.
template <typename T>
class SegmentationNet {
 public:
  explicit SegmentationNet(const ModelConfig& config);

  Tensor<T> forward(const Tensor<T>& x, Mode mode, const Probe<T>& probe = {});
  Tensor<T> backward(const Tensor<T>& dlogits);

  ParamList<T> parameters();
  std::size_t parameter_count();
  void zero_grad();

  const ModelConfig& config() const { return config_; }

  // UGformer encoder
  Stem<T> stem;
  std::vector<PatchAggregation<T>> patch_aggregation;
  std::vector<EnhancedTransformerBlock<T>> etb;
  // U-Net encoder: level i holds two conv units.
  std::vector<std::pair<ConvGeluNorm<T>, ConvGeluNorm<T>>> unet_levels;

  std::vector<GcnBridge<T>> bridges;  // one per skip level 0..L-1
  std::vector<DecoderStage<T>> decoder;
  ConvTranspose2x2<T> head_up;
  Conv2d<T> head_out;

 private:
  std::vector<Tensor<T>> encode(const Tensor<T>& x, Mode mode, const Probe<T>& probe);
  Tensor<T> encode_backward(std::vector<Tensor<T>>& skip_grads);

  ModelConfig config_;
  std::vector<MaxPool2<T>> pools_;
  Gelu<T> head_act_;
};

}  // namespace ugformer
