#include "ugformer/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ugformer/kernels.hpp"

namespace ugformer {

// ---------------------------------------------------------------------------
// Metrics and loss

template <typename T>
double dice_score(const Tensor<T>& pred, const Tensor<T>& gt) {
  if (!pred.same_shape(gt)) {
    throw Error(ErrorKind::ShapeMismatch, "dice " + shape_string(pred.dims()) + " vs " + shape_string(gt.dims()));
  }
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != T(0), b = gt[i] != T(0);
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

template <typename T>
LossValue<T> composite_loss(const Tensor<T>& logits, const Tensor<T>& gt, T lambda_bce, T lambda_dice) {
  if (!logits.same_shape(gt)) {
    throw Error(ErrorKind::ShapeMismatch, "loss " + shape_string(logits.dims()) + " vs " + shape_string(gt.dims()));
  }
  const std::size_t total = logits.size();
  const std::size_t batch = logits.rank() > 1 ? logits.dim(0) : 1;
  const std::size_t per = total / batch;
  const T smooth = T(1);

  LossValue<T> out;
  out.grad = Tensor<T>(logits.dims());
  std::vector<T> prob(total);
  T bce_sum = 0;
  for (std::size_t i = 0; i < total; ++i) {
    const T z = logits[i], y = gt[i];
    prob[i] = kernels::sigmoid(z);
    // max(z,0) - z*y + log(1 + exp(-|z|))
    bce_sum += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  out.bce = bce_sum / static_cast<T>(total);

  T dice_term = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    T inter = 0, sp = 0, sy = 0;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      inter += prob[i] * gt[i];
      sp += prob[i];
      sy += gt[i];
    }
    const T den = sp + sy + smooth;
    const T num = T(2) * inter + smooth;
    dice_term += T(1) - num / den;
    // d(1 - num/den)/dp_i = -(2 y_i den - num) / den^2, averaged over batch.
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      const T dp = -(T(2) * gt[i] * den - num) / (den * den) / static_cast<T>(batch);
      out.grad[i] = lambda_dice * dp * prob[i] * (T(1) - prob[i]);
    }
  }
  out.dice = dice_term / static_cast<T>(batch);
  for (std::size_t i = 0; i < total; ++i) {
    out.grad[i] += lambda_bce * (prob[i] - gt[i]) / static_cast<T>(total);
  }
  out.total = lambda_bce * out.bce + lambda_dice * out.dice;
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule

template <typename T>
void sgd_update(Tensor<T>& params, const Tensor<T>& grads, T lr) {
  if (!params.same_shape(grads)) {
    throw Error(ErrorKind::ShapeMismatch, "sgd " + shape_string(params.dims()) + " vs " + shape_string(grads.dims()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
}

template <typename T>
void SgdOptimizer<T>::step(const ParamList<T>& params, double lr) {
  if (velocity_.empty() && momentum_ != 0.0) {
    for (const auto& p : params) velocity_.emplace_back(p.param->value.dims());
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param<T>& p = *params[k].param;
    if (!p.trainable) continue;
    if (!p.grad.all_finite()) {
      throw Error(ErrorKind::NonFiniteGradient, "gradient of " + params[k].name + " is not finite");
    }
    if (momentum_ == 0.0) {
      sgd_update(p.value, p.grad, static_cast<T>(lr));
      continue;
    }
    Tensor<T>& v = velocity_[k];
    const T m = static_cast<T>(momentum_);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = m * v[i] + p.grad[i];
    sgd_update(p.value, v, static_cast<T>(lr));
  }
}

std::string decay_policy_name(DecayPolicy p) { return p == DecayPolicy::Record ? "record" : "plateau"; }

DecayPolicy parse_decay_policy(const std::string& name) {
  if (name == "record") return DecayPolicy::Record;
  if (name == "plateau") return DecayPolicy::Plateau;
  throw Error(ErrorKind::ConfigError, "unknown decay policy '" + name + "'");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw Error(ErrorKind::ConfigError, "epochs must be >= 1");
  if (batch_size < 1) throw Error(ErrorKind::ConfigError, "batch_size must be >= 1");
  if (!(decay_factor > 0.0 && decay_factor < 1.0)) throw Error(ErrorKind::ConfigError, "decay_factor must be in (0,1)");
  if (!(initial_lr > 0.0)) throw Error(ErrorKind::ConfigError, "initial_lr must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw Error(ErrorKind::ConfigError, "momentum must be in [0,1)");
  if (lambda_bce < 0.0 || lambda_dice < 0.0) throw Error(ErrorKind::ConfigError, "loss weights must be >= 0");
  if (target_dice < 0.0 || target_dice > 1.0) throw Error(ErrorKind::ConfigError, "target_dice must be in [0,1]");
}

TrainState lr_on_validation(const TrainState& state, double val_dice, const TrainConfig& cfg) {
  TrainState next = state;
  next.epoch = state.epoch + 1;
  if (!state.best_dice) {
    next.best_dice = val_dice;
    next.epochs_without_record = 0;
    return next;
  }
  const bool improved = val_dice > *state.best_dice;
  if (improved) {
    next.best_dice = val_dice;
    next.epochs_without_record = 0;
  } else {
    ++next.epochs_without_record;
  }
  switch (cfg.decay_policy) {
    case DecayPolicy::Record:
      if (improved) {
        next.lr = state.lr * cfg.decay_factor;
        ++next.decays;
      }
      break;
    case DecayPolicy::Plateau:
      if (!improved && next.epochs_without_record >= cfg.plateau_patience) {
        next.lr = state.lr * cfg.decay_factor;
        ++next.decays;
        next.epochs_without_record = 0;
      }
      break;
  }
  return next;
}

// ---------------------------------------------------------------------------
// Training

std::pair<Tensor<float>, Tensor<float>> make_batch(const std::vector<TrainingExample>& set,
                                                   const std::vector<std::size_t>& order, std::size_t first,
                                                   std::size_t count) {
  const auto& ref = set[order[first]];
  const std::size_t h = ref.image.dim(1), w = ref.image.dim(2);
  Tensor<float> x({count, 1, h, w}), y({count, 1, h, w});
  for (std::size_t k = 0; k < count; ++k) {
    const auto& ex = set[order[first + k]];
    if (ex.image.dims() != Shape{1, h, w} || ex.target.dims() != Shape{h, w}) {
      throw Error(ErrorKind::ShapeMismatch, "training examples must share one [1,H,W] size");
    }
    std::copy(ex.image.values().begin(), ex.image.values().end(), x.data() + k * h * w);
    std::copy(ex.target.values().begin(), ex.target.values().end(), y.data() + k * h * w);
  }
  return {std::move(x), std::move(y)};
}

std::vector<Tensor<float>> predict_probabilities(SegmentationNet<float>& model,
                                                 const std::vector<Tensor<float>>& images,
                                                 std::size_t batch_size) {
  std::vector<Tensor<float>> out;
  out.reserve(images.size());
  for (std::size_t first = 0; first < images.size(); first += batch_size) {
    const std::size_t count = std::min(batch_size, images.size() - first);
    const std::size_t h = images[first].dim(images[first].rank() - 2), w = images[first].dim(images[first].rank() - 1);
    Tensor<float> x({count, 1, h, w});
    for (std::size_t k = 0; k < count; ++k) {
      const auto& img = images[first + k];
      if (img.size() != h * w) throw Error(ErrorKind::ShapeMismatch, "prediction batch needs equal image sizes");
      std::copy(img.values().begin(), img.values().end(), x.data() + k * h * w);
    }
    const Tensor<float> logits = model.forward(x, Mode::Eval);
    for (std::size_t k = 0; k < count; ++k) {
      Tensor<float> p({h, w});
      for (std::size_t i = 0; i < h * w; ++i) p[i] = kernels::sigmoid(logits[k * h * w + i]);
      out.push_back(std::move(p));
    }
  }
  return out;
}

std::vector<double> evaluate_dice(SegmentationNet<float>& model, const std::vector<TrainingExample>& set,
                                  double threshold, std::size_t batch_size) {
  std::vector<Tensor<float>> images;
  images.reserve(set.size());
  for (const auto& ex : set) images.push_back(ex.image);
  const auto probs = predict_probabilities(model, images, batch_size);
  std::vector<double> dice;
  dice.reserve(set.size());
  for (std::size_t k = 0; k < set.size(); ++k) {
    Tensor<float> pred(probs[k].dims());
    for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = probs[k][i] > threshold ? 1.0f : 0.0f;
    dice.push_back(dice_score(pred, set[k].target));
  }
  return dice;
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

TrainResult train_loop(SegmentationNet<float>& model, const std::vector<TrainingExample>& train,
                       const std::vector<TrainingExample>& val, const TrainConfig& cfg,
                       const EpochCallback& on_epoch) {
  cfg.validate();
  if (train.empty()) throw Error(ErrorKind::EmptyDataset, "training set is empty");
  if (val.empty()) throw Error(ErrorKind::EmptyDataset, "validation set is empty");

  TrainResult result;
  result.batches_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  TrainState state;
  state.lr = cfg.initial_lr;
  SgdOptimizer<float> optimizer(cfg.momentum);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto params = model.parameters();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t steps = 0;
    for (std::size_t first = 0; first < train.size(); first += cfg.batch_size) {
      if (cfg.max_steps && result.total_steps >= cfg.max_steps) break;
      const std::size_t count = std::min(cfg.batch_size, train.size() - first);
      auto [x, y] = make_batch(train, order, first, count);
      model.zero_grad();
      const Tensor<float> logits = model.forward(x, Mode::Train);
      const auto loss = composite_loss(logits, y, static_cast<float>(cfg.lambda_bce),
                                       static_cast<float>(cfg.lambda_dice));
      model.backward(loss.grad);
      optimizer.step(params, state.lr);
      loss_sum += loss.total;
      ++steps;
      ++result.total_steps;
    }
    if (steps == 0) break;
    const double val_dice = mean(evaluate_dice(model, val, 0.5, cfg.batch_size));
    state = lr_on_validation(state, val_dice, cfg);
    EpochRecord rec{epoch + 1, loss_sum / static_cast<double>(steps), val_dice, state.lr, steps};
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (cfg.target_dice > 0 && val_dice >= cfg.target_dice) {
      result.reached_target = true;
      break;
    }
  }
  result.final_state = state;
  return result;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification

std::string grad_block_name(GradBlock b) {
  switch (b) {
    case GradBlock::Linear: return "linear";
    case GradBlock::Stem: return "stem";
    case GradBlock::PatchAggregation: return "patch_aggregation";
    case GradBlock::Mhsa: return "mhsa";
    case GradBlock::DeformConv: return "deform_conv";
    case GradBlock::Etb: return "etb";
    case GradBlock::GcnBridge: return "gcn_bridge";
    case GradBlock::DecoderStage: return "decoder_stage";
    case GradBlock::CompositeLoss: return "composite_loss";
    case GradBlock::UGformerNet: return "ugformer_net";
    case GradBlock::UNetNet: return "unet_net";
  }
  return "unknown";
}

GradBlock parse_grad_block(const std::string& name) {
  for (GradBlock b : {GradBlock::Linear, GradBlock::Stem, GradBlock::PatchAggregation, GradBlock::Mhsa,
                      GradBlock::DeformConv, GradBlock::Etb, GradBlock::GcnBridge, GradBlock::DecoderStage,
                      GradBlock::CompositeLoss, GradBlock::UGformerNet, GradBlock::UNetNet}) {
    if (grad_block_name(b) == name) return b;
  }
  throw Error(ErrorKind::ConfigError, "unknown gradcheck block '" + name + "'");
}

std::vector<GradBlock> default_grad_blocks() {
  return {GradBlock::Linear,       GradBlock::Stem,      GradBlock::PatchAggregation,
          GradBlock::Mhsa,         GradBlock::DeformConv, GradBlock::Etb,
          GradBlock::GcnBridge,    GradBlock::DecoderStage, GradBlock::CompositeLoss,
          GradBlock::UGformerNet,  GradBlock::UNetNet};
}

namespace {

Tensor<double> random_tensor(std::mt19937_64& rng, Shape dims, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Tensor<double> t(std::move(dims));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

// Everything the checker needs: a scalar objective evaluated at the current
// parameter values, and a routine that leaves analytic gradients in every
// checked tensor's grad slot.
struct Objective {
  std::function<double()> value;
  std::function<void()> gradient;
  ParamList<double> tensors;
};

GradcheckReport run_check(GradBlock block, Objective& obj, std::mt19937_64& rng, const GradcheckOptions& opts) {
  GradcheckReport report;
  report.block = block;
  report.tolerance = opts.tolerance;
  for (auto& np : obj.tensors) np.param->zero_grad();
  obj.gradient();
  // Snapshot analytic gradients; FD evaluations below may overwrite caches.
  std::vector<Tensor<double>> analytic;
  for (auto& np : obj.tensors) {
    if (!np.param->grad.all_finite()) {
      throw Error(ErrorKind::NonFiniteGradient, "analytic gradient of " + np.name + " is not finite");
    }
    analytic.push_back(np.param->grad);
  }
  const double h = opts.step;
  for (std::size_t t = 0; t < obj.tensors.size(); ++t) {
    Param<double>& p = *obj.tensors[t].param;
    std::vector<std::size_t> idx(p.value.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > opts.samples_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opts.samples_per_tensor);
    }
    GradcheckEntry entry{obj.tensors[t].name, idx.size(), 0.0};
    for (std::size_t i : idx) {
      const double saved = p.value[i];
      p.value[i] = saved + h;
      const double fp = obj.value();
      p.value[i] = saved - h;
      const double fm = obj.value();
      p.value[i] = saved;
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic[t][i];
      if (!std::isfinite(numeric)) {
        throw Error(ErrorKind::NonFiniteGradient, "finite difference of " + entry.tensor + " is not finite");
      }
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.abs_floor});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(a - numeric) / denom);
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.checked += entry.checked;
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error <= opts.tolerance;
  return report;
}

// Objective L = sum(R * block(x)) for a block exposing forward/backward/collect.
template <typename Block, typename Forward>
Objective block_objective(Block& block, Param<double>& input, const Tensor<double>& weights, Forward fwd) {
  Objective obj;
  obj.value = [&block, &input, &weights, fwd]() { return dot(fwd(block, input.value), weights); };
  obj.gradient = [&block, &input, &weights, fwd]() {
    fwd(block, input.value);
    input.grad = block.backward(weights);
  };
  block.collect("block", obj.tensors);
  obj.tensors.push_back({"input", &input});
  return obj;
}

// Randomize offset-predicting parameters so every bilinear tap is at least
// `margin` away from an integer gridline, where sampling is not differentiable.
template <typename Forward>
void move_off_seams(DeformConv2d<double>& dconv, std::mt19937_64& rng, double margin, Forward run) {
  for (int attempt = 0; attempt < 200; ++attempt) {
    dconv.offset_conv.weight.value = random_tensor(rng, dconv.offset_conv.weight.value.dims(), 0.15);
    dconv.offset_conv.bias.value = random_tensor(rng, dconv.offset_conv.bias.value.dims(), 0.3);
    run();
    if (dconv.min_seam_distance() >= margin) return;
  }
  throw Error(ErrorKind::NonFiniteGradient, "could not place deformable taps away from integer seams");
}

}  // namespace

GradcheckReport finite_diff_gradcheck(GradBlock block, std::uint64_t seed, const GradcheckOptions& opts) {
  std::mt19937_64 rng(seed);
  const ParamInit init(seed);
  constexpr double kSeamMargin = 1e-3;

  switch (block) {
    case GradBlock::Linear: {
      Conv2d<double> conv(3, 4, 1, 1, 0, init, "linear");
      conv.bias.value = random_tensor(rng, {4});
      Param<double> x(random_tensor(rng, {2, 3, 4, 4}));
      const auto r = random_tensor(rng, {2, 4, 4, 4});
      auto obj = block_objective(conv, x, r, [](auto& b, const auto& in) { return b.forward(in); });
      return run_check(block, obj, rng, opts);
    }
    case GradBlock::Stem: {
      Stem<double> stem(1, 4, init, "stem");
      Param<double> x(random_tensor(rng, {2, 1, 8, 8}));
      const auto r = random_tensor(rng, {2, 4, 4, 4});
      auto obj = block_objective(stem, x, r, [](auto& b, const auto& in) { return b.forward(in, Mode::Train); });
      return run_check(block, obj, rng, opts);
    }
    case GradBlock::PatchAggregation: {
      PatchAggregation<double> pa(4, init, "aggregate");
      Param<double> x(random_tensor(rng, {2, 4, 8, 8}));
      const auto r = random_tensor(rng, {2, 8, 4, 4});
      auto obj = block_objective(pa, x, r, [](auto& b, const auto& in) { return b.forward(in); });
      return run_check(block, obj, rng, opts);
    }
    case GradBlock::Mhsa: {
      MultiHeadSelfAttention<double> mhsa(8, 2, init, "mhsa");
      Param<double> x(random_tensor(rng, {2, 8, 4, 4}));
      const auto r = random_tensor(rng, {2, 8, 4, 4});
      auto obj = block_objective(mhsa, x, r, [](auto& b, const auto& in) { return b.forward(in); });
      return run_check(block, obj, rng, opts);
    }
    case GradBlock::DeformConv: {
      DeformConv2d<double> dconv(3, 4, init, "dconv");
      Param<double> x(random_tensor(rng, {2, 3, 6, 6}));
      const auto r = random_tensor(rng, {2, 4, 6, 6});
      move_off_seams(dconv, rng, kSeamMargin, [&] { dconv.forward(x.value); });
      auto obj = block_objective(dconv, x, r, [](auto& b, const auto& in) { return b.forward(in); });
      return run_check(block, obj, rng, opts);
    }
    case GradBlock::Etb: {
      EnhancedTransformerBlock<double> etb(EtbOptions{8, 2, true, true}, init, "etb");
      Param<double> x(random_tensor(rng, {2, 8, 4, 4}));
      const auto r = random_tensor(rng, {2, 8, 4, 4});
      move_off_seams(etb.dconv, rng, kSeamMargin, [&] { etb.forward(x.value); });
      auto obj = block_objective(etb, x, r, [](auto& b, const auto& in) { return b.forward(in); });
      return run_check(block, obj, rng, opts);
    }
    case GradBlock::GcnBridge: {
      GcnBridge<double> bridge(4, 1024, init, "bridge");
      Param<double> x(random_tensor(rng, {2, 4, 3, 3}));
      const auto r = random_tensor(rng, {2, 4, 3, 3});
      auto obj = block_objective(bridge, x, r, [](auto& b, const auto& in) { return b.forward(in); });
      return run_check(block, obj, rng, opts);
    }
    case GradBlock::DecoderStage: {
      DecoderStage<double> stage(8, init, "decoder");
      Param<double> x(random_tensor(rng, {2, 8, 2, 2}));
      Param<double> skip(random_tensor(rng, {2, 4, 4, 4}));
      const auto r = random_tensor(rng, {2, 4, 4, 4});
      Objective obj;
      obj.value = [&] { return dot(stage.forward(x.value, skip.value, Mode::Train), r); };
      obj.gradient = [&] {
        stage.forward(x.value, skip.value, Mode::Train);
        auto [dx, dskip] = stage.backward(r);
        x.grad = std::move(dx);
        skip.grad = std::move(dskip);
      };
      stage.collect("block", obj.tensors);
      obj.tensors.push_back({"input", &x});
      obj.tensors.push_back({"skip", &skip});
      return run_check(block, obj, rng, opts);
    }
    case GradBlock::CompositeLoss: {
      Param<double> logits(random_tensor(rng, {2, 1, 4, 4}, 2.0));
      Tensor<double> gt({2, 1, 4, 4});
      std::bernoulli_distribution coin(0.4);
      for (auto& v : gt.values()) v = coin(rng) ? 1.0 : 0.0;
      Objective obj;
      obj.value = [&] { return composite_loss(logits.value, gt).total; };
      obj.gradient = [&] { logits.grad = composite_loss(logits.value, gt).grad; };
      obj.tensors.push_back({"logits", &logits});
      GradcheckOptions o = opts;
      o.samples_per_tensor = logits.value.size();
      return run_check(block, obj, rng, o);
    }
    case GradBlock::UGformerNet:
    case GradBlock::UNetNet: {
      ModelConfig cfg;
      cfg.architecture = block == GradBlock::UGformerNet ? Architecture::UGformer : Architecture::UNet;
      cfg.base_channels = 4;
      cfg.num_stages = 2;
      cfg.num_heads = 2;
      cfg.init_seed = seed;
      SegmentationNet<double> net(cfg);
      Param<double> x(random_tensor(rng, {4, 1, 8, 8}));
      const auto r = random_tensor(rng, {4, 1, 8, 8});
      for (auto& e : net.etb) move_off_seams(e.dconv, rng, kSeamMargin, [&] { net.forward(x.value, Mode::Train); });
      Objective obj;
      obj.value = [&] { return dot(net.forward(x.value, Mode::Train), r); };
      obj.gradient = [&] {
        net.forward(x.value, Mode::Train);
        x.grad = net.backward(r);
      };
      for (auto& np : net.parameters()) {
        if (np.param->trainable) obj.tensors.push_back(np);
      }
      obj.tensors.push_back({"input", &x});
      GradcheckOptions o = opts;
      o.samples_per_tensor = std::min<std::size_t>(opts.samples_per_tensor, 8);
      return run_check(block, obj, rng, o);
    }
  }
  throw Error(ErrorKind::ConfigError, "unhandled gradcheck block");
}

template double dice_score<float>(const Tensor<float>&, const Tensor<float>&);
template double dice_score<double>(const Tensor<double>&, const Tensor<double>&);
template double dice_score<std::uint8_t>(const Tensor<std::uint8_t>&, const Tensor<std::uint8_t>&);
template LossValue<float> composite_loss<float>(const Tensor<float>&, const Tensor<float>&, float, float);
template LossValue<double> composite_loss<double>(const Tensor<double>&, const Tensor<double>&, double, double);
template void sgd_update<float>(Tensor<float>&, const Tensor<float>&, float);
template void sgd_update<double>(Tensor<double>&, const Tensor<double>&, double);
template class SgdOptimizer<float>;
template class SgdOptimizer<double>;

}  // namespace ugformer
