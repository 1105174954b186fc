#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ugformer/layers.hpp"
#include "ugformer/network.hpp"

namespace ugformer {

// ---------------------------------------------------------------------------
// Metrics and loss

// 2|P & G| / (|P| + |G|) over binary masks (nonzero = foreground); 1.0 when both are empty.
template <typename T>
double dice_score(const Tensor<T>& pred, const Tensor<T>& gt);

template <typename T>
struct LossValue {
  T total = 0;
  T bce = 0;
  T dice = 0;  // 1 - soft Dice, averaged over batch items
  Tensor<T> grad;
};

// lambda_bce * mean BCE(sigmoid(logits), gt) + lambda_dice * (1 - soft Dice), with soft
// Dice computed per batch item (leading axis) with smoothing 1 and averaged.
template <typename T>
LossValue<T> composite_loss(const Tensor<T>& logits, const Tensor<T>& gt, T lambda_bce = T(0.5),
                            T lambda_dice = T(0.5));

// ---------------------------------------------------------------------------
// Optimizer and schedule

// theta <- theta - lr * grad
template <typename T>
void sgd_update(Tensor<T>& params, const Tensor<T>& grads, T lr);

// Plain SGD over a parameter list, with optional heavy-ball momentum.
template <typename T>
class SgdOptimizer {
 public:
  explicit SgdOptimizer(double momentum = 0.0) : momentum_(momentum) {}

  void step(const ParamList<T>& params, double lr);

 private:
  double momentum_;
  std::vector<Tensor<T>> velocity_;
};

enum class DecayPolicy { Record, Plateau };

std::string decay_policy_name(DecayPolicy p);
DecayPolicy parse_decay_policy(const std::string& name);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double initial_lr = 1e-4;
  double decay_factor = 0.1;
  DecayPolicy decay_policy = DecayPolicy::Record;
  std::size_t plateau_patience = 2;
  double momentum = 0.0;
  std::uint64_t seed = 0;
  double lambda_bce = 0.5;
  double lambda_dice = 0.5;
  // Stop after this many optimizer steps (0 = no limit).
  std::size_t max_steps = 0;
  // Stop after the first validation reaching this Dice (0 = never).
  double target_dice = 0;

  void validate() const;
};

struct TrainState {
  std::size_t epoch = 0;
  double lr = 1e-4;
  std::optional<double> best_dice;
  std::size_t decays = 0;
  std::size_t epochs_without_record = 0;
};

// Record policy: the first validation only sets the record; afterwards every strict
// improvement sets the record and multiplies lr by decay_factor.
// Plateau policy: the record is tracked the same way, but lr decays after
// plateau_patience consecutive validations without a strict improvement.
TrainState lr_on_validation(const TrainState& state, double val_dice, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Training

struct TrainingExample {
  Tensor<float> image;   // [1, H, W]
  Tensor<float> target;  // [H, W], binary
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_dice = 0;
  double lr = 0;  // after the schedule reacted to this epoch's validation
  std::size_t steps = 0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t total_steps = 0;
  std::size_t batches_per_epoch = 0;
  bool reached_target = false;
  TrainState final_state;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Mini-batch SGD with per-epoch validation Dice and the configured lr schedule.
// Deterministic given cfg.seed and the initial parameters.
TrainResult train_loop(SegmentationNet<float>& model, const std::vector<TrainingExample>& train,
                       const std::vector<TrainingExample>& val, const TrainConfig& cfg,
                       const EpochCallback& on_epoch = {});

// Stack examples [first, first+count) into an image batch [n,1,H,W] and target batch [n,1,H,W].
std::pair<Tensor<float>, Tensor<float>> make_batch(const std::vector<TrainingExample>& set,
                                                   const std::vector<std::size_t>& order, std::size_t first,
                                                   std::size_t count);

// Sigmoid probabilities in eval mode, one [H, W] map per example.
std::vector<Tensor<float>> predict_probabilities(SegmentationNet<float>& model,
                                                 const std::vector<Tensor<float>>& images,
                                                 std::size_t batch_size = 8);

// Per-slice Dice of thresholded eval-mode predictions.
std::vector<double> evaluate_dice(SegmentationNet<float>& model, const std::vector<TrainingExample>& set,
                                  double threshold = 0.5, std::size_t batch_size = 8);

double mean(const std::vector<double>& v);

// ---------------------------------------------------------------------------
// Finite-difference gradient verification

enum class GradBlock {
  Linear,
  Stem,
  PatchAggregation,
  Mhsa,
  DeformConv,
  Etb,
  GcnBridge,
  DecoderStage,
  CompositeLoss,
  UGformerNet,
  UNetNet,
};

std::string grad_block_name(GradBlock b);
GradBlock parse_grad_block(const std::string& name);
std::vector<GradBlock> default_grad_blocks();

struct GradcheckEntry {
  std::string tensor;
  std::size_t checked = 0;
  double max_rel_error = 0;
};

struct GradcheckReport {
  GradBlock block{};
  std::vector<GradcheckEntry> entries;
  double max_rel_error = 0;
  double tolerance = 1e-4;
  std::size_t checked = 0;
  bool passed = false;
};

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  std::size_t samples_per_tensor = 32;
  // Relative error is |a - n| / max(|a|, |n|, abs_floor).
  double abs_floor = 1e-6;
};

// Central differences (f(t+h) - f(t-h)) / 2h against the analytic gradient of
// L = sum(R * block(x)) in 64-bit, for every scalar parameter tensor (all
// coordinates) and a random sample of coordinates of larger tensors and of x.
GradcheckReport finite_diff_gradcheck(GradBlock block, std::uint64_t seed, const GradcheckOptions& opts = {});

}  // namespace ugformer
