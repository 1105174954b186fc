#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ugformer/checkpoint.hpp"
#include "ugformer/data.hpp"
#include "ugformer/pipeline.hpp"
#include "ugformer/training.hpp"

namespace ugformer {

// ---------------------------------------------------------------------------
// Run configuration: the JSON file given to --config,
// {"model": {...}, "train": {...}, "pipeline": {...}}; every section is optional,
// unknown keys are rejected.

struct PipelineConfig {
  std::size_t frame = 224;      // preprocessed frame side
  std::size_t la_input = 64;    // LA model input side
  std::size_t scar_input = 96;  // scar model input side
  double threshold = 0.5;
  std::size_t tolerance = kRoiTolerance;
  bool augment = true;  // four random rotation/translation copies per training slice

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  PipelineConfig pipeline;
};

Json to_json(const PipelineConfig& c);
Json to_json(const RunConfig& c);
PipelineConfig pipeline_config_from_json(const Json& j);
RunConfig run_config_from_json(const Json& j);
RunConfig load_run_config(const std::filesystem::path& path);
TwoStageOptions two_stage_options(const PipelineConfig& c);

// Reduced configuration for desk-scale ablations: C0 = 16, 64x64 LA input, 10 epochs, batch 2.
RunConfig ablation_run_config();

// ---------------------------------------------------------------------------
// Task training

enum class Task { LA, Scar };

std::string task_name(Task t);
Task parse_task(const std::string& name);

// Margin crop + resize to the frame for every sample.
std::vector<Sample> prepare_samples(const std::vector<Sample>& raw, std::size_t frame);
// Four augmented copies per sample, drawn from one generator seeded with `seed`.
std::vector<Sample> augment_samples(const std::vector<Sample>& samples, std::uint64_t seed);
// LA: whole frame resized to la_input. Scar: ground-truth LA ROI patch resized to scar_input.
std::vector<TrainingExample> task_examples(Task task, const std::vector<Sample>& samples, const PipelineConfig& c);

// Trains `net` on prepared samples (augmenting the training set when configured).
TrainResult train_task(SegmentationNet<float>& net, Task task, const std::vector<Sample>& train,
                       const std::vector<Sample>& val, const RunConfig& cfg, const EpochCallback& on_epoch = {});

// ---------------------------------------------------------------------------
// Evaluation

struct DiceSummary {
  std::size_t count = 0;
  double mean = 0;
  double stddev = 0;  // population spread over slices
};

DiceSummary summarize(const std::vector<double>& dice);

// ---------------------------------------------------------------------------
// Ablation grid: ETB branch toggles (GCN on) and architecture x GCN.

struct AblationRow {
  std::string table;  // "etb" or "bridge"
  ModelConfig model;
  bool rejected = false;
  std::string reason;
  std::size_t parameters = 0;
  DiceSummary la_dice;
  double final_train_loss = 0;
  std::size_t epochs = 0;
};

std::vector<ModelConfig> ablation_models(const ModelConfig& base);
std::vector<AblationRow> run_ablation(const std::vector<Sample>& train, const std::vector<Sample>& val,
                                      const RunConfig& cfg, std::ostream* log = nullptr);
Json to_json(const AblationRow& row, std::uint64_t seed);
std::string format_ablation_table(const std::vector<AblationRow>& rows);

// ---------------------------------------------------------------------------
// Images

// Binary greyscale (P5) image from values in [0, 1].
void write_pgm(const Tensor<float>& img, const std::filesystem::path& path);
// Image with the mask outline (and optional filled second mask) burnt in white.
Tensor<float> overlay(const Tensor<float>& image, const Tensor<float>& outline,
                      const Tensor<float>* fill = nullptr);
Tensor<float> draw_rect(const Tensor<float>& image, const Roi& roi);

// ---------------------------------------------------------------------------
// Entry point

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitVerification = 3 };

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace ugformer
