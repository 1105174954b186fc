#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <random>
#include <sstream>

#include "ugformer/cli.hpp"

namespace ugformer {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

void PipelineConfig::validate() const {
  if (frame == 0 || la_input == 0 || scar_input == 0) throw Error(ErrorKind::ConfigError, "pipeline sizes must be positive");
  if (!(threshold > 0.0 && threshold < 1.0)) throw Error(ErrorKind::ConfigError, "pipeline.threshold must be in (0, 1)");
}

Json to_json(const PipelineConfig& c) {
  Json j;
  j["frame"] = c.frame;
  j["la_input"] = c.la_input;
  j["scar_input"] = c.scar_input;
  j["threshold"] = c.threshold;
  j["tolerance"] = c.tolerance;
  j["augment"] = c.augment;
  return j;
}

Json to_json(const RunConfig& c) {
  Json j;
  j["model"] = to_json(c.model);
  j["train"] = to_json(c.train);
  j["pipeline"] = to_json(c.pipeline);
  return j;
}

PipelineConfig pipeline_config_from_json(const Json& j) {
  const std::string s = "pipeline";
  reject_unknown_keys(j, {"frame", "la_input", "scar_input", "threshold", "tolerance", "augment"}, s);
  PipelineConfig c;
  read_config_field(j, "frame", c.frame, s);
  read_config_field(j, "la_input", c.la_input, s);
  read_config_field(j, "scar_input", c.scar_input, s);
  read_config_field(j, "threshold", c.threshold, s);
  read_config_field(j, "tolerance", c.tolerance, s);
  read_config_field(j, "augment", c.augment, s);
  return c;
}

RunConfig run_config_from_json(const Json& j) {
  reject_unknown_keys(j, {"model", "train", "pipeline"}, "config");
  RunConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("pipeline")) c.pipeline = pipeline_config_from_json(j.at("pipeline"));
  try {
    c.model.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::ConfigError, e.what());
  }
  c.train.validate();
  c.pipeline.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::MissingFile, "config file not found: " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ConfigError, path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

TwoStageOptions two_stage_options(const PipelineConfig& c) {
  TwoStageOptions o;
  o.threshold = static_cast<float>(c.threshold);
  o.tolerance = c.tolerance;
  o.la_input = c.la_input;
  o.scar_input = c.scar_input;
  return o;
}

RunConfig ablation_run_config() {
  RunConfig c;
  c.model.base_channels = 16;
  c.pipeline.la_input = 64;
  c.pipeline.augment = false;
  c.train.epochs = 10;
  // 40 phantoms at batch 8 give too few steps per epoch to leave the all-background start.
  c.train.batch_size = 2;
  c.train.initial_lr = 0.05;
  c.train.momentum = 0.9;
  c.train.decay_policy = DecayPolicy::Plateau;
  c.train.plateau_patience = 2;
  return c;
}

// ---------------------------------------------------------------------------
// Task training

std::string task_name(Task t) { return t == Task::LA ? "la" : "scar"; }

Task parse_task(const std::string& name) {
  if (name == "la") return Task::LA;
  if (name == "scar") return Task::Scar;
  throw Error(ErrorKind::ConfigError, "unknown task '" + name + "' (expected la or scar)");
}

std::vector<Sample> prepare_samples(const std::vector<Sample>& raw, std::size_t frame) {
  std::vector<Sample> out;
  out.reserve(raw.size());
  for (const Sample& s : raw) out.push_back(preprocess_sample(s, frame));
  return out;
}

std::vector<Sample> augment_samples(const std::vector<Sample>& samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Sample> out;
  out.reserve(samples.size() * kAugmentationsPerSample);
  for (const Sample& s : samples) {
    auto copies = augment_sample(s, rng);
    for (auto& c : copies) out.push_back(std::move(c));
  }
  return out;
}

std::vector<TrainingExample> task_examples(Task task, const std::vector<Sample>& samples, const PipelineConfig& c) {
  if (task == Task::LA) return la_examples(samples, c.la_input);
  return scar_examples(samples, nullptr, two_stage_options(c));
}

TrainResult train_task(SegmentationNet<float>& net, Task task, const std::vector<Sample>& train,
                       const std::vector<Sample>& val, const RunConfig& cfg, const EpochCallback& on_epoch) {
  const auto train_set = cfg.pipeline.augment
                             ? task_examples(task, augment_samples(train, cfg.train.seed ^ 0xa5a5a5a5ULL), cfg.pipeline)
                             : task_examples(task, train, cfg.pipeline);
  return train_loop(net, train_set, task_examples(task, val, cfg.pipeline), cfg.train, on_epoch);
}

DiceSummary summarize(const std::vector<double>& dice) {
  DiceSummary s;
  s.count = dice.size();
  if (dice.empty()) return s;
  s.mean = mean(dice);
  double acc = 0;
  for (double d : dice) acc += (d - s.mean) * (d - s.mean);
  s.stddev = std::sqrt(acc / static_cast<double>(dice.size()));
  return s;
}

// ---------------------------------------------------------------------------
// Ablation

std::vector<ModelConfig> ablation_models(const ModelConfig& base) {
  std::vector<ModelConfig> out;
  for (auto [mhsa, dconv] : {std::pair{false, false}, {true, false}, {false, true}, {true, true}}) {
    ModelConfig c = base;
    c.architecture = Architecture::UGformer;
    c.use_mhsa = mhsa;
    c.use_dconv = dconv;
    c.use_gcn = true;
    out.push_back(c);
  }
  for (Architecture arch : {Architecture::UNet, Architecture::UGformer}) {
    for (bool gcn : {false, true}) {
      ModelConfig c = base;
      c.architecture = arch;
      c.use_mhsa = true;
      c.use_dconv = true;
      c.use_gcn = gcn;
      out.push_back(c);
    }
  }
  return out;
}

std::vector<AblationRow> run_ablation(const std::vector<Sample>& train, const std::vector<Sample>& val,
                                      const RunConfig& cfg, std::ostream* log) {
  const auto train_set = cfg.pipeline.augment
                             ? task_examples(Task::LA, augment_samples(train, cfg.train.seed ^ 0xa5a5a5a5ULL), cfg.pipeline)
                             : task_examples(Task::LA, train, cfg.pipeline);
  const auto val_set = task_examples(Task::LA, val, cfg.pipeline);
  const auto models = ablation_models(cfg.model);

  // Identical configurations (the full model appears in both tables) train once.
  std::map<std::string, AblationRow> done;
  std::vector<AblationRow> rows;
  for (std::size_t k = 0; k < models.size(); ++k) {
    const ModelConfig& m = models[k];
    const std::string table = k < 4 ? "etb" : "bridge";
    const std::string key = to_json(m).dump();
    if (auto it = done.find(key); it != done.end()) {
      AblationRow row = it->second;
      row.table = table;
      rows.push_back(row);
      continue;
    }
    AblationRow row;
    row.table = table;
    row.model = m;
    try {
      SegmentationNet<float> net(m);
      row.parameters = net.parameter_count();
      if (log) *log << "ablate: " << table << " " << to_json(m).dump() << "\n" << std::flush;
      const TrainResult r = train_loop(net, train_set, val_set, cfg.train, [&](const EpochRecord& e) {
        if (log) *log << "  epoch " << e.epoch << " loss " << e.train_loss << " val_dice " << e.val_dice << "\n" << std::flush;
      });
      row.la_dice = summarize(evaluate_dice(net, val_set, cfg.pipeline.threshold));
      row.final_train_loss = r.history.empty() ? 0.0 : r.history.back().train_loss;
      row.epochs = r.history.size();
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::InvalidConfig) throw;
      row.rejected = true;
      row.reason = e.what();
    }
    done.emplace(key, row);
    rows.push_back(row);
  }
  return rows;
}

Json to_json(const AblationRow& row, std::uint64_t seed) {
  Json j;
  j["table"] = row.table;
  j["architecture"] = architecture_name(row.model.architecture);
  j["mhsa"] = row.model.use_mhsa;
  j["dconv"] = row.model.use_dconv;
  j["gcn"] = row.model.use_gcn;
  j["status"] = row.rejected ? "rejected" : "trained";
  if (row.rejected) {
    j["reason"] = row.reason;
  } else {
    j["parameters"] = row.parameters;
    j["epochs"] = row.epochs;
    j["final_train_loss"] = row.final_train_loss;
    j["la_dice_mean"] = row.la_dice.mean;
    j["la_dice_std"] = row.la_dice.stddev;
    j["val_slices"] = row.la_dice.count;
  }
  j["seed"] = seed;
  return j;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream s;
  auto mark = [](bool on) { return on ? "x" : " "; };
  s << "| table  | architecture | MHSA | DC | GCN | params  | LA Dice (mean ± sd) |\n";
  s << "|--------|--------------|------|----|-----|---------|---------------------|\n";
  for (const auto& r : rows) {
    s << "| " << std::left << std::setw(6) << r.table << " | " << std::setw(12) << architecture_name(r.model.architecture)
      << " | " << std::setw(4) << (r.model.architecture == Architecture::UNet ? "-" : mark(r.model.use_mhsa)) << " | "
      << std::setw(2) << (r.model.architecture == Architecture::UNet ? "-" : mark(r.model.use_dconv)) << " | "
      << std::setw(3) << mark(r.model.use_gcn) << " | ";
    if (r.rejected) {
      s << std::setw(7) << "-" << " | " << std::setw(19) << "rejected config" << " |\n";
    } else {
      std::ostringstream d;
      d << std::fixed << std::setprecision(4) << r.la_dice.mean << " ± " << r.la_dice.stddev;
      s << std::setw(7) << r.parameters << " | " << std::setw(20) << d.str() << " |\n";
    }
  }
  return s.str();
}

// ---------------------------------------------------------------------------
// Images

void write_pgm(const Tensor<float>& img, const fs::path& path) {
  if (img.rank() != 2) throw Error(ErrorKind::ShapeMismatch, "write_pgm expects an [H, W] plane");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out << "P5\n" << img.dim(1) << " " << img.dim(0) << "\n255\n";
  std::string bytes(img.size(), '\0');
  for (std::size_t i = 0; i < img.size(); ++i) {
    const float v = std::clamp(img[i], 0.0f, 1.0f);
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Tensor<float> overlay(const Tensor<float>& image, const Tensor<float>& outline, const Tensor<float>* fill) {
  const std::size_t h = image.dim(0), w = image.dim(1);
  Tensor<float> out({h, w});
  for (std::size_t i = 0; i < image.size(); ++i) out[i] = 0.75f * image[i];
  auto on = [&](long r, long c) {
    return r >= 0 && c >= 0 && r < static_cast<long>(h) && c < static_cast<long>(w) && outline(r, c) != 0.0f;
  };
  for (long r = 0; r < static_cast<long>(h); ++r)
    for (long c = 0; c < static_cast<long>(w); ++c) {
      if (on(r, c) && !(on(r - 1, c) && on(r + 1, c) && on(r, c - 1) && on(r, c + 1))) out(r, c) = 1.0f;
      if (fill && (*fill)(r, c) != 0.0f) out(r, c) = 1.0f;
    }
  return out;
}

Tensor<float> draw_rect(const Tensor<float>& image, const Roi& roi) {
  Tensor<float> out = image;
  for (std::size_t c = roi.x_min; c <= roi.x_max; ++c) out(roi.y_min, c) = out(roi.y_max, c) = 1.0f;
  for (std::size_t r = roi.y_min; r <= roi.y_max; ++r) out(r, roi.x_min) = out(r, roi.x_max) = 1.0f;
  return out;
}

}  // namespace ugformer
