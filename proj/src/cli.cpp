#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>

#include "ugformer/cli.hpp"

namespace ugformer {

namespace fs = std::filesystem;

namespace {

struct Args {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  std::string scar_checkpoint;
  std::string init_from;
  std::string styles;
  std::size_t count = 40;
  std::size_t canvas = 224;
  std::string data;
  std::string task = "la";
  std::string split;
  std::string blocks;
  bool overlays = false;
};

void write_json(const Json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

void write_jsonl(const std::vector<Json>& rows, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  for (const auto& r : rows) out << r.dump() << "\n";
}

RunConfig resolve_config(const Args& a, RunConfig fallback = {}) {
  RunConfig c = a.config.empty() ? fallback : load_run_config(a.config);
  if (a.seed) {
    c.train.seed = *a.seed;
    c.model.init_seed = *a.seed;
  }
  return c;
}

std::vector<PhantomStyle> resolve_styles(const Args& a) {
  return a.styles.empty() ? all_phantom_styles() : parse_phantom_styles(a.styles);
}

std::vector<PhantomSpec> phantom_specs(std::uint64_t seed, std::size_t count, const std::vector<PhantomStyle>& styles,
                                       std::size_t canvas) {
  std::vector<PhantomSpec> specs;
  specs.reserve(count);
  for (std::size_t k = 0; k < count; ++k) specs.push_back(random_phantom_spec(seed + k, styles[k % styles.size()], canvas));
  return specs;
}

struct LoadedModel {
  std::unique_ptr<SegmentationNet<float>> net;
  Checkpoint header;
  PipelineConfig pipeline;
  Task task = Task::LA;
};

LoadedModel load_model(const std::string& path) {
  LoadedModel m;
  m.header = read_checkpoint_header(path);
  m.net = std::make_unique<SegmentationNet<float>>(m.header.model);
  load_checkpoint(*m.net, path);
  const Json& extra = m.header.extra;
  if (extra.contains("config") && extra["config"].contains("pipeline")) {
    m.pipeline = pipeline_config_from_json(extra["config"]["pipeline"]);
  }
  if (extra.contains("task")) m.task = parse_task(extra["task"].get<std::string>());
  return m;
}

std::uint64_t checkpoint_seed(const LoadedModel& m) {
  return m.header.extra.contains("seed") ? m.header.extra["seed"].get<std::uint64_t>() : m.header.model.init_seed;
}

struct SplitSet {
  Split split;
  std::vector<Sample> samples;  // prepared to the frame
};

std::vector<SplitSet> selected_splits(const Args& a, std::size_t frame, const std::string& fallback) {
  const DatasetSplits d = load_dataset(a.data);
  const std::string which = a.split.empty() ? fallback : a.split;
  std::vector<Split> splits;
  if (which == "all") {
    splits = {Split::Train, Split::Val, Split::Test};
  } else {
    try {
      splits = {parse_split(which)};
    } catch (const Error& e) {
      throw Error(ErrorKind::UsageError, e.what());
    }
  }
  std::vector<SplitSet> out;
  for (Split s : splits) {
    if (d.of(s).empty()) continue;
    out.push_back({s, prepare_samples(d.of(s), frame)});
  }
  if (out.empty()) throw Error(ErrorKind::EmptyDataset, "no samples in split '" + which + "' of " + a.data);
  return out;
}

std::vector<Tensor<float>> planes(const std::vector<Sample>& samples) {
  std::vector<Tensor<float>> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) out.push_back(image_plane(s));
  return out;
}

std::string slice_name(Split split, std::size_t k) {
  std::ostringstream s;
  s << split_name(split) << "_" << std::setw(4) << std::setfill('0') << k;
  return s.str();
}

Json roi_json(const std::optional<Roi>& roi) {
  if (!roi) return nullptr;
  return {{"x_min", roi->x_min}, {"y_min", roi->y_min}, {"x_max", roi->x_max}, {"y_max", roi->y_max}};
}

// Scar-only prediction with the ground-truth LA ROI, restored to the frame.
Tensor<float> predict_scar_in_gt_roi(const Sample& s, SegmentationNet<float>& net, const PipelineConfig& pc) {
  if (!s.la_mask) throw Error(ErrorKind::MissingFile, "scar prediction needs the LA mask (seed " + std::to_string(s.meta.seed) + ")");
  const Roi roi = compute_roi(*s.la_mask, pc.tolerance);
  const std::size_t side = pc.scar_input;
  const auto patch = resize_bilinear(crop_to_roi(image_plane(s), roi), side, side).reshaped({1, side, side});
  const auto prob = predict_probabilities(net, {patch}).front();
  return restore_zero_pad(threshold_mask(resize_bilinear(prob, roi.height(), roi.width()), static_cast<float>(pc.threshold)),
                          roi);
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_synth(const Args& a, std::ostream& out) {
  const std::uint64_t seed = a.seed.value_or(0);
  const auto styles = resolve_styles(a);
  const auto specs = phantom_specs(seed, a.count, styles, a.canvas);
  const auto entries = write_phantom_dataset(specs, default_splits(a.count), a.out);
  Json style_names = Json::array();
  for (PhantomStyle s : styles) style_names.push_back(phantom_style_name(s));
  std::map<std::string, std::size_t> per_split;
  for (const auto& e : entries) ++per_split[split_name(e.split)];
  write_json({{"seed", seed}, {"count", a.count}, {"canvas", a.canvas}, {"styles", style_names}, {"splits", per_split}},
             fs::path(a.out) / "synth.json");
  out << "wrote " << entries.size() << " phantoms to " << (fs::path(a.out) / "manifest.jsonl").string() << "\n";
  return kExitOk;
}

int cmd_train(const Args& a, std::ostream& out) {
  const RunConfig cfg = resolve_config(a);
  const Task task = parse_task(a.task);
  const DatasetSplits d = load_dataset(a.data);
  const auto train = prepare_samples(d.train, cfg.pipeline.frame);
  const auto val = prepare_samples(d.val, cfg.pipeline.frame);
  if (train.empty() || val.empty()) throw Error(ErrorKind::EmptyDataset, "training needs non-empty train and val splits");

  SegmentationNet<float> net(cfg.model);
  Json extra;
  extra["task"] = task_name(task);
  extra["seed"] = cfg.train.seed;
  extra["config"] = to_json(cfg);
  extra["data"] = a.data;
  if (!a.init_from.empty()) {
    const std::size_t copied = load_matching_parameters(net, a.init_from);
    extra["init_from"] = a.init_from;
    extra["init_copied"] = copied;
    out << "initialised " << copied << " parameter tensors from " << a.init_from << "\n";
  }

  std::vector<Json> history;
  train_task(net, task, train, val, cfg, [&](const EpochRecord& r) {
    Json row{{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_dice", r.val_dice}, {"lr", r.lr},
             {"steps", r.steps}, {"task", task_name(task)}, {"seed", cfg.train.seed}};
    out << row.dump() << "\n" << std::flush;
    history.push_back(std::move(row));
  });
  extra["history"] = history;

  const fs::path dir(a.out);
  save_checkpoint(net, dir / "model.ckpt", extra);
  write_jsonl(history, dir / "history.jsonl");
  write_json({{"task", task_name(task)}, {"seed", cfg.train.seed}, {"config", to_json(cfg)}, {"data", a.data},
              {"init_from", a.init_from.empty() ? Json(nullptr) : Json(a.init_from)}},
             dir / "run.json");
  out << "checkpoint " << (dir / "model.ckpt").string() << "\n";
  return kExitOk;
}

int cmd_predict(const Args& a, std::ostream& out) {
  LoadedModel m = load_model(a.checkpoint);
  const fs::path dir(a.out);
  std::vector<Json> rows;
  for (const auto& set : selected_splits(a, m.pipeline.frame, "val")) {
    std::vector<Tensor<float>> masks;
    if (m.task == Task::LA) {
      masks = predict_la_masks(planes(set.samples), *m.net, two_stage_options(m.pipeline));
    } else {
      for (const Sample& s : set.samples) masks.push_back(predict_scar_in_gt_roi(s, *m.net, m.pipeline));
    }
    for (std::size_t k = 0; k < set.samples.size(); ++k) {
      const Sample& s = set.samples[k];
      const std::string name = slice_name(set.split, k);
      write_mask(masks[k], dir / (name + ".ugt"));
      if (a.overlays) write_pgm(overlay(image_plane(s), masks[k]), dir / (name + ".pgm"));
      Json row{{"slice", name}, {"split", split_name(set.split)}, {"phantom_seed", s.meta.seed}, {"style", s.meta.style},
               {"mask", name + ".ugt"}};
      const auto& gt = m.task == Task::LA ? s.la_mask : s.scar_mask;
      if (gt) row["dice"] = dice_score(masks[k], *gt);
      rows.push_back(std::move(row));
    }
  }
  write_jsonl(rows, dir / "predictions.jsonl");
  write_json({{"task", task_name(m.task)}, {"seed", checkpoint_seed(m)}, {"checkpoint", a.checkpoint},
              {"model", to_json(m.header.model)}, {"pipeline", to_json(m.pipeline)}, {"data", a.data}},
             dir / "run.json");
  out << "wrote " << rows.size() << " masks to " << dir.string() << "\n";
  return kExitOk;
}

int cmd_two_stage(const Args& a, std::ostream& out) {
  LoadedModel la = load_model(a.checkpoint);
  LoadedModel scar = load_model(a.scar_checkpoint);
  const PipelineConfig& pc = la.pipeline;
  TwoStageOptions opts = two_stage_options(pc);
  opts.scar_input = scar.pipeline.scar_input;
  const fs::path dir(a.out);
  std::vector<Json> rows;
  for (const auto& set : selected_splits(a, pc.frame, "val")) {
    const auto images = planes(set.samples);
    const auto results = two_stage_predict_batch(images, *la.net, *scar.net, opts);
    for (std::size_t k = 0; k < results.size(); ++k) {
      const Sample& s = set.samples[k];
      const TwoStageResult& r = results[k];
      const std::string name = slice_name(set.split, k);
      const fs::path sd = dir / name;
      write_pgm(images[k], sd / "1_input.pgm");
      write_pgm(overlay(images[k], r.la_mask), sd / "2_la.pgm");
      if (r.roi) {
        write_pgm(draw_rect(images[k], *r.roi), sd / "3_roi.pgm");
        write_pgm(r.patch.reshaped({r.patch.dim(r.patch.rank() - 2), r.patch.dim(r.patch.rank() - 1)}), sd / "4_patch.pgm");
      }
      write_pgm(overlay(images[k], r.la_mask, &r.scar_mask), sd / "5_scar.pgm");
      write_mask(r.la_mask, sd / "la.ugt");
      write_mask(r.scar_mask, sd / "scar.ugt");
      Json row{{"slice", name}, {"split", split_name(set.split)}, {"phantom_seed", s.meta.seed}, {"style", s.meta.style},
               {"empty_la", r.empty_la}, {"roi", roi_json(r.roi)}};
      if (s.la_mask) row["la_dice"] = dice_score(r.la_mask, *s.la_mask);
      if (s.scar_mask) row["scar_dice"] = dice_score(r.scar_mask, *s.scar_mask);
      rows.push_back(std::move(row));
    }
  }
  write_jsonl(rows, dir / "two_stage.jsonl");
  write_json({{"seed", checkpoint_seed(la)}, {"scar_seed", checkpoint_seed(scar)}, {"la_checkpoint", a.checkpoint},
              {"scar_checkpoint", a.scar_checkpoint}, {"la_model", to_json(la.header.model)},
              {"scar_model", to_json(scar.header.model)}, {"pipeline", to_json(pc)}, {"data", a.data}},
             dir / "run.json");
  out << "wrote " << rows.size() << " two-stage panels to " << dir.string() << "\n";
  return kExitOk;
}

int cmd_eval(const Args& a, std::ostream& out) {
  LoadedModel la = load_model(a.checkpoint);
  std::optional<LoadedModel> scar;
  if (!a.scar_checkpoint.empty()) scar = load_model(a.scar_checkpoint);
  TwoStageOptions opts = two_stage_options(la.pipeline);
  if (scar) opts.scar_input = scar->pipeline.scar_input;

  // (split, style) -> per-slice dice; style "all" aggregates a split.
  std::map<std::pair<std::string, std::string>, std::pair<std::vector<double>, std::vector<double>>> groups;
  std::vector<std::string> order;
  for (const auto& set : selected_splits(a, la.pipeline.frame, "all")) {
    const auto images = planes(set.samples);
    std::vector<Tensor<float>> la_masks, scar_masks;
    if (scar) {
      for (auto& r : two_stage_predict_batch(images, *la.net, *scar->net, opts)) {
        la_masks.push_back(std::move(r.la_mask));
        scar_masks.push_back(std::move(r.scar_mask));
      }
    } else {
      la_masks = predict_la_masks(images, *la.net, opts);
    }
    const std::string split = split_name(set.split);
    for (std::size_t k = 0; k < set.samples.size(); ++k) {
      const Sample& s = set.samples[k];
      for (const std::string& style : {std::string("all"), s.meta.style}) {
        auto& g = groups[{split, style}];
        if (s.la_mask) g.first.push_back(dice_score(la_masks[k], *s.la_mask));
        if (scar && s.scar_mask) g.second.push_back(dice_score(scar_masks[k], *s.scar_mask));
      }
    }
  }

  std::vector<Json> rows;
  std::ostringstream table;
  table << "| split | style         | slices | LA Dice         | scar Dice       |\n";
  table << "|-------|---------------|--------|-----------------|-----------------|\n";
  auto cell = [](const DiceSummary& d) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << d.mean << " ± " << d.stddev;
    return s.str();
  };
  for (const auto& [key, g] : groups) {
    const DiceSummary ls = summarize(g.first), ss = summarize(g.second);
    Json row{{"split", key.first}, {"style", key.second}, {"slices", ls.count}, {"la_dice_mean", ls.mean},
             {"la_dice_std", ls.stddev}};
    if (scar) {
      row["scar_dice_mean"] = ss.mean;
      row["scar_dice_std"] = ss.stddev;
    }
    row["seed"] = checkpoint_seed(la);
    rows.push_back(row);
    table << "| " << std::left << std::setw(5) << key.first << " | " << std::setw(13) << key.second << " | "
          << std::setw(6) << ls.count << " | " << std::setw(16) << cell(ls) << " | " << std::setw(16)
          << (scar ? cell(ss) : std::string("-")) << " |\n";
  }
  out << table.str();
  if (!a.out.empty()) {
    const fs::path dir(a.out);
    write_jsonl(rows, dir / "eval.jsonl");
    Json run{{"seed", checkpoint_seed(la)}, {"la_checkpoint", a.checkpoint}, {"la_model", to_json(la.header.model)},
             {"pipeline", to_json(la.pipeline)}, {"data", a.data}};
    if (scar) {
      run["scar_checkpoint"] = a.scar_checkpoint;
      run["scar_model"] = to_json(scar->header.model);
    }
    write_json(run, dir / "run.json");
    std::ofstream(dir / "eval.md") << table.str();
  }
  return kExitOk;
}

int cmd_ablate(const Args& a, std::ostream& out) {
  const RunConfig cfg = resolve_config(a, ablation_run_config());
  std::vector<Sample> train, val;
  Json source;
  if (!a.data.empty()) {
    const DatasetSplits d = load_dataset(a.data);
    train = prepare_samples(d.train, cfg.pipeline.frame);
    val = prepare_samples(d.val, cfg.pipeline.frame);
    source = {{"manifest", a.data}};
  } else {
    const auto styles = resolve_styles(a);
    const auto specs = phantom_specs(cfg.train.seed, a.count, styles, a.canvas);
    const auto splits = default_splits(a.count);
    for (std::size_t k = 0; k < specs.size(); ++k) {
      (splits[k] == Split::Val ? val : train).push_back(preprocess_sample(generate_phantom(specs[k]), cfg.pipeline.frame));
    }
    Json names = Json::array();
    for (PhantomStyle s : styles) names.push_back(phantom_style_name(s));
    source = {{"phantoms", a.count}, {"phantom_seed", cfg.train.seed}, {"styles", names}, {"canvas", a.canvas}};
  }
  if (train.empty() || val.empty()) throw Error(ErrorKind::EmptyDataset, "ablation needs non-empty train and val splits");

  const auto rows = run_ablation(train, val, cfg, &out);
  std::vector<Json> records;
  for (const auto& r : rows) records.push_back(to_json(r, cfg.train.seed));
  const std::string table = format_ablation_table(rows);
  out << table;
  if (!a.out.empty()) {
    const fs::path dir(a.out);
    write_jsonl(records, dir / "ablation.jsonl");
    std::ofstream(dir / "ablation.md") << table;
    write_json({{"seed", cfg.train.seed}, {"config", to_json(cfg)}, {"data", source}}, dir / "run.json");
  }
  return kExitOk;
}

int cmd_gradcheck(const Args& a, std::ostream& out) {
  std::vector<GradBlock> blocks;
  if (a.blocks.empty()) {
    blocks = default_grad_blocks();
  } else {
    std::stringstream ss(a.blocks);
    for (std::string item; std::getline(ss, item, ',');) blocks.push_back(parse_grad_block(item));
  }
  const std::uint64_t seed = a.seed.value_or(0);
  bool all = true;
  std::vector<Json> rows;
  for (GradBlock b : blocks) {
    const GradcheckReport r = finite_diff_gradcheck(b, seed);
    all = all && r.passed;
    out << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(18) << grad_block_name(b)
        << " max_rel_err=" << std::scientific << std::setprecision(3) << r.max_rel_error << std::defaultfloat
        << " checked=" << r.checked << "\n";
    Json row{{"block", grad_block_name(b)}, {"passed", r.passed}, {"max_rel_error", r.max_rel_error},
             {"tolerance", r.tolerance}, {"checked", r.checked}, {"seed", seed}};
    Json tensors = Json::array();
    for (const auto& e : r.entries) tensors.push_back({{"tensor", e.tensor}, {"checked", e.checked}, {"max_rel_error", e.max_rel_error}});
    row["tensors"] = tensors;
    rows.push_back(std::move(row));
  }
  if (!a.out.empty()) write_jsonl(rows, fs::path(a.out) / "gradcheck.jsonl");
  return all ? kExitOk : kExitVerification;
}

int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::UsageError:
    case ErrorKind::ConfigError:
    case ErrorKind::InvalidConfig:
    case ErrorKind::HeadMismatch:
    case ErrorKind::BadSpatialDivisibility:
      return kExitUsage;
    default:
      return kExitData;
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"UGformer: two-stage left-atrium and scar segmentation on synthetic phantoms", "ugformer"};
  app.require_subcommand(1);
  Args a;

  auto* synth = app.add_subcommand("synth", "generate a phantom dataset and manifest");
  synth->add_option("--out", a.out, "output directory")->required();
  synth->add_option("--count", a.count, "number of phantoms")->check(CLI::PositiveNumber);
  synth->add_option("--styles", a.styles, "comma-separated styles (default: all four)");
  synth->add_option("--seed", a.seed, "seed of the first phantom");
  synth->add_option("--canvas", a.canvas, "canvas side in pixels")->check(CLI::PositiveNumber);

  auto* train = app.add_subcommand("train", "train an LA or scar model");
  train->add_option("--data", a.data, "manifest.jsonl")->required();
  train->add_option("--out", a.out, "output directory")->required();
  train->add_option("--task", a.task, "la or scar");
  train->add_option("--config", a.config, "JSON run configuration");
  train->add_option("--seed", a.seed, "overrides train.seed and model.init_seed");
  train->add_option("--init-from", a.init_from, "checkpoint whose matching parameters initialise the model");

  auto* predict = app.add_subcommand("predict", "write per-slice masks of one model");
  predict->add_option("--checkpoint", a.checkpoint, "model checkpoint")->required();
  predict->add_option("--data", a.data, "manifest.jsonl")->required();
  predict->add_option("--out", a.out, "output directory")->required();
  predict->add_option("--split", a.split, "train, val, test or all (default val)");
  predict->add_flag("--overlay", a.overlays, "also write greyscale overlays");

  auto* two = app.add_subcommand("two-stage", "LA, ROI and scar prediction with per-slice panels");
  two->add_option("--checkpoint", a.checkpoint, "LA model checkpoint")->required();
  two->add_option("--scar-checkpoint", a.scar_checkpoint, "scar model checkpoint")->required();
  two->add_option("--data", a.data, "manifest.jsonl")->required();
  two->add_option("--out", a.out, "output directory")->required();
  two->add_option("--split", a.split, "train, val, test or all (default val)");

  auto* eval = app.add_subcommand("eval", "Dice table per split and style");
  eval->add_option("--checkpoint", a.checkpoint, "LA model checkpoint")->required();
  eval->add_option("--scar-checkpoint", a.scar_checkpoint, "scar model checkpoint (enables scar Dice)");
  eval->add_option("--data", a.data, "manifest.jsonl")->required();
  eval->add_option("--split", a.split, "train, val, test or all (default all)");
  eval->add_option("--out", a.out, "output directory for eval.jsonl");

  auto* ablate = app.add_subcommand("ablate", "train the ETB-toggle and bridge ablation grid");
  ablate->add_option("--out", a.out, "output directory");
  ablate->add_option("--config", a.config, "JSON run configuration (default: reduced desk-scale config)");
  ablate->add_option("--seed", a.seed, "training, initialisation and phantom seed");
  ablate->add_option("--data", a.data, "manifest.jsonl (default: generate phantoms in memory)");
  ablate->add_option("--count", a.count, "phantoms to generate")->check(CLI::PositiveNumber);
  ablate->add_option("--styles", a.styles, "comma-separated styles for generated phantoms");
  ablate->add_option("--canvas", a.canvas, "canvas side for generated phantoms")->check(CLI::PositiveNumber);

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  grad->add_option("--blocks", a.blocks, "comma-separated blocks (default: all)");
  grad->add_option("--seed", a.seed, "seed");
  grad->add_option("--out", a.out, "output directory for gradcheck.jsonl");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(a, out);
    if (*train) return cmd_train(a, out);
    if (*predict) return cmd_predict(a, out);
    if (*two) return cmd_two_stage(a, out);
    if (*eval) return cmd_eval(a, out);
    if (*ablate) return cmd_ablate(a, out);
    if (*grad) return cmd_gradcheck(a, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  err << app.help();
  return kExitUsage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace ugformer
