#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <iterator>
#include <random>
#include <set>
#include <sstream>

#include "ugformer/cli.hpp"

using namespace ugformer;
namespace fs = std::filesystem;

namespace {

template <typename Fn>
ErrorKind error_kind_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an ugformer::Error");
  return ErrorKind::IoError;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("ugformer_test_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

struct Outcome {
  int code;
  std::string out, err;
};

Outcome invoke(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

bool same_values(const Tensor<float>& a, const Tensor<float>& b) {
  return a.dims() == b.dims() && std::ranges::equal(a.values(), b.values());
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

// Small enough to train in a fraction of a second on 64x64 frames.
const char* kTinyConfig = R"({
  "model": {"base_channels": 4, "num_stages": 2, "num_heads": 2},
  "train": {"epochs": 2, "batch_size": 4, "initial_lr": 0.05, "momentum": 0.9, "decay_policy": "plateau"},
  "pipeline": {"frame": 64, "la_input": 32, "scar_input": 32, "tolerance": 8, "augment": true}
})";

}  // namespace

TEST_CASE("argument handling") {
  SUBCASE("unknown subcommand is a usage error with usage text") {
    const auto r = invoke({"frobnicate"});
    CHECK(r.code == 1);
    CHECK(r.err.find("Usage") != std::string::npos);
  }
  SUBCASE("no subcommand") { CHECK(invoke({}).code == 1); }
  SUBCASE("unknown flag") { CHECK(invoke({"gradcheck", "--bogus"}).code == 1); }
  SUBCASE("flag of another subcommand") { CHECK(invoke({"gradcheck", "--count", "3"}).code == 1); }
  SUBCASE("help exits cleanly") { CHECK(invoke({"--help"}).code == 0); }
  SUBCASE("unknown gradient block") { CHECK(invoke({"gradcheck", "--blocks", "nope"}).code == 1); }
  SUBCASE("missing manifest is a data error") {
    CHECK(invoke({"train", "--data", "/nonexistent/manifest.jsonl", "--out", "/tmp/x"}).code == 2);
  }
}

TEST_CASE("gradcheck subcommand on the default blocks") {
  TempDir dir("cli_grad");
  const auto r = invoke({"gradcheck", "--out", dir.path.string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("FAIL") == std::string::npos);
  CHECK(line_count(dir.path / "gradcheck.jsonl") == default_grad_blocks().size());
  std::ifstream in(dir.path / "gradcheck.jsonl");
  std::string line;
  std::getline(in, line);
  const Json row = Json::parse(line);
  CHECK(row.at("passed").get<bool>());
  CHECK(row.at("seed").get<std::uint64_t>() == 0);
}

TEST_CASE("run configuration parsing") {
  SUBCASE("defaults and round trip") {
    const RunConfig c = run_config_from_json(Json::object());
    CHECK(c.model.base_channels == 32);
    CHECK(c.train.initial_lr == 1e-4);
    CHECK(c.pipeline.frame == 224);
    const RunConfig d = run_config_from_json(to_json(ablation_run_config()));
    CHECK(to_json(d) == to_json(ablation_run_config()));
  }
  SUBCASE("unknown keys are rejected in every section") {
    for (const char* text : {R"({"modle": {}})", R"({"model": {"channels": 3}})", R"({"train": {"lr": 1}})",
                             R"({"pipeline": {"size": 64}})"}) {
      CAPTURE(text);
      CHECK(error_kind_of([&] { run_config_from_json(Json::parse(text)); }) == ErrorKind::ConfigError);
    }
  }
  SUBCASE("invalid values are configuration errors") {
    for (const char* text : {R"({"model": {"use_mhsa": false, "use_dconv": false}})", R"({"train": {"batch_size": 0}})",
                             R"({"train": {"decay_policy": "cosine"}})", R"({"model": {"base_channels": "wide"}})",
                             R"({"pipeline": {"threshold": 1.5}})"}) {
      CAPTURE(text);
      CHECK(error_kind_of([&] { run_config_from_json(Json::parse(text)); }) == ErrorKind::ConfigError);
    }
  }
  SUBCASE("train rejects a bad config file with exit 1") {
    TempDir dir("cli_cfg");
    write_text(dir.path / "bad.json", R"({"model": {"bogus": 1}})");
    const auto r = invoke({"train", "--data", (dir.path / "manifest.jsonl").string(), "--out", dir.path.string(),
                           "--config", (dir.path / "bad.json").string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("bogus") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip") {
  TempDir dir("ckpt");
  ModelConfig mc;
  mc.base_channels = 4;
  mc.num_stages = 2;
  mc.num_heads = 2;
  mc.init_seed = 11;
  SegmentationNet<float> a(mc);
  // Move away from the initialisation so a fresh network differs.
  for (auto& [name, p] : a.parameters())
    for (auto& v : p->value.values()) v += 0.01f;
  save_checkpoint(a, dir.path / "a.ckpt", {{"note", "x"}});

  const Checkpoint head = read_checkpoint_header(dir.path / "a.ckpt");
  CHECK(to_json(head.model) == to_json(mc));
  CHECK(head.extra.at("note") == "x");

  SegmentationNet<float> b(mc);
  load_checkpoint(b, dir.path / "a.ckpt");
  auto pa = a.parameters(), pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(same_values(pa[i].param->value, pb[i].param->value));

  std::mt19937_64 rng(3);
  Tensor<float> x({2, 1, 32, 32});
  std::uniform_real_distribution<float> u(0, 1);
  for (auto& v : x.values()) v = u(rng);
  CHECK(same_values(a.forward(x, Mode::Eval), b.forward(x, Mode::Eval)));

  SUBCASE("mismatched architecture is rejected") {
    ModelConfig other = mc;
    other.use_gcn = false;
    SegmentationNet<float> c(other);
    CHECK_THROWS_AS(load_checkpoint(c, dir.path / "a.ckpt"), Error);
    // ...but every shared tensor transfers.
    CHECK(load_matching_parameters(c, dir.path / "a.ckpt") == c.parameters().size());
  }
  SUBCASE("bad magic and truncation") {
    std::string bytes = slurp(dir.path / "a.ckpt");
    write_text(dir.path / "t.ckpt", bytes.substr(0, bytes.size() - 3));
    CHECK(error_kind_of([&] { load_checkpoint(b, dir.path / "t.ckpt"); }) == ErrorKind::TruncatedFile);
    bytes[0] = 'X';
    write_text(dir.path / "m.ckpt", bytes);
    CHECK(error_kind_of([&] { read_checkpoint_header(dir.path / "m.ckpt"); }) == ErrorKind::BadMagic);
    CHECK(error_kind_of([&] { read_checkpoint_header(dir.path / "none.ckpt"); }) == ErrorKind::MissingFile);
  }
}

TEST_CASE("ablation grid structure") {
  const auto models = ablation_models(ModelConfig{});
  REQUIRE(models.size() == 8);
  // ETB toggles with the GCN bridge on.
  const std::pair<bool, bool> toggles[] = {{false, false}, {true, false}, {false, true}, {true, true}};
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(models[k].architecture == Architecture::UGformer);
    CHECK(models[k].use_mhsa == toggles[k].first);
    CHECK(models[k].use_dconv == toggles[k].second);
    CHECK(models[k].use_gcn);
  }
  // Architecture x GCN.
  CHECK(models[4].architecture == Architecture::UNet);
  CHECK(!models[4].use_gcn);
  CHECK(models[5].architecture == Architecture::UNet);
  CHECK(models[5].use_gcn);
  CHECK(models[6].architecture == Architecture::UGformer);
  CHECK(!models[6].use_gcn);
  CHECK(to_json(models[7]) == to_json(models[3]));
}

TEST_CASE("end-to-end subcommands on a tiny dataset") {
  TempDir dir("cli_e2e");
  const fs::path ds = dir.path / "ds", manifest = ds / "manifest.jsonl", cfg = dir.path / "tiny.json";
  write_text(cfg, kTinyConfig);
  const std::string count = "20";

  REQUIRE(invoke({"synth", "--out", ds.string(), "--count", count, "--canvas", "64", "--seed", "5"}).code == 0);
  CHECK(line_count(manifest) == 20);
  CHECK(Json::parse(slurp(ds / "synth.json")).at("seed") == 5);
  {
    // Regeneration is bit-identical.
    const fs::path again = dir.path / "again";
    REQUIRE(invoke({"synth", "--out", again.string(), "--count", count, "--canvas", "64", "--seed", "5"}).code == 0);
    for (const auto& e : read_manifest(manifest)) CHECK(slurp(ds / e.image) == slurp(again / e.image));
  }

  const fs::path la = dir.path / "la", scar = dir.path / "scar";
  REQUIRE(invoke({"train", "--data", manifest.string(), "--out", la.string(), "--config", cfg.string(), "--seed", "9"})
              .code == 0);
  CHECK(line_count(la / "history.jsonl") == 2);
  {
    std::ifstream in(la / "history.jsonl");
    std::string line;
    std::getline(in, line);
    const Json rec = Json::parse(line);
    for (const char* key : {"epoch", "train_loss", "val_dice", "lr", "seed"}) CHECK(rec.contains(key));
    CHECK(rec.at("seed") == 9);
    const Json run = Json::parse(slurp(la / "run.json"));
    CHECK(run.at("seed") == 9);
    CHECK(run.at("config").at("model").at("init_seed") == 9);
  }
  SUBCASE("training replays bit-exactly") {
    const fs::path la2 = dir.path / "la2";
    REQUIRE(invoke({"train", "--data", manifest.string(), "--out", la2.string(), "--config", cfg.string(), "--seed", "9"})
                .code == 0);
    CHECK(slurp(la / "history.jsonl") == slurp(la2 / "history.jsonl"));
    const Checkpoint h1 = read_checkpoint_header(la / "model.ckpt");
    SegmentationNet<float> n1(h1.model), n2(h1.model);
    load_checkpoint(n1, la / "model.ckpt");
    load_checkpoint(n2, la2 / "model.ckpt");
    auto p1 = n1.parameters(), p2 = n2.parameters();
    for (std::size_t i = 0; i < p1.size(); ++i) CHECK(same_values(p1[i].param->value, p2[i].param->value));
  }
  SUBCASE("scar model, prediction, two-stage panels and evaluation") {
    const auto t = invoke({"train", "--data", manifest.string(), "--out", scar.string(), "--task", "scar", "--config",
                           cfg.string(), "--init-from", (la / "model.ckpt").string()});
    REQUIRE(t.code == 0);
    CHECK(t.out.find("initialised") != std::string::npos);
    CHECK(read_checkpoint_header(scar / "model.ckpt").extra.at("task") == "scar");

    const fs::path pred = dir.path / "pred";
    REQUIRE(invoke({"predict", "--checkpoint", (la / "model.ckpt").string(), "--data", manifest.string(), "--out",
                    pred.string(), "--overlay"})
                .code == 0);
    CHECK(line_count(pred / "predictions.jsonl") == 2);
    const AnyTensor mask = read_tensor(pred / "val_0000.ugt");
    REQUIRE(std::holds_alternative<Tensor<std::uint8_t>>(mask));
    CHECK(std::get<Tensor<std::uint8_t>>(mask).dims() == Shape{64, 64});
    CHECK(slurp(pred / "val_0000.pgm").rfind("P5\n64 64\n255\n", 0) == 0);

    const fs::path ts = dir.path / "ts";
    REQUIRE(invoke({"two-stage", "--checkpoint", (la / "model.ckpt").string(), "--scar-checkpoint",
                    (scar / "model.ckpt").string(), "--data", manifest.string(), "--out", ts.string()})
                .code == 0);
    for (const char* f : {"1_input.pgm", "2_la.pgm", "5_scar.pgm", "la.ugt", "scar.ugt"}) {
      CAPTURE(f);
      CHECK(fs::exists(ts / "val_0000" / f));
    }

    const fs::path ev = dir.path / "ev", ev2 = dir.path / "ev2";
    const std::vector<std::string> args = {"eval", "--checkpoint", (la / "model.ckpt").string(), "--scar-checkpoint",
                                           (scar / "model.ckpt").string(), "--data", manifest.string()};
    auto a1 = args, a2 = args;
    a1.insert(a1.end(), {"--out", ev.string()});
    a2.insert(a2.end(), {"--out", ev2.string()});
    REQUIRE(invoke(a1).code == 0);
    REQUIRE(invoke(a2).code == 0);
    CHECK(slurp(ev / "eval.jsonl") == slurp(ev2 / "eval.jsonl"));
    std::set<std::pair<std::string, std::string>> groups;
    for (const auto& e : read_manifest(manifest)) {
      groups.insert({split_name(e.split), e.style});
      groups.insert({split_name(e.split), "all"});
    }
    std::ifstream in(ev / "eval.jsonl");
    std::size_t rows = 0, all_rows = 0;
    for (std::string line; std::getline(in, line); ++rows) {
      const Json r = Json::parse(line);
      CHECK(r.contains("scar_dice_mean"));
      CHECK(r.at("la_dice_mean").get<double>() >= 0.0);
      all_rows += r.at("style") == "all";
    }
    CHECK(all_rows == 2);  // train and val
    CHECK(rows == groups.size());
  }
  SUBCASE("ablation table") {
    const fs::path ab = dir.path / "ab";
    write_text(dir.path / "ab.json", R"({
      "model": {"base_channels": 4, "num_stages": 2, "num_heads": 2},
      "train": {"epochs": 1, "batch_size": 4, "initial_lr": 0.05},
      "pipeline": {"frame": 64, "la_input": 32, "augment": false}})");
    const auto r = invoke({"ablate", "--data", manifest.string(), "--out", ab.string(), "--config",
                           (dir.path / "ab.json").string(), "--seed", "2"});
    REQUIRE(r.code == 0);
    CHECK(line_count(ab / "ablation.jsonl") == 8);
    std::ifstream in(ab / "ablation.jsonl");
    std::vector<Json> rows;
    for (std::string line; std::getline(in, line);) rows.push_back(Json::parse(line));
    REQUIRE(rows.size() == 8);
    CHECK(rows[0].at("status") == "rejected");
    for (std::size_t k = 1; k < 8; ++k) {
      CAPTURE(k);
      CHECK(rows[k].at("status") == "trained");
      CHECK(rows[k].at("seed") == 2);
      CHECK(rows[k].at("epochs") == 1);
    }
    // The full model appears in both tables with identical results.
    CHECK(rows[3].at("la_dice_mean") == rows[7].at("la_dice_mean"));
    CHECK(rows[3].at("table") == "etb");
    CHECK(rows[7].at("table") == "bridge");
    CHECK(rows[4].at("architecture") == "unet");
  }
}

TEST_CASE("greyscale images") {
  TempDir dir("pgm");
  Tensor<float> img({2, 3});
  img(0, 0) = 1.0f;
  img(1, 2) = 2.0f;  // clamped
  img(0, 1) = 0.5f;
  write_pgm(img, dir.path / "a.pgm");
  const std::string bytes = slurp(dir.path / "a.pgm");
  const std::string header = "P5\n3 2\n255\n";
  REQUIRE(bytes.size() == header.size() + 6);
  CHECK(bytes.substr(0, header.size()) == header);
  CHECK(static_cast<unsigned char>(bytes[header.size() + 0]) == 255);
  CHECK(static_cast<unsigned char>(bytes[header.size() + 1]) == 128);
  CHECK(static_cast<unsigned char>(bytes[header.size() + 5]) == 255);

  Tensor<float> mask({5, 5});
  for (std::size_t r = 1; r < 4; ++r)
    for (std::size_t c = 1; c < 4; ++c) mask(r, c) = 1.0f;
  const auto o = overlay(Tensor<float>({5, 5}), mask);
  CHECK(o(2, 2) == 0.0f);  // interior untouched
  CHECK(o(1, 1) == 1.0f);  // outline
  CHECK(o(0, 0) == 0.0f);
}
