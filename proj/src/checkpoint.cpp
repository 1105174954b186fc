#include "ugformer/checkpoint.hpp"

#include <fstream>
#include <map>
#include <set>

#include "ugformer/data.hpp"

namespace ugformer {

namespace fs = std::filesystem;

namespace {

constexpr char kCheckpointMagic[4] = {'U', 'G', 'C', 'K'};

}  // namespace

void reject_unknown_keys(const Json& j, const std::set<std::string>& known, const std::string& section) {
  if (!j.is_object()) throw Error(ErrorKind::ConfigError, section + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw Error(ErrorKind::ConfigError, "unknown key '" + key + "' in " + section);
  }
}

Json to_json(const ModelConfig& c) {
  Json j;
  j["architecture"] = architecture_name(c.architecture);
  j["in_channels"] = c.in_channels;
  j["base_channels"] = c.base_channels;
  j["num_stages"] = c.num_stages;
  j["num_heads"] = c.num_heads;
  j["use_mhsa"] = c.use_mhsa;
  j["use_dconv"] = c.use_dconv;
  j["use_gcn"] = c.use_gcn;
  j["node_budget"] = c.node_budget;
  j["num_classes"] = c.num_classes;
  j["init_seed"] = c.init_seed;
  return j;
}

Json to_json(const TrainConfig& c) {
  Json j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["initial_lr"] = c.initial_lr;
  j["decay_factor"] = c.decay_factor;
  j["decay_policy"] = decay_policy_name(c.decay_policy);
  j["plateau_patience"] = c.plateau_patience;
  j["momentum"] = c.momentum;
  j["seed"] = c.seed;
  j["lambda_bce"] = c.lambda_bce;
  j["lambda_dice"] = c.lambda_dice;
  j["max_steps"] = c.max_steps;
  j["target_dice"] = c.target_dice;
  return j;
}

ModelConfig model_config_from_json(const Json& j) {
  const std::string s = "model";
  reject_unknown_keys(j, {"architecture", "in_channels", "base_channels", "num_stages", "num_heads", "use_mhsa", "use_dconv",
                     "use_gcn", "node_budget", "num_classes", "init_seed"},
                 s);
  ModelConfig c;
  std::string arch = architecture_name(c.architecture);
  read_config_field(j, "architecture", arch, s);
  try {
    c.architecture = parse_architecture(arch);
  } catch (const Error& e) {
    throw Error(ErrorKind::ConfigError, e.what());
  }
  read_config_field(j, "in_channels", c.in_channels, s);
  read_config_field(j, "base_channels", c.base_channels, s);
  read_config_field(j, "num_stages", c.num_stages, s);
  read_config_field(j, "num_heads", c.num_heads, s);
  read_config_field(j, "use_mhsa", c.use_mhsa, s);
  read_config_field(j, "use_dconv", c.use_dconv, s);
  read_config_field(j, "use_gcn", c.use_gcn, s);
  read_config_field(j, "node_budget", c.node_budget, s);
  read_config_field(j, "num_classes", c.num_classes, s);
  read_config_field(j, "init_seed", c.init_seed, s);
  return c;
}

TrainConfig train_config_from_json(const Json& j) {
  const std::string s = "train";
  reject_unknown_keys(j, {"epochs", "batch_size", "initial_lr", "decay_factor", "decay_policy", "plateau_patience", "momentum",
                     "seed", "lambda_bce", "lambda_dice", "max_steps", "target_dice"},
                 s);
  TrainConfig c;
  read_config_field(j, "epochs", c.epochs, s);
  read_config_field(j, "batch_size", c.batch_size, s);
  read_config_field(j, "initial_lr", c.initial_lr, s);
  read_config_field(j, "decay_factor", c.decay_factor, s);
  std::string policy = decay_policy_name(c.decay_policy);
  read_config_field(j, "decay_policy", policy, s);
  try {
    c.decay_policy = parse_decay_policy(policy);
  } catch (const Error& e) {
    throw Error(ErrorKind::ConfigError, e.what());
  }
  read_config_field(j, "plateau_patience", c.plateau_patience, s);
  read_config_field(j, "momentum", c.momentum, s);
  read_config_field(j, "seed", c.seed, s);
  read_config_field(j, "lambda_bce", c.lambda_bce, s);
  read_config_field(j, "lambda_dice", c.lambda_dice, s);
  read_config_field(j, "max_steps", c.max_steps, s);
  read_config_field(j, "target_dice", c.target_dice, s);
  return c;
}

void save_checkpoint(SegmentationNet<float>& net, const fs::path& path, const Json& extra) {
  Json head;
  head["model"] = to_json(net.config());
  head["extra"] = extra;
  head["params"] = Json::array();
  std::vector<std::uint8_t> payload;
  for (const auto& [name, p] : net.parameters()) {
    head["params"].push_back({{"name", name}, {"dims", p->value.dims()}});
    const auto bytes = encode_tensor(p->value);
    payload.insert(payload.end(), bytes.begin(), bytes.end());
  }
  const std::string text = head.dump();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out.write(kCheckpointMagic, 4);
  const auto n = static_cast<std::uint32_t>(text.size());
  const char len[4] = {static_cast<char>(n & 0xff), static_cast<char>((n >> 8) & 0xff),
                       static_cast<char>((n >> 16) & 0xff), static_cast<char>((n >> 24) & 0xff)};
  out.write(len, 4);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!out) throw Error(ErrorKind::IoError, "short write to " + path.string());
}

namespace {

struct RawCheckpoint {
  Json head;
  std::vector<std::pair<std::string, Tensor<float>>> params;
};

RawCheckpoint read_raw(const fs::path& path, bool with_params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::MissingFile, "cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (bytes.size() < 8) throw Error(ErrorKind::TruncatedFile, path.string() + ": checkpoint header cut short");
  if (!std::equal(kCheckpointMagic, kCheckpointMagic + 4, bytes.begin(),
                  [](char a, std::uint8_t b) { return static_cast<std::uint8_t>(a) == b; })) {
    throw Error(ErrorKind::BadMagic, path.string() + ": not a checkpoint");
  }
  const std::size_t n = bytes[4] | bytes[5] << 8 | bytes[6] << 16 | static_cast<std::size_t>(bytes[7]) << 24;
  if (bytes.size() < 8 + n) throw Error(ErrorKind::TruncatedFile, path.string() + ": checkpoint header cut short");
  RawCheckpoint raw;
  try {
    raw.head = Json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ConfigError, path.string() + ": " + e.what());
  }
  if (!with_params) return raw;
  std::size_t offset = 8 + n;
  for (const auto& entry : raw.head.at("params")) {
    const Shape dims = entry.at("dims").get<Shape>();
    const std::size_t len = 8 + 4 * dims.size() + 4 * shape_volume(dims);
    if (bytes.size() < offset + len) throw Error(ErrorKind::TruncatedFile, path.string() + ": parameter data cut short");
    std::vector<std::uint8_t> record(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                                     bytes.begin() + static_cast<std::ptrdiff_t>(offset + len));
    offset += len;
    AnyTensor t = decode_tensor(record, path.string());
    raw.params.emplace_back(entry.at("name").get<std::string>(), std::get<Tensor<float>>(std::move(t)));
  }
  if (offset != bytes.size()) throw Error(ErrorKind::TruncatedFile, path.string() + ": trailing bytes");
  return raw;
}

}  // namespace

Checkpoint read_checkpoint_header(const fs::path& path) {
  const RawCheckpoint raw = read_raw(path, false);
  Checkpoint c;
  c.model = model_config_from_json(raw.head.at("model"));
  if (raw.head.contains("extra")) c.extra = raw.head["extra"];
  return c;
}

void load_checkpoint(SegmentationNet<float>& net, const fs::path& path) {
  RawCheckpoint raw = read_raw(path, true);
  std::map<std::string, Tensor<float>*> stored;
  for (auto& [name, t] : raw.params) stored[name] = &t;
  const auto params = net.parameters();
  if (params.size() != stored.size()) {
    throw Error(ErrorKind::ConfigError, path.string() + ": parameter inventory differs from the model");
  }
  for (const auto& [name, p] : params) {
    const auto it = stored.find(name);
    if (it == stored.end()) throw Error(ErrorKind::ConfigError, path.string() + ": missing parameter " + name);
    require_shape(*it->second, p->value.dims(), name);
    p->value = *it->second;
  }
}

std::size_t load_matching_parameters(SegmentationNet<float>& net, const fs::path& path) {
  RawCheckpoint raw = read_raw(path, true);
  std::map<std::string, Tensor<float>*> stored;
  for (auto& [name, t] : raw.params) stored[name] = &t;
  std::size_t copied = 0;
  for (const auto& [name, p] : net.parameters()) {
    const auto it = stored.find(name);
    if (it == stored.end() || it->second->dims() != p->value.dims()) continue;
    p->value = *it->second;
    ++copied;
  }
  return copied;
}

}  // namespace ugformer
