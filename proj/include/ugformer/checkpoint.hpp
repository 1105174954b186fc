#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ugformer/error.hpp"
#include "ugformer/network.hpp"
#include "ugformer/training.hpp"

namespace ugformer {

using Json = nlohmann::ordered_json;

// ConfigError when `j` is not an object or has a key outside `known`.
void reject_unknown_keys(const Json& j, const std::set<std::string>& known, const std::string& section);

// Reads j[key] into `out` when present; type mismatches raise ConfigError.
template <typename V>
void read_config_field(const Json& j, const char* key, V& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ConfigError, section + "." + key + ": " + e.what());
  }
}

// Config <-> JSON. Parsing rejects unknown keys (ConfigError) and fills missing ones
// with defaults.
Json to_json(const ModelConfig& c);
Json to_json(const TrainConfig& c);
ModelConfig model_config_from_json(const Json& j);
TrainConfig train_config_from_json(const Json& j);

// Checkpoint file: "UGCK", u32 little-endian header length, JSON header
// {model, extra, params: [{name, dims}]}, then one UGT1 real32 record per parameter.
struct Checkpoint {
  ModelConfig model;
  Json extra = Json::object();
};

void save_checkpoint(SegmentationNet<float>& net, const std::filesystem::path& path, const Json& extra = Json::object());
Checkpoint read_checkpoint_header(const std::filesystem::path& path);
// Restores every parameter; the network must have the checkpoint's configuration.
void load_checkpoint(SegmentationNet<float>& net, const std::filesystem::path& path);
// Copies parameters whose name and shape match (pre-training transfer); returns how many.
std::size_t load_matching_parameters(SegmentationNet<float>& net, const std::filesystem::path& path);

}  // namespace ugformer
