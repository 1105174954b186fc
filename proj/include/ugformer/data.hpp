#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "ugformer/pipeline.hpp"
#include "ugformer/tensor.hpp"

namespace ugformer {

// ---------------------------------------------------------------------------
// Phantoms

enum class PhantomStyle { HighContrast, LowContrast, HighRes, LowRes };

std::string phantom_style_name(PhantomStyle s);
PhantomStyle parse_phantom_style(const std::string& name);
std::vector<PhantomStyle> all_phantom_styles();
// Comma-separated style list, e.g. "high_contrast,high_res".
std::vector<PhantomStyle> parse_phantom_styles(const std::string& list);

struct ScarArc {
  double start_deg = 0;  // ellipse parametric angle
  double span_deg = 60;
  double thickness = 3;  // pixels, measured inward from the boundary
};

struct PhantomSpec {
  std::uint64_t seed = 0;
  std::size_t canvas = 224;
  PhantomStyle style = PhantomStyle::HighContrast;
  // LA ellipse in canvas pixel coordinates (x = column, y = row).
  double center_x = 112, center_y = 112;
  double semi_a = 30, semi_b = 22;
  double rotation_deg = 0;
  std::vector<ScarArc> arcs;
  double la_intensity = 0.6;
  double scar_intensity = 0.95;
  double noise_sigma = 0.03;

  void validate() const;
};

inline constexpr double kPhantomMargin = 10.0;
inline constexpr double kScarBand = 5.0;

// Geometry drawn deterministically from (seed, canvas); the style only changes rendering.
PhantomSpec random_phantom_spec(std::uint64_t seed, PhantomStyle style, std::size_t canvas = 224);

Sample generate_phantom(const PhantomSpec& spec);

// Euclidean distance from (x, y) to the boundary of the spec's ellipse.
double ellipse_boundary_distance(const PhantomSpec& spec, double x, double y);

// ---------------------------------------------------------------------------
// UGT1 tensor files

enum class UgtDtype : std::uint8_t { Real32 = 0, UInt8 = 1 };

using AnyTensor = std::variant<Tensor<float>, Tensor<std::uint8_t>>;

std::vector<std::uint8_t> encode_tensor(const Tensor<float>& t);
std::vector<std::uint8_t> encode_tensor(const Tensor<std::uint8_t>& t);
AnyTensor decode_tensor(const std::vector<std::uint8_t>& bytes, const std::string& origin = "buffer");

void write_tensor(const Tensor<float>& t, const std::filesystem::path& path);
void write_tensor(const Tensor<std::uint8_t>& t, const std::filesystem::path& path);
AnyTensor read_tensor(const std::filesystem::path& path);
// Reads either dtype and widens to float.
Tensor<float> read_tensor_f32(const std::filesystem::path& path);

// Binary {0,1} mask stored as uint8.
void write_mask(const Tensor<float>& mask, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Manifests

enum class Split { Train, Val, Test };

std::string split_name(Split s);
Split parse_split(const std::string& name);

struct ManifestEntry {
  std::string image;
  std::string la;
  std::string scar;  // empty when absent
  Split split = Split::Train;
  std::string style;
  std::uint64_t seed = 0;
};

struct DatasetSplits {
  std::vector<Sample> train, val, test;
  std::vector<Sample>& of(Split s);
  const std::vector<Sample>& of(Split s) const;
};

// One JSON object per line; paths are relative to the manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);
DatasetSplits load_dataset(const std::filesystem::path& manifest);

// Default synthetic split: one tenth (rounded down) for validation, the rest for training.
std::vector<Split> default_splits(std::size_t count);

// Writes images and masks for each spec under dir and a manifest.jsonl; returns the entries.
std::vector<ManifestEntry> write_phantom_dataset(const std::vector<PhantomSpec>& specs,
                                                 const std::vector<Split>& splits,
                                                 const std::filesystem::path& dir);

}  // namespace ugformer
