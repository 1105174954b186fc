#include "ugformer/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

namespace ugformer {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Styles

std::string phantom_style_name(PhantomStyle s) {
  switch (s) {
    case PhantomStyle::HighContrast: return "high_contrast";
    case PhantomStyle::LowContrast: return "low_contrast";
    case PhantomStyle::HighRes: return "high_res";
    case PhantomStyle::LowRes: return "low_res";
  }
  return "?";
}

PhantomStyle parse_phantom_style(const std::string& name) {
  for (PhantomStyle s : all_phantom_styles())
    if (phantom_style_name(s) == name) return s;
  throw Error(ErrorKind::ConfigError, "unknown phantom style '" + name + "'");
}

std::vector<PhantomStyle> all_phantom_styles() {
  return {PhantomStyle::HighContrast, PhantomStyle::LowContrast, PhantomStyle::HighRes, PhantomStyle::LowRes};
}

std::vector<PhantomStyle> parse_phantom_styles(const std::string& list) {
  std::vector<PhantomStyle> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_phantom_style(item));
  }
  if (out.empty()) throw Error(ErrorKind::ConfigError, "empty style list");
  return out;
}

// ---------------------------------------------------------------------------
// Geometry

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

// Half extents of the rotated ellipse's axis-aligned bounding box.
std::pair<double, double> ellipse_extent(const PhantomSpec& s) {
  const double c = std::cos(s.rotation_deg * kDeg), n = std::sin(s.rotation_deg * kDeg);
  return {std::sqrt(s.semi_a * s.semi_a * c * c + s.semi_b * s.semi_b * n * n),
          std::sqrt(s.semi_a * s.semi_a * n * n + s.semi_b * s.semi_b * c * c)};
}

// Canvas point -> ellipse frame (u along semi_a).
std::pair<double, double> to_ellipse_frame(const PhantomSpec& s, double x, double y) {
  const double c = std::cos(s.rotation_deg * kDeg), n = std::sin(s.rotation_deg * kDeg);
  const double dx = x - s.center_x, dy = y - s.center_y;
  return {c * dx + n * dy, -n * dx + c * dy};
}

// Robust bisection for the distance from (y0, y1), y0, y1 >= 0, to the ellipse with
// semi-axes e0 >= e1 (D. Eberly, "Distance from a Point to an Ellipse").
double get_root(double r0, double z0, double z1, double g) {
  const double n0 = r0 * z0;
  double s0 = z1 - 1;
  double s1 = g < 0 ? 0 : std::hypot(n0, z1) - 1;
  double s = 0;
  for (int i = 0; i < 1100; ++i) {
    s = (s0 + s1) / 2;
    if (s == s0 || s == s1) break;
    const double ratio0 = n0 / (s + r0), ratio1 = z1 / (s + 1);
    g = ratio0 * ratio0 + ratio1 * ratio1 - 1;
    if (g > 0) s0 = s;
    else if (g < 0) s1 = s;
    else break;
  }
  return s;
}

double distance_point_ellipse(double e0, double e1, double y0, double y1) {
  if (y1 > 0) {
    if (y0 > 0) {
      const double z0 = y0 / e0, z1 = y1 / e1;
      const double g = z0 * z0 + z1 * z1 - 1;
      if (g == 0) return 0;
      const double r0 = (e0 / e1) * (e0 / e1);
      const double sbar = get_root(r0, z0, z1, g);
      const double x0 = r0 * y0 / (sbar + r0), x1 = y1 / (sbar + 1);
      return std::hypot(x0 - y0, x1 - y1);
    }
    return std::abs(y1 - e1);
  }
  const double numer0 = e0 * y0, denom0 = e0 * e0 - e1 * e1;
  if (numer0 < denom0) {
    const double xde0 = numer0 / denom0;
    const double x0 = e0 * xde0, x1 = e1 * std::sqrt(1 - xde0 * xde0);
    return std::hypot(x0 - y0, x1);
  }
  return std::abs(y0 - e0);
}

bool inside_ellipse(const PhantomSpec& s, double u, double v) {
  return (u / s.semi_a) * (u / s.semi_a) + (v / s.semi_b) * (v / s.semi_b) <= 1.0;
}

bool in_scar(const PhantomSpec& s, double x, double y) {
  const auto [u, v] = to_ellipse_frame(s, x, y);
  if (!inside_ellipse(s, u, v)) return false;
  double phi = std::atan2(v / s.semi_b, u / s.semi_a) / kDeg;
  if (phi < 0) phi += 360;
  double dist = -1;
  for (const ScarArc& arc : s.arcs) {
    const double rel = std::fmod(phi - arc.start_deg + 720.0, 360.0);
    if (rel > arc.span_deg) continue;
    if (dist < 0) dist = ellipse_boundary_distance(s, x, y);
    if (dist <= arc.thickness) return true;
  }
  return false;
}

struct Background {
  double base = 0.25;
  double amp[2]{}, dir[2]{}, wavelength[2]{}, phase[2]{};

  double operator()(double x, double y) const {
    double v = base;
    for (int k = 0; k < 2; ++k) {
      const double t = (x * std::cos(dir[k]) + y * std::sin(dir[k])) / wavelength[k];
      v += amp[k] * std::sin(2 * std::numbers::pi * t + phase[k]);
    }
    return v;
  }
};

Background draw_background(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Background bg;
  bg.base = 0.22 + 0.06 * u01(rng);
  for (int k = 0; k < 2; ++k) {
    bg.amp[k] = 0.02 + 0.03 * u01(rng);
    bg.dir[k] = std::numbers::pi * u01(rng);
    bg.wavelength[k] = 80 + 120 * u01(rng);
    bg.phase[k] = 2 * std::numbers::pi * u01(rng);
  }
  return bg;
}

double render_scale(PhantomStyle s) {
  switch (s) {
    case PhantomStyle::HighRes: return 2.0;
    case PhantomStyle::LowRes: return 0.5;
    default: return 1.0;
  }
}

}  // namespace

double ellipse_boundary_distance(const PhantomSpec& spec, double x, double y) {
  auto [u, v] = to_ellipse_frame(spec, x, y);
  double e0 = spec.semi_a, e1 = spec.semi_b;
  if (e0 < e1) {
    std::swap(e0, e1);
    std::swap(u, v);
  }
  return distance_point_ellipse(e0, e1, std::abs(u), std::abs(v));
}

void PhantomSpec::validate() const {
  auto bad = [](const std::string& why) { throw Error(ErrorKind::SpecOutOfBounds, why); };
  if (canvas < 32) bad("canvas must be at least 32 pixels");
  if (!(semi_a > 0) || !(semi_b > 0)) bad("ellipse semi-axes must be positive");
  const auto [ex, ey] = ellipse_extent(*this);
  const double c = static_cast<double>(canvas) - 1;
  if (center_x - ex < kPhantomMargin || center_x + ex > c - kPhantomMargin || center_y - ey < kPhantomMargin ||
      center_y + ey > c - kPhantomMargin) {
    bad("ellipse is closer than 10 px to the canvas edge");
  }
  if (arcs.empty() || arcs.size() > 3) bad("scar arc count must be 1-3");
  for (const ScarArc& a : arcs) {
    if (a.thickness < 2 || a.thickness > 4) bad("scar rim thickness must be 2-4 px");
    if (!(a.span_deg > 0) || a.span_deg > 360) bad("scar arc span must be in (0, 360]");
  }
  auto unit = [](double v) { return v >= 0 && v <= 1; };
  if (!unit(la_intensity) || !unit(scar_intensity)) bad("intensities must be in [0, 1]");
  if (!(noise_sigma >= 0) || noise_sigma > 0.5) bad("noise sigma must be in [0, 0.5]");
}

PhantomSpec random_phantom_spec(std::uint64_t seed, PhantomStyle style, std::size_t canvas) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  PhantomSpec s;
  s.seed = seed;
  s.canvas = canvas;
  s.style = style;
  const double scale = static_cast<double>(canvas) / 224.0;
  s.semi_a = uniform(22, 40) * scale;
  s.semi_b = s.semi_a * uniform(0.6, 1.0);
  s.rotation_deg = uniform(0, 180);
  const auto [ex, ey] = ellipse_extent(s);
  const double c = static_cast<double>(canvas) - 1;
  auto place = [&](double extent) {
    const double lo = std::max(kPhantomMargin + extent, 0.3 * c), hi = std::min(c - kPhantomMargin - extent, 0.7 * c);
    return lo < hi ? uniform(lo, hi) : c / 2;
  };
  s.center_x = place(ex);
  s.center_y = place(ey);
  const int count = 1 + static_cast<int>(rng() % 3);
  for (int k = 0; k < count; ++k) s.arcs.push_back({uniform(0, 360), uniform(40, 100), uniform(2, 4)});
  s.la_intensity = uniform(0.5, 0.7);
  s.scar_intensity = uniform(0.9, 1.0);
  s.noise_sigma = uniform(0.02, 0.04);
  s.validate();
  return s;
}

Sample generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const std::size_t n = spec.canvas;
  // Intensity randomness is shared by all styles of a seed; styles differ only in rendering.
  std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  const Background bg = draw_background(rng);

  Tensor<float> la({n, n}), scar({n, n});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const double x = static_cast<double>(c), y = static_cast<double>(r);
      const auto [u, v] = to_ellipse_frame(spec, x, y);
      la(r, c) = inside_ellipse(spec, u, v) ? 1.0f : 0.0f;
      scar(r, c) = in_scar(spec, x, y) ? 1.0f : 0.0f;
    }
  }

  const double scale = render_scale(spec.style);
  const auto side = static_cast<std::size_t>(std::lround(static_cast<double>(n) * scale));
  Tensor<float> rendered({side, side});
  for (std::size_t i = 0; i < side; ++i) {
    for (std::size_t j = 0; j < side; ++j) {
      const double x = (static_cast<double>(j) + 0.5) / scale - 0.5;
      const double y = (static_cast<double>(i) + 0.5) / scale - 0.5;
      double value = bg(x, y);
      const auto [u, v] = to_ellipse_frame(spec, x, y);
      if (inside_ellipse(spec, u, v)) value = in_scar(spec, x, y) ? spec.scar_intensity : spec.la_intensity;
      rendered(i, j) = static_cast<float>(value);
    }
  }
  Tensor<float> image = resize_bilinear(rendered, n, n);

  double sigma = spec.noise_sigma;
  if (spec.style == PhantomStyle::LowContrast) {
    for (float& v : image.values()) v = static_cast<float>(0.3 + 0.45 * std::pow(std::max(0.0f, v), 0.8));
    sigma *= 1.5;
  }
  std::normal_distribution<double> noise(0.0, 1.0);
  for (float& v : image.values()) v = std::clamp(static_cast<float>(v + sigma * noise(rng)), 0.0f, 1.0f);

  Sample s;
  s.image = image.reshaped({1, n, n});
  s.la_mask = std::move(la);
  s.scar_mask = std::move(scar);
  s.meta.seed = spec.seed;
  s.meta.style = phantom_style_name(spec.style);
  s.meta.orig_width = side;
  s.meta.orig_height = side;
  return s;
}

// ---------------------------------------------------------------------------
// UGT1

namespace {

constexpr std::uint8_t kMagic[4] = {0x55, 0x47, 0x54, 0x31};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::vector<std::uint8_t> header(UgtDtype dtype, const Shape& dims) {
  if (dims.size() > 255) throw Error(ErrorKind::ShapeMismatch, "rank exceeds 255");
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(static_cast<std::uint8_t>(dtype));
  out.push_back(static_cast<std::uint8_t>(dims.size()));
  out.push_back(0);
  out.push_back(0);
  for (std::size_t d : dims) {
    if (d > 0xffffffffULL) throw Error(ErrorKind::ShapeMismatch, "dimension exceeds 32 bits");
    put_u32(out, static_cast<std::uint32_t>(d));
  }
  return out;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::MissingFile, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::vector<std::uint8_t>& bytes, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::IoError, "short write to " + path.string());
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor<float>& t) {
  auto out = header(UgtDtype::Real32, t.dims());
  out.reserve(out.size() + 4 * t.size());
  for (float v : t.values()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
  }
  return out;
}

std::vector<std::uint8_t> encode_tensor(const Tensor<std::uint8_t>& t) {
  auto out = header(UgtDtype::UInt8, t.dims());
  out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

AnyTensor decode_tensor(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() < 4) throw Error(ErrorKind::TruncatedFile, origin + ": shorter than the magic");
  if (!std::equal(kMagic, kMagic + 4, bytes.begin())) throw Error(ErrorKind::BadMagic, origin + ": not a UGT1 file");
  if (bytes.size() < 8) throw Error(ErrorKind::TruncatedFile, origin + ": header cut short");
  const std::uint8_t dtype = bytes[4];
  const std::size_t rank = bytes[5];
  if (dtype > 1) throw Error(ErrorKind::UnknownDtype, origin + ": dtype byte " + std::to_string(dtype));
  if (bytes.size() < 8 + 4 * rank) throw Error(ErrorKind::TruncatedFile, origin + ": dims cut short");
  Shape dims(rank);
  for (std::size_t k = 0; k < rank; ++k) dims[k] = get_u32(&bytes[8 + 4 * k]);
  const std::size_t count = shape_volume(dims);
  const std::size_t width = dtype == 0 ? 4 : 1;
  const std::size_t offset = 8 + 4 * rank;
  if (bytes.size() - offset < count * width) throw Error(ErrorKind::TruncatedFile, origin + ": payload cut short");
  if (bytes.size() - offset > count * width) throw Error(ErrorKind::TruncatedFile, origin + ": trailing bytes");
  if (dtype == 0) {
    std::vector<float> data(count);
    for (std::size_t i = 0; i < count; ++i) {
      const std::uint32_t bits = get_u32(&bytes[offset + 4 * i]);
      std::memcpy(&data[i], &bits, 4);
    }
    return Tensor<float>(dims, std::move(data));
  }
  return Tensor<std::uint8_t>(dims, std::vector<std::uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end()));
}

void write_tensor(const Tensor<float>& t, const fs::path& path) { write_bytes(encode_tensor(t), path); }
void write_tensor(const Tensor<std::uint8_t>& t, const fs::path& path) { write_bytes(encode_tensor(t), path); }

AnyTensor read_tensor(const fs::path& path) { return decode_tensor(read_bytes(path), path.string()); }

Tensor<float> read_tensor_f32(const fs::path& path) {
  AnyTensor t = read_tensor(path);
  if (auto* f = std::get_if<Tensor<float>>(&t)) return std::move(*f);
  return std::get<Tensor<std::uint8_t>>(t).cast<float>();
}

void write_mask(const Tensor<float>& mask, const fs::path& path) {
  Tensor<std::uint8_t> m(mask.dims());
  for (std::size_t i = 0; i < mask.size(); ++i) m[i] = mask[i] != 0.0f ? 1 : 0;
  write_tensor(m, path);
}

// ---------------------------------------------------------------------------
// Manifests

std::string split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw Error(ErrorKind::BadSplit, "unknown split '" + name + "'");
}

std::vector<Sample>& DatasetSplits::of(Split s) {
  return s == Split::Train ? train : s == Split::Val ? val : test;
}
const std::vector<Sample>& DatasetSplits::of(Split s) const {
  return s == Split::Train ? train : s == Split::Val ? val : test;
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::MissingFile, "cannot open manifest " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::ConfigError, where + ": " + e.what());
    }
    try {
      ManifestEntry e;
      e.image = j.at("image").get<std::string>();
      e.la = j.at("la").get<std::string>();
      if (j.contains("scar") && !j["scar"].is_null()) e.scar = j["scar"].get<std::string>();
      e.split = parse_split(j.at("split").get<std::string>());
      e.style = j.value("style", "");
      e.seed = j.value("seed", std::uint64_t{0});
      entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::ConfigError, where + ": " + e.what());
    }
  }
  return entries;
}

void write_manifest(const std::vector<ManifestEntry>& entries, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  for (const ManifestEntry& e : entries) {
    nlohmann::ordered_json j;
    j["image"] = e.image;
    j["la"] = e.la;
    j["scar"] = e.scar.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(e.scar);
    j["split"] = split_name(e.split);
    j["style"] = e.style;
    j["seed"] = e.seed;
    out << j.dump() << '\n';
  }
}

DatasetSplits load_dataset(const fs::path& manifest) {
  const auto entries = read_manifest(manifest);
  const fs::path base = manifest.parent_path();
  std::map<std::string, Split> seen;
  DatasetSplits out;
  for (const ManifestEntry& e : entries) {
    const auto [it, fresh] = seen.emplace(e.image, e.split);
    if (!fresh) {
      throw Error(ErrorKind::BadSplit, "image " + e.image + " listed in both '" + split_name(it->second) + "' and '" +
                                           split_name(e.split) + "'");
    }
  }
  auto resolve = [&](const std::string& rel) {
    const fs::path p = base / rel;
    if (!fs::exists(p)) throw Error(ErrorKind::MissingFile, "missing file " + p.string());
    return p;
  };
  for (const ManifestEntry& e : entries) {
    Sample s;
    Tensor<float> img = read_tensor_f32(resolve(e.image));
    if (img.rank() == 2) img = img.reshaped({1, img.dim(0), img.dim(1)});
    if (img.rank() != 3 || img.dim(0) != 1) throw Error(ErrorKind::ShapeMismatch, e.image + ": expected [1,H,W] image");
    const Shape plane{img.dim(1), img.dim(2)};
    s.image = std::move(img);
    s.la_mask = read_tensor_f32(resolve(e.la));
    require_shape(*s.la_mask, plane, e.la);
    if (!e.scar.empty()) {
      s.scar_mask = read_tensor_f32(resolve(e.scar));
      require_shape(*s.scar_mask, plane, e.scar);
    }
    s.meta.seed = e.seed;
    s.meta.style = e.style;
    s.meta.orig_height = plane[0];
    s.meta.orig_width = plane[1];
    out.of(e.split).push_back(std::move(s));
  }
  return out;
}

std::vector<Split> default_splits(std::size_t count) {
  const std::size_t val = count / 10;
  std::vector<Split> out(count, Split::Train);
  std::fill(out.end() - static_cast<std::ptrdiff_t>(val), out.end(), Split::Val);
  return out;
}

std::vector<ManifestEntry> write_phantom_dataset(const std::vector<PhantomSpec>& specs, const std::vector<Split>& splits,
                                                 const fs::path& dir) {
  if (splits.size() != specs.size()) throw Error(ErrorKind::ConfigError, "one split per phantom is required");
  std::vector<ManifestEntry> entries;
  for (std::size_t k = 0; k < specs.size(); ++k) {
    const PhantomSpec& spec = specs[k];
    const Sample s = generate_phantom(spec);
    char stem[96];
    std::snprintf(stem, sizeof stem, "%04zu_%s_%llu", k, phantom_style_name(spec.style).c_str(),
                  static_cast<unsigned long long>(spec.seed));
    ManifestEntry e;
    e.image = std::string("images/") + stem + ".ugt";
    e.la = std::string("la/") + stem + ".ugt";
    e.scar = std::string("scar/") + stem + ".ugt";
    e.split = splits[k];
    e.style = phantom_style_name(spec.style);
    e.seed = spec.seed;
    write_tensor(s.image, dir / e.image);
    write_mask(*s.la_mask, dir / e.la);
    write_mask(*s.scar_mask, dir / e.scar);
    entries.push_back(std::move(e));
  }
  write_manifest(entries, dir / "manifest.jsonl");
  return entries;
}

}  // namespace ugformer
