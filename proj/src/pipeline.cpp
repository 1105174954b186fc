#include "ugformer/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ugformer/kernels.hpp"

namespace ugformer {

namespace {

void require_plane(const Tensor<float>& t, const char* what) {
  if (t.rank() != 2) throw Error(ErrorKind::ShapeMismatch, std::string(what) + " expects [H,W], got " + shape_string(t.dims()));
}

float bilinear_clamped(const Tensor<float>& img, double row, double col) {
  const std::size_t h = img.dim(0), w = img.dim(1);
  row = std::clamp(row, 0.0, static_cast<double>(h - 1));
  col = std::clamp(col, 0.0, static_cast<double>(w - 1));
  const auto r0 = static_cast<std::size_t>(std::floor(row));
  const auto c0 = static_cast<std::size_t>(std::floor(col));
  const std::size_t r1 = std::min(r0 + 1, h - 1), c1 = std::min(c0 + 1, w - 1);
  const double fr = row - static_cast<double>(r0), fc = col - static_cast<double>(c0);
  const double top = (1 - fc) * img(r0, c0) + fc * img(r0, c1);
  const double bot = (1 - fc) * img(r1, c0) + fc * img(r1, c1);
  return static_cast<float>((1 - fr) * top + fr * bot);
}

}  // namespace

// ---------------------------------------------------------------------------
// Preprocessing

MarginCrop crop_black_margins(const Tensor<float>& img) {
  require_plane(img, "crop_black_margins");
  img.require_finite("image");
  const std::size_t h = img.dim(0), w = img.dim(1);
  const float peak = *std::max_element(img.values().begin(), img.values().end());
  if (!(peak > 0.0f)) throw Error(ErrorKind::AllBlackImage, "image has no positive intensity");
  const float threshold = kBlackMarginFraction * peak;
  auto row_bright = [&](std::size_t r) {
    for (std::size_t c = 0; c < w; ++c)
      if (img(r, c) > threshold) return true;
    return false;
  };
  auto col_bright = [&](std::size_t c) {
    for (std::size_t r = 0; r < h; ++r)
      if (img(r, c) > threshold) return true;
    return false;
  };
  std::size_t top = 0, bottom = h - 1, left = 0, right = w - 1;
  while (!row_bright(top)) ++top;
  while (!row_bright(bottom)) --bottom;
  while (!col_bright(left)) ++left;
  while (!col_bright(right)) --right;
  return {crop_rect(img, top, left, bottom - top + 1, right - left + 1), top, left};
}

Tensor<float> crop_rect(const Tensor<float>& img, std::size_t row0, std::size_t col0, std::size_t h, std::size_t w) {
  require_plane(img, "crop");
  if (row0 + h > img.dim(0) || col0 + w > img.dim(1)) {
    throw Error(ErrorKind::RoiOutOfBounds, "crop exceeds image " + shape_string(img.dims()));
  }
  Tensor<float> out({h, w});
  for (std::size_t r = 0; r < h; ++r)
    std::copy_n(img.data() + (row0 + r) * img.dim(1) + col0, w, out.data() + r * w);
  return out;
}

Tensor<float> resize_bilinear(const Tensor<float>& img, std::size_t out_h, std::size_t out_w) {
  require_plane(img, "resize_bilinear");
  if (out_h == 0 || out_w == 0) throw Error(ErrorKind::ZeroTargetSize, "resize target must be positive");
  const std::size_t h = img.dim(0), w = img.dim(1);
  if (h == out_h && w == out_w) return img;
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  Tensor<float> out({out_h, out_w});
  for (std::size_t r = 0; r < out_h; ++r)
    for (std::size_t c = 0; c < out_w; ++c)
      out(r, c) = bilinear_clamped(img, (static_cast<double>(r) + 0.5) * sy - 0.5, (static_cast<double>(c) + 0.5) * sx - 0.5);
  return out;
}

Tensor<float> resize_nearest(const Tensor<float>& mask, std::size_t out_h, std::size_t out_w) {
  require_plane(mask, "resize_nearest");
  if (out_h == 0 || out_w == 0) throw Error(ErrorKind::ZeroTargetSize, "resize target must be positive");
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  Tensor<float> out({out_h, out_w});
  for (std::size_t r = 0; r < out_h; ++r) {
    const auto sr = std::min(h - 1, static_cast<std::size_t>((static_cast<double>(r) + 0.5) * h / out_h));
    for (std::size_t c = 0; c < out_w; ++c) {
      const auto sc = std::min(w - 1, static_cast<std::size_t>((static_cast<double>(c) + 0.5) * w / out_w));
      out(r, c) = mask(sr, sc);
    }
  }
  return out;
}

Tensor<float> minmax_normalize(const Tensor<float>& img) {
  img.require_finite("image");
  const auto [lo, hi] = std::minmax_element(img.values().begin(), img.values().end());
  const float mn = *lo, mx = *hi;
  Tensor<float> out(img.dims());
  if (!(mx > mn)) return out;
  const float range = mx - mn;
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = std::clamp((img[i] - mn) / range, 0.0f, 1.0f);
  return out;
}

Tensor<float> image_plane(const Sample& s) {
  return s.image.reshaped({s.image.dim(s.image.rank() - 2), s.image.dim(s.image.rank() - 1)});
}

Sample preprocess_sample(const Sample& s, std::size_t size) {
  const MarginCrop crop = crop_black_margins(image_plane(s));
  const std::size_t h = crop.image.dim(0), w = crop.image.dim(1);
  Sample out;
  out.meta = s.meta;
  out.image = minmax_normalize(resize_bilinear(crop.image, size, size)).reshaped({1, size, size});
  auto mask = [&](const std::optional<Tensor<float>>& m) -> std::optional<Tensor<float>> {
    if (!m) return std::nullopt;
    return resize_nearest(crop_rect(*m, crop.row_offset, crop.col_offset, h, w), size, size);
  };
  out.la_mask = mask(s.la_mask);
  out.scar_mask = mask(s.scar_mask);
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

int max_translation(std::size_t width) {
  // Largest integer strictly below 0.1 * width.
  return static_cast<int>(std::ceil(0.1 * static_cast<double>(width))) - 1;
}

AugmentParams draw_augmentation(std::mt19937_64& rng, std::size_t width) {
  std::uniform_real_distribution<double> angle(0.0, 180.0);
  const int m = std::max(0, max_translation(width));
  std::uniform_int_distribution<int> shift(-m, m);
  AugmentParams p;
  p.angle_deg = angle(rng);
  p.dx = shift(rng);
  p.dy = shift(rng);
  return p;
}

Tensor<float> rotate_translate(const Tensor<float>& img, const AugmentParams& p, Interp interp) {
  require_plane(img, "rotate_translate");
  const std::size_t h = img.dim(0), w = img.dim(1);
  if (p.angle_deg == 0.0 && p.dx == 0 && p.dy == 0) return img;
  const double theta = p.angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
  Tensor<float> out({h, w});
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      // Undo translation, then rotation (image y axis points down).
      const double u = static_cast<double>(c) - p.dx - cx;
      const double v = static_cast<double>(r) - p.dy - cy;
      const double sc = cs * u - sn * v + cx;
      const double sr = sn * u + cs * v + cy;
      if (interp == Interp::Nearest) {
        const double rr = std::round(sr), cc = std::round(sc);
        if (rr >= 0 && cc >= 0 && rr < static_cast<double>(h) && cc < static_cast<double>(w)) {
          out(r, c) = img(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc));
        }
      } else {
        out(r, c) = bilinear_zero_pad(img.data(), h, w, static_cast<float>(sr), static_cast<float>(sc));
      }
    }
  }
  return out;
}

Sample apply_augmentation(const Sample& s, const AugmentParams& p) {
  Sample out;
  out.meta = s.meta;
  out.image = rotate_translate(image_plane(s), p, Interp::Bilinear).reshaped(s.image.dims());
  if (s.la_mask) out.la_mask = rotate_translate(*s.la_mask, p, Interp::Nearest);
  if (s.scar_mask) out.scar_mask = rotate_translate(*s.scar_mask, p, Interp::Nearest);
  return out;
}

std::vector<Sample> augment_sample(const Sample& s, std::mt19937_64& rng) {
  std::vector<Sample> out;
  out.reserve(kAugmentationsPerSample);
  const std::size_t width = s.image.dim(s.image.rank() - 1);
  for (std::size_t k = 0; k < kAugmentationsPerSample; ++k) out.push_back(apply_augmentation(s, draw_augmentation(rng, width)));
  return out;
}

// ---------------------------------------------------------------------------
// Region of interest

Roi compute_roi(const Tensor<float>& la_mask, std::size_t tolerance) {
  require_plane(la_mask, "compute_roi");
  const std::size_t h = la_mask.dim(0), w = la_mask.dim(1);
  std::size_t x0 = w, y0 = h, x1 = 0, y1 = 0;
  bool any = false;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      if (la_mask(r, c) != 0.0f) {
        any = true;
        x0 = std::min(x0, c);
        x1 = std::max(x1, c);
        y0 = std::min(y0, r);
        y1 = std::max(y1, r);
      }
  if (!any) throw Error(ErrorKind::EmptyMask, "LA mask has no foreground pixel");
  Roi roi;
  roi.tolerance = tolerance;
  roi.orig_h = h;
  roi.orig_w = w;
  roi.x_min = x0 > tolerance ? x0 - tolerance : 0;
  roi.y_min = y0 > tolerance ? y0 - tolerance : 0;
  roi.x_max = std::min(x1 + tolerance, w - 1);
  roi.y_max = std::min(y1 + tolerance, h - 1);
  return roi;
}

Tensor<float> crop_to_roi(const Tensor<float>& img, const Roi& roi) {
  require_plane(img, "crop_to_roi");
  if (roi.x_min > roi.x_max || roi.y_min > roi.y_max || roi.x_max >= img.dim(1) || roi.y_max >= img.dim(0)) {
    throw Error(ErrorKind::RoiOutOfBounds, "roi does not fit image " + shape_string(img.dims()));
  }
  return crop_rect(img, roi.y_min, roi.x_min, roi.height(), roi.width());
}

Tensor<float> restore_zero_pad(const Tensor<float>& patch, const Roi& roi) {
  require_plane(patch, "restore_zero_pad");
  if (patch.dim(0) != roi.height() || patch.dim(1) != roi.width()) {
    throw Error(ErrorKind::PatchRoiMismatch, "patch " + shape_string(patch.dims()) + " vs roi " +
                                                 std::to_string(roi.height()) + "x" + std::to_string(roi.width()));
  }
  if (roi.y_max >= roi.orig_h || roi.x_max >= roi.orig_w) {
    throw Error(ErrorKind::RoiOutOfBounds, "roi exceeds its original frame");
  }
  Tensor<float> out({roi.orig_h, roi.orig_w});
  for (std::size_t r = 0; r < roi.height(); ++r)
    std::copy_n(patch.data() + r * roi.width(), roi.width(), out.data() + (roi.y_min + r) * roi.orig_w + roi.x_min);
  return out;
}

// ---------------------------------------------------------------------------
// Two-stage prediction

Tensor<float> threshold_mask(const Tensor<float>& prob, float threshold) {
  Tensor<float> m(prob.dims());
  for (std::size_t i = 0; i < prob.size(); ++i) m[i] = prob[i] > threshold ? 1.0f : 0.0f;
  return m;
}

namespace {

std::vector<Tensor<float>> frame_probabilities(const std::vector<Tensor<float>>& images, SegmentationNet<float>& model,
                                               std::size_t input_side) {
  std::vector<Tensor<float>> resized;
  resized.reserve(images.size());
  for (const auto& img : images) resized.push_back(resize_bilinear(img, input_side, input_side));
  auto probs = predict_probabilities(model, resized);
  for (std::size_t k = 0; k < images.size(); ++k) probs[k] = resize_bilinear(probs[k], images[k].dim(0), images[k].dim(1));
  return probs;
}

}  // namespace

std::vector<Tensor<float>> predict_la_masks(const std::vector<Tensor<float>>& images, SegmentationNet<float>& la_model,
                                            const TwoStageOptions& opts) {
  auto probs = frame_probabilities(images, la_model, opts.la_input);
  for (auto& p : probs) p = threshold_mask(p, opts.threshold);
  return probs;
}

std::vector<TwoStageResult> two_stage_predict_batch(const std::vector<Tensor<float>>& images,
                                                    SegmentationNet<float>& la_model,
                                                    SegmentationNet<float>& scar_model,
                                                    const TwoStageOptions& opts) {
  for (const auto& img : images) require_plane(img, "two_stage_predict");
  std::vector<TwoStageResult> results(images.size());
  const auto la_probs = frame_probabilities(images, la_model, opts.la_input);

  std::vector<std::size_t> with_roi;
  std::vector<Tensor<float>> patches;
  for (std::size_t k = 0; k < images.size(); ++k) {
    TwoStageResult& res = results[k];
    res.la_prob = la_probs[k];
    res.la_mask = threshold_mask(la_probs[k], opts.threshold);
    res.scar_mask = Tensor<float>(images[k].dims());
    if (std::none_of(res.la_mask.values().begin(), res.la_mask.values().end(), [](float v) { return v != 0.0f; })) {
      res.empty_la = true;
      continue;
    }
    res.roi = compute_roi(res.la_mask, opts.tolerance);
    res.patch = resize_bilinear(crop_to_roi(images[k], *res.roi), opts.scar_input, opts.scar_input);
    with_roi.push_back(k);
    patches.push_back(res.patch);
  }
  if (!patches.empty()) {
    const auto scar_probs = predict_probabilities(scar_model, patches);
    for (std::size_t i = 0; i < with_roi.size(); ++i) {
      TwoStageResult& res = results[with_roi[i]];
      const Roi& roi = *res.roi;
      const Tensor<float> back = resize_bilinear(scar_probs[i], roi.height(), roi.width());
      res.scar_mask = restore_zero_pad(threshold_mask(back, opts.threshold), roi);
    }
  }
  return results;
}

TwoStageResult two_stage_predict(const Tensor<float>& image, SegmentationNet<float>& la_model,
                                 SegmentationNet<float>& scar_model, const TwoStageOptions& opts) {
  return std::move(two_stage_predict_batch({image}, la_model, scar_model, opts).front());
}

std::vector<TrainingExample> la_examples(const std::vector<Sample>& samples, std::size_t size) {
  std::vector<TrainingExample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    if (!s.la_mask) throw Error(ErrorKind::MissingFile, "sample without LA mask (seed " + std::to_string(s.meta.seed) + ")");
    out.push_back({resize_bilinear(image_plane(s), size, size).reshaped({1, size, size}),
                   resize_nearest(*s.la_mask, size, size)});
  }
  return out;
}

std::vector<TrainingExample> scar_examples(const std::vector<Sample>& samples,
                                           const std::vector<Tensor<float>>* la_masks,
                                           const TwoStageOptions& opts) {
  std::vector<TrainingExample> out;
  out.reserve(samples.size());
  const std::size_t side = opts.scar_input;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const Sample& s = samples[k];
    if (!s.scar_mask || !s.la_mask) {
      throw Error(ErrorKind::MissingFile, "sample without LA/scar masks (seed " + std::to_string(s.meta.seed) + ")");
    }
    const Tensor<float>* la = &*s.la_mask;
    if (la_masks) {
      const Tensor<float>& pred = (*la_masks)[k];
      if (std::any_of(pred.values().begin(), pred.values().end(), [](float v) { return v != 0.0f; })) la = &pred;
    }
    const Roi roi = compute_roi(*la, opts.tolerance);
    out.push_back({resize_bilinear(crop_to_roi(image_plane(s), roi), side, side).reshaped({1, side, side}),
                   resize_nearest(crop_to_roi(*s.scar_mask, roi), side, side)});
  }
  return out;
}

}  // namespace ugformer
