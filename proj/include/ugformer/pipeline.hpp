#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ugformer/network.hpp"
#include "ugformer/tensor.hpp"
#include "ugformer/training.hpp"

namespace ugformer {

struct SampleMeta {
  std::uint64_t seed = 0;
  std::string style;
  std::size_t orig_width = 0;
  std::size_t orig_height = 0;
};

struct Sample {
  Tensor<float> image;                    // [1, H, W], values in [0, 1]
  std::optional<Tensor<float>> la_mask;   // [H, W], {0, 1}
  std::optional<Tensor<float>> scar_mask; // [H, W], {0, 1}
  SampleMeta meta;
};

// Inclusive pixel rectangle; x is the column axis and y the row axis.
struct Roi {
  std::size_t x_min = 0, y_min = 0, x_max = 0, y_max = 0;
  std::size_t tolerance = 30;
  std::size_t orig_h = 0, orig_w = 0;

  std::size_t width() const { return x_max - x_min + 1; }
  std::size_t height() const { return y_max - y_min + 1; }
  bool contains(std::size_t row, std::size_t col) const {
    return row >= y_min && row <= y_max && col >= x_min && col <= x_max;
  }
  friend bool operator==(const Roi&, const Roi&) = default;
};

// ---------------------------------------------------------------------------
// Preprocessing

struct MarginCrop {
  Tensor<float> image;
  std::size_t row_offset = 0;
  std::size_t col_offset = 0;
};

inline constexpr float kBlackMarginFraction = 0.02f;

// Drops leading/trailing rows and columns whose maximum is <= 2% of the global maximum.
MarginCrop crop_black_margins(const Tensor<float>& img);

// Rectangle [row0, row0+h) x [col0, col0+w) of a 2-D tensor.
Tensor<float> crop_rect(const Tensor<float>& img, std::size_t row0, std::size_t col0, std::size_t h, std::size_t w);

// Half-pixel-centred bilinear resize (source = (t + 0.5) * scale - 0.5, clamped).
Tensor<float> resize_bilinear(const Tensor<float>& img, std::size_t out_h, std::size_t out_w);
// Nearest-neighbour resize for label maps.
Tensor<float> resize_nearest(const Tensor<float>& mask, std::size_t out_h, std::size_t out_w);

// (x - min) / (max - min); constant images become all zeros.
Tensor<float> minmax_normalize(const Tensor<float>& img);

// Margin crop (masks co-cropped), resize to size x size, min-max normalize.
Sample preprocess_sample(const Sample& s, std::size_t size);

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentParams {
  double angle_deg = 0;  // counter-clockwise about the image centre
  int dx = 0;            // columns
  int dy = 0;            // rows
};

inline constexpr std::size_t kAugmentationsPerSample = 4;

// Angle uniform in [0, 180] degrees; integer shifts with |shift| < 0.1 * width.
AugmentParams draw_augmentation(std::mt19937_64& rng, std::size_t width);
int max_translation(std::size_t width);

enum class Interp { Bilinear, Nearest };

// Rotation about the centre followed by translation, inverse-mapped with zero fill.
Tensor<float> rotate_translate(const Tensor<float>& img, const AugmentParams& p, Interp interp);

Sample apply_augmentation(const Sample& s, const AugmentParams& p);
std::vector<Sample> augment_sample(const Sample& s, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Region of interest

inline constexpr std::size_t kRoiTolerance = 30;

// Bounding box of nonzero pixels grown by `tolerance` on every side and clamped to the image.
Roi compute_roi(const Tensor<float>& la_mask, std::size_t tolerance = kRoiTolerance);
Tensor<float> crop_to_roi(const Tensor<float>& img, const Roi& roi);
Tensor<float> restore_zero_pad(const Tensor<float>& patch, const Roi& roi);

// ---------------------------------------------------------------------------
// Two-stage prediction

struct TwoStageOptions {
  float threshold = 0.5f;
  std::size_t tolerance = kRoiTolerance;
  std::size_t la_input = 64;    // LA model input side
  std::size_t scar_input = 96;  // scar model input side
};

struct TwoStageResult {
  Tensor<float> la_mask;    // frame size
  Tensor<float> scar_mask;  // frame size
  Tensor<float> la_prob;    // frame size
  std::optional<Roi> roi;
  Tensor<float> patch;      // scar model input, when an ROI exists
  bool empty_la = false;
};

// LA model on the whole frame, ROI from its thresholded output, scar model on the
// ROI patch resized to scar_input, probabilities resized back to the ROI,
// thresholded and zero-padded to the frame.
TwoStageResult two_stage_predict(const Tensor<float>& image, SegmentationNet<float>& la_model,
                                 SegmentationNet<float>& scar_model, const TwoStageOptions& opts = {});

// Batched form; results are in input order.
std::vector<TwoStageResult> two_stage_predict_batch(const std::vector<Tensor<float>>& images,
                                                    SegmentationNet<float>& la_model,
                                                    SegmentationNet<float>& scar_model,
                                                    const TwoStageOptions& opts = {});

// Threshold LA-model output for frame-sized images.
std::vector<Tensor<float>> predict_la_masks(const std::vector<Tensor<float>>& images, SegmentationNet<float>& la_model,
                                            const TwoStageOptions& opts = {});

// LA-task examples: image resized to `size`, target la_mask.
std::vector<TrainingExample> la_examples(const std::vector<Sample>& samples, std::size_t size);

// Scar-task examples: ROI patches (from the given LA masks, or the ground-truth LA
// mask when none is given) resized to opts.scar_input with their scar targets.
std::vector<TrainingExample> scar_examples(const std::vector<Sample>& samples,
                                           const std::vector<Tensor<float>>* la_masks,
                                           const TwoStageOptions& opts = {});

Tensor<float> image_plane(const Sample& s);
Tensor<float> threshold_mask(const Tensor<float>& prob, float threshold);

}  // namespace ugformer
