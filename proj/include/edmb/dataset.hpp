// SPDX-License-Identifier: Apache-2.0
//
// Samples, augmentation and label selection.

#pragma once

#include <string>
#include <vector>

#include "edmb/image_io.hpp"
#include "edmb/rng.hpp"

namespace edmb {

/// Label pixels: 1 edge, 0 background, kIgnore excluded from the loss.
inline constexpr float kIgnore = -1.0f;

struct DatasetSample {
  Image image;                // 3 channels
  std::vector<Image> labels;  // 1 channel each, values {0, 1, kIgnore}
  std::string id;
};

/// root/images/<id>.(ppm|png) with root/labels/<id>.pgm or
/// root/labels/<id>/<k>.pgm (all maps in the directory, sorted by name).
/// Labels are binarised at 128/255.
std::vector<DatasetSample> load_dataset(const std::string& root, const std::string& list_file);

/// Label maps for one id: <dir>/<id>.pgm|.png, or every .pgm/.png in
/// <dir>/<id>/ (one per annotator, sorted by name). Binarised at 128/255.
std::vector<Image> load_label_set(const std::string& dir, const std::string& id);

std::vector<std::string> read_list_file(const std::string& path);

enum class AugmentRecipe { none, bsds, nyud, biped };

AugmentRecipe parse_augment_recipe(const std::string& s);
std::string to_string(AugmentRecipe r);

/// One geometric/photometric variant.
struct AugmentDraw {
  bool hflip = false;
  bool vflip = false;
  double angle_deg = 0.0;  // counter-clockwise
  double scale = 1.0;
  double gamma = 1.0;

  bool identity() const { return !hflip && !vflip && angle_deg == 0.0 && scale == 1.0 && gamma == 1.0; }
};

/// Uniform draw from the recipe's variant product.
AugmentDraw draw_augmentation(AugmentRecipe recipe, Rng& rng);

/// Applies the draw to the image and every label map. Labels are
/// re-binarised at 0.5 after interpolation; pixels rotated in from outside
/// the frame become kIgnore.
DatasetSample apply_augmentation(const DatasetSample& s, const AugmentDraw& d);

DatasetSample augment(const DatasetSample& s, AugmentRecipe recipe, Rng& rng);

/// Single-plane geometric ops used by augmentation (exposed for tests).
Image flip_horizontal(const Image& img);
Image flip_vertical(const Image& img);
/// Rotation about the image centre; out-of-frame pixels take `fill`.
Image rotate(const Image& img, double angle_deg, float fill);
Image resize_image(const Image& img, int out_h, int out_w);
Image apply_label_transform(const Image& label, const AugmentDraw& d);

enum class LabelMode { random, mixed };

LabelMode parse_label_mode(const std::string& s);

struct SelectedLabel {
  Image y;     // {0, 1}
  Image mask;  // 1 counted, 0 ignored
};

/// random: one annotator uniformly; mixed: per-pixel mean over annotators,
/// >= threshold -> 1, == 0 -> 0, otherwise ignored. kIgnore pixels of any
/// map are ignored in both modes.
SelectedLabel select_label(const std::vector<Image>& labels, LabelMode mode, Rng& rng, double threshold = 0.5);

/// Pads bottom/right to (out_h, out_w) by mirror reflection (any amount).
Image reflect_pad(const Image& img, int out_h, int out_w);
/// Pads bottom/right with a constant.
Image constant_pad(const Image& img, int out_h, int out_w, float value);

int round_up(int v, int unit);

}  // namespace edmb
