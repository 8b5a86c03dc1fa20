// SPDX-License-Identifier: Apache-2.0
//
// Edge maps from a trained model at one or several granularities.

#pragma once

#include <string>
#include <vector>

#include "edmb/image_io.hpp"
#include "edmb/model.hpp"

namespace edmb {

struct GranularityConfig {
  std::vector<double> gammas;
  bool sigma_form = false;  // shift by gamma * sigma instead of gamma * sigma^2

  /// gamma = n/2 - 5, n = 0..10.
  static GranularityConfig defaults();
  /// "start:step:count", e.g. "-5:0.5:11".
  static GranularityConfig parse(const std::string& text);
};

/// Image tensor [1, 3, H, W] from a planar image (grey images are
/// replicated to three channels).
template <typename T>
Tensor<T> image_tensor(const Image& img);

/// mu and var at the input resolution. Inputs are reflection-padded to the
/// model's size unit and the outputs cropped back.
template <typename T>
EdgeDistribution<T> predict_distribution(EdmbModel<T>& model, const Tensor<T>& image);

/// sigmoid(mu + gamma * var) (or gamma * sqrt(var) in sigma form).
template <typename T>
Tensor<T> sample_granularity(const EdgeDistribution<T>& dist, double gamma, bool sigma_form = false);

/// Writes <out_dir>/<id>_g<gamma>.pgm for every gamma; returns the paths.
template <typename T>
std::vector<std::string> granularity_sweep(const EdgeDistribution<T>& dist, const GranularityConfig& cfg,
                                           const std::string& out_dir, const std::string& id);

/// Filename fragment for a gamma value, e.g. -4.5 -> "-4.5", 0 -> "0".
std::string gamma_label(double gamma);

/// First image of a [B,1,H,W] map as a 1-channel image.
template <typename T>
Image map_to_image(const Tensor<T>& map, int index = 0);

}  // namespace edmb
