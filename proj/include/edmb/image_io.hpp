// SPDX-License-Identifier: Apache-2.0
//
// Planar float images and the Netpbm / PNG codecs.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace edmb {

/// Channel-major planes with values nominally in [0, 1].
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}
  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
};

/// Reads binary PPM (P6), PGM (P5) or, when built with libpng, PNG. 16-bit
/// Netpbm samples are supported. Throws with the path on any failure.
Image read_image(const std::string& path);

/// 8-bit P5 (1 channel) or P6 (3 channels); values clamped to [0,1] and
/// rounded to the nearest of 256 levels.
void write_netpbm(const std::string& path, const Image& img);

bool png_supported();
void write_png(const std::string& path, const Image& img);

std::uint8_t quantize_unit(float v);

}  // namespace edmb
