// SPDX-License-Identifier: Apache-2.0
//
// Global and windowed Mamba encoders (strides 4/8/16) and the small
// full-resolution CNN encoder (strides 1/2).

#pragma once

#include <array>
#include <vector>

#include "edmb/ssm.hpp"

namespace edmb {

struct EncoderConfig {
  int embed_dim = 48;
  std::array<int, 3> depths{2, 2, 2};
  int state_dim = 16;
  int patch_size = 4;
  int pos_grid = 80;
  int keep_count = 1;  // windows that track gradients per training step
};

/// One multi-scale feature map per level.
template <typename T>
struct FeatureLevel {
  Tensor<T> map;  // [B, C, H/stride, W/stride]
  int stride = 1;
};

template <typename T>
using Pyramid = std::vector<FeatureLevel<T>>;

template <typename T>
struct MambaEncoder {
  EncoderConfig cfg;
  PatchEmbed<T> embed;
  std::vector<PatchMerge<T>> merges;            // before stages 2 and 3
  std::vector<std::vector<VimBlock<T>>> stages;

  MambaEncoder() = default;
  MambaEncoder(const EncoderConfig& cfg, Rng& rng);
  /// Levels at strides 4, 8, 16 with widths D, 2D, 4D.
  Pyramid<T> operator()(const Tensor<T>& image) const;
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
Pyramid<T> encode_global(const MambaEncoder<T>& enc, const Tensor<T>& image);

/// Quadrants in order top-left, top-right, bottom-left, bottom-right.
template <typename T>
std::array<Tensor<T>, 4> window_split(const Tensor<T>& image);

template <typename T>
Tensor<T> window_reassemble(const std::array<Tensor<T>, 4>& windows);

/// Encodes the four quadrants with the shared encoder and tiles each level
/// back into full-image maps. In training, `keep_count` random windows are
/// recorded on the graph; the rest run without gradient tracking.
template <typename T>
Pyramid<T> encode_fine(const MambaEncoder<T>& enc, const Tensor<T>& image, bool training, Rng& rng);

template <typename T>
struct HighResEncoder {
  Conv2d<T> conv1;  // 3 -> 16, stride 1
  Conv2d<T> conv2;  // 16 -> 32, after 2x2 max-pool

  HighResEncoder() = default;
  explicit HighResEncoder(Rng& rng);
  /// Levels at strides 1 (16 ch) and 2 (32 ch).
  Pyramid<T> operator()(const Tensor<T>& image) const;
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
Pyramid<T> encode_highres(const HighResEncoder<T>& enc, const Tensor<T>& image);

}  // namespace edmb
