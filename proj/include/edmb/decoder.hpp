// SPDX-License-Identifier: Apache-2.0
//
// Learnable-Gaussian decoder: cascaded fusion of multi-scale features,
// spatial feature transform modulation and the per-pixel heads.

#pragma once

#include <vector>

#include "edmb/encoders.hpp"

namespace edmb {

struct DecoderConfig {
  int width = 32;        // fused feature channels
  int head_width = 16;
  int head_depth = 2;    // Conv-Norm-ReLU modules before the final 1x1 conv
  int sft_hidden = 16;
  NormKind norm = NormKind::batch;
};

/// Inverted bottleneck: 1x1 expand (x2) -> 3x3 depthwise -> 1x1 project, with
/// a residual connection when input and output widths agree.
template <typename T>
struct MBConv {
  Conv2d<T> expand, depthwise, project;
  Norm2d<T> n1, n2, n3;
  bool residual = false;

  MBConv() = default;
  MBConv(int in, int out, NormKind norm, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// Coarse-to-fine fusion chain over levels with strictly decreasing strides
/// ending at 1.
template <typename T>
struct CascadedFusion {
  std::vector<int> strides;
  std::vector<MBConv<T>> blocks;

  CascadedFusion() = default;
  /// `channels[i]` and `strides[i]` describe level i, coarse first.
  CascadedFusion(const std::vector<int>& channels, const std::vector<int>& strides, int width,
                 NormKind norm, Rng& rng);
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
Tensor<T> cff_fuse(CascadedFusion<T>& cff, const Pyramid<T>& levels, bool training);

/// out = s(guide) * content + t(guide), each branch 1x1 conv -> ReLU -> 1x1 conv.
template <typename T>
struct SpatialFeatureTransform {
  Conv2d<T> scale1, scale2, shift1, shift2;

  SpatialFeatureTransform() = default;
  SpatialFeatureTransform(int content_ch, int guide_ch, int hidden, Rng& rng);
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
Tensor<T> sft_modulate(const SpatialFeatureTransform<T>& sft, const Tensor<T>& content,
                       const Tensor<T>& guide);

/// Conv3x3-Norm-ReLU stack followed by a 1-channel 1x1 conv (raw logits).
template <typename T>
struct Head {
  std::vector<Conv2d<T>> convs;
  std::vector<Norm2d<T>> norms;
  Conv2d<T> out;

  Head() = default;
  Head(int in, const DecoderConfig& cfg, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// Per-pixel Gaussian over edge logits plus the auxiliary outputs; maps are
/// [B, 1, H, W]. Fields not computed in a given mode stay undefined.
template <typename T>
struct EdgeDistribution {
  Tensor<T> mu, var;
  Tensor<T> aux_p, aux_mu, aux_var;
};

template <typename T>
struct LgdDecoder {
  DecoderConfig cfg;
  CascadedFusion<T> cff_global, cff_mean, cff_var;
  SpatialFeatureTransform<T> sft_mean, sft_var;
  Head<T> mean_head, var_head, edge_head, aux_mean_head, aux_var_head;

  LgdDecoder() = default;
  LgdDecoder(const EncoderConfig& enc, const DecoderConfig& cfg, Rng& rng);
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// Fused high-resolution global features F_hg.
template <typename T>
Tensor<T> fuse_global(LgdDecoder<T>& dec, const Pyramid<T>& fg, const Pyramid<T>& fh, bool training);

/// Edge head on F_hg: sigmoid probabilities.
template <typename T>
Tensor<T> edge_probability(LgdDecoder<T>& dec, const Tensor<T>& hg, bool training);

/// Mean/variance branches from the fine pyramid, given F_hg.
template <typename T>
EdgeDistribution<T> decode_fine(LgdDecoder<T>& dec, const Pyramid<T>& ff, const Pyramid<T>& fh,
                                const Tensor<T>& hg, bool with_aux, bool training);

/// Full decoder pass.
template <typename T>
EdgeDistribution<T> decode_lgd(LgdDecoder<T>& dec, const Pyramid<T>& fg, const Pyramid<T>& ff,
                               const Pyramid<T>& fh, bool training);

}  // namespace edmb
