// SPDX-License-Identifier: Apache-2.0
//
// Selective state-space scan layers: ZOH discretisation, the O(M^2)
// convolution-kernel oracle, the bidirectional residual block and patch
// embedding.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "edmb/nn.hpp"

namespace edmb {

/// Tokens [B, M, D] laid out row-major over an h x w grid.
template <typename T>
struct TokenSequence {
  Tensor<T> tokens;
  int h = 0;
  int w = 0;

  int length() const { return h * w; }
  Tensor<T> to_spatial() const { return tokens_to_spatial(tokens, h, w); }
  static TokenSequence from_spatial(const Tensor<T>& x) {
    return {spatial_to_tokens(x), x.dim(2), x.dim(3)};
  }
};

template <typename T>
struct Discretized {
  std::vector<T> a_bar;
  std::vector<T> b_bar;
};

/// Diagonal ZOH: a_bar = exp(delta*a), b_bar = (exp(delta*a) - 1)/(delta*a) * delta*b
/// with a Taylor branch for |delta*a| < 1e-4.
template <typename T>
Discretized<T> discretize_zoh(std::span<const T> a_diag, std::span<const T> b, T delta);

/// Token-independent parameters for the kernel-form oracle.
template <typename T>
struct LtiParams {
  Tensor<T> delta;  // [B, M, D], constant along M
  Tensor<T> a;      // [D, N]
  Tensor<T> b;      // [B, M, N], constant along M
  Tensor<T> c;      // [B, M, N], constant along M
};

/// y_t = sum_{k<=t} K_{t-k} x_k with K_j = sum_n c_n a_bar_n^j b_bar_n, evaluated
/// directly. Throws if any parameter varies along the token axis.
template <typename T>
Tensor<T> scan_kernel_oracle(const Tensor<T>& x, const LtiParams<T>& p);

/// Input-dependent projections and decay rates for one scan direction.
template <typename T>
struct SsmBranch {
  Linear<T> delta_proj;  // D -> D, softplus'ed
  Linear<T> b_proj;      // D -> N
  Linear<T> c_proj;      // D -> N
  Tensor<T> a_log;       // [D, N]; A = -exp(a_log)

  SsmBranch() = default;
  SsmBranch(int dim, int state_dim, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& u, bool reverse) const;
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// x + Lin(scan_fwd(LN(x)) + scan_bwd(LN(x))).
template <typename T>
struct VimBlock {
  LayerNorm<T> norm;
  SsmBranch<T> forward_branch;
  SsmBranch<T> backward_branch;
  Linear<T> out_proj;

  VimBlock() = default;
  VimBlock(int dim, int state_dim, Rng& rng);
  TokenSequence<T> operator()(const TokenSequence<T>& x) const;
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
struct PatchEmbedConfig {
  int patch_size = 4;
  int embed_dim = 48;
  int pos_grid = 80;  // reference token grid of the position table
};

/// Linear projection of flattened P x P patches plus a learnable position
/// table, bilinearly resized when the token grid differs from the reference.
template <typename T>
struct PatchEmbed {
  PatchEmbedConfig<T> cfg;
  Linear<T> proj;
  Tensor<T> pos;  // [1, D, G, G]

  PatchEmbed() = default;
  PatchEmbed(const PatchEmbedConfig<T>& cfg, Rng& rng);
  TokenSequence<T> operator()(const Tensor<T>& image) const;
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// 2x2 token merge: LN(4D) then a bias-free 4D -> 2D projection.
template <typename T>
struct PatchMerge {
  LayerNorm<T> norm;
  Linear<T> reduce;

  PatchMerge() = default;
  PatchMerge(int dim, Rng& rng);
  TokenSequence<T> operator()(const TokenSequence<T>& x) const;
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

}  // namespace edmb
