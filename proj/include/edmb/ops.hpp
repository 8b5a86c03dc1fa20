// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations over Tensor<T>. Every op validates its shapes,
// computes the forward value eagerly and, when grad mode is on, records a
// closure that accumulates input gradients.

#pragma once

#include <vector>

#include "edmb/tensor.hpp"

namespace edmb {

enum class Pointwise { relu, sigmoid, softplus, exp, log, neg, add_const, mul_const };

/// Elementwise map. `c` is the constant for add_const / mul_const and the
/// lower clamp for log (values below it are raised to it first).
template <typename T>
Tensor<T> pointwise(const Tensor<T>& x, Pointwise kind, T c = T(0));

template <typename T> Tensor<T> relu(const Tensor<T>& x) { return pointwise(x, Pointwise::relu); }
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x) { return pointwise(x, Pointwise::sigmoid); }
template <typename T> Tensor<T> softplus(const Tensor<T>& x) { return pointwise(x, Pointwise::softplus); }
template <typename T> Tensor<T> exp(const Tensor<T>& x) { return pointwise(x, Pointwise::exp); }
template <typename T> Tensor<T> neg(const Tensor<T>& x) { return pointwise(x, Pointwise::neg); }
template <typename T> Tensor<T> log(const Tensor<T>& x, T clamp_min) {
  return pointwise(x, Pointwise::log, clamp_min);
}
template <typename T> Tensor<T> add_const(const Tensor<T>& x, T c) {
  return pointwise(x, Pointwise::add_const, c);
}
template <typename T> Tensor<T> mul_const(const Tensor<T>& x, T c) {
  return pointwise(x, Pointwise::mul_const, c);
}

/// Scalar helpers that share the op's numerics.
template <typename T> T sigmoid_value(T x);
template <typename T> T softplus_value(T x);

/// sqrt with a zero subgradient at 0 so a degenerate variance stays finite.
template <typename T>
Tensor<T> sqrt(const Tensor<T>& x);

/// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

/// x[B, ...] + y[...], y broadcast over the leading dimension.
template <typename T>
Tensor<T> add_broadcast_leading(const Tensor<T>& x, const Tensor<T>& y);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Cross-correlation of x[B,C,H,W] with w[Co,C/groups,kh,kw]; bias may be
/// undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 int padding, int groups = 1);

/// x[..., in] * w[out, in]^T + b over the last dimension; bias may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

/// Normalisation over the last dimension.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

/// Per-channel batch normalisation of x[B,C,H,W]. In training mode batch
/// statistics are used and the running buffers are updated in place.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                       T momentum = T(0.1), T eps = T(1e-5));

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, int groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5));

/// Integer-factor bilinear upsampling (align-corners=false).
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int factor);

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w);

template <typename T>
Tensor<T> max_pool2x2(const Tensor<T>& x);

/// Channel concatenation of NCHW tensors sharing B, H, W.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);

/// Spatial window [y0, y0+h) x [x0, x0+w) of x[B,C,H,W].
template <typename T>
Tensor<T> crop2d(const Tensor<T>& x, int y0, int x0, int h, int w);

/// Inverse of the four-quadrant split: tl, tr, bl, br share one shape.
template <typename T>
Tensor<T> assemble_quadrants(const Tensor<T>& tl, const Tensor<T>& tr, const Tensor<T>& bl,
                             const Tensor<T>& br);

/// [B, h*w, D] -> [B, D, h, w]
template <typename T>
Tensor<T> tokens_to_spatial(const Tensor<T>& x, int h, int w);

/// [B, D, h, w] -> [B, h*w, D]
template <typename T>
Tensor<T> spatial_to_tokens(const Tensor<T>& x);

/// Non-overlapping PxP patches of x[B,C,H,W] flattened channel-major into
/// [B, (H/P)*(W/P), C*P*P], row-major over the patch grid.
template <typename T>
Tensor<T> patchify(const Tensor<T>& x, int patch);

/// 2x2 token merge on an h x w grid: [B, h*w, D] -> [B, (h/2)*(w/2), 4D].
template <typename T>
Tensor<T> merge_patches(const Tensor<T>& x, int h, int w);

/// Reverses the token axis of [B, M, D].
template <typename T>
Tensor<T> reverse_tokens(const Tensor<T>& x);

/// Fused selective scan; see kernels::selective_scan_forward for layouts.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& a,
                         const Tensor<T>& b, const Tensor<T>& c, bool reverse);

}  // namespace edmb
