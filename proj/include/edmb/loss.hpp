// SPDX-License-Identifier: Apache-2.0
//
// Training objectives over [B,1,H,W] maps: KL to the standard normal,
// class-balanced cross-entropy, reparameterised sampling and their
// compositions.

#pragma once

#include "edmb/decoder.hpp"
#include "edmb/model.hpp"
#include "edmb/rng.hpp"

namespace edmb {

enum class Reduction { sum, mean };

struct LossConfig {
  double lambda = 1.1;
  double varphi = 1.0;
  double alpha2 = 0.4;
  double alpha1 = 1.0;  // only for a joint single-stage objective; unused by default
  double eps = 1e-6;
  bool literal_weights = false;
  Reduction reduction = Reduction::sum;

  void validate() const;
};

/// 0.5 * sum(mu^2 + var - log(var) - 1), var clamped below at eps. `mask`
/// (same shape, 1 = counted) may be undefined.
template <typename T>
Tensor<T> kl_loss(const Tensor<T>& mu, const Tensor<T>& var, const LossConfig& cfg,
                  const Tensor<T>& mask = {});

/// Weighted cross-entropy. y holds {0,1}; mask is 1 on counted pixels and 0
/// on ignored ones. Weights are computed per image over counted pixels.
/// When nothing is counted the result is 0 and `*empty` (if given) is set.
template <typename T>
Tensor<T> wce_loss(const Tensor<T>& p, const Tensor<T>& y, const Tensor<T>& mask, const LossConfig& cfg,
                   bool* empty = nullptr);

/// mu + eps * sqrt(var) with eps ~ N(0, 1) drawn from rng.
template <typename T>
Tensor<T> sample_logits(const Tensor<T>& mu, const Tensor<T>& var, Rng& rng);

/// sigmoid(sample_logits(mu, var)).
template <typename T>
Tensor<T> sample_reparam(const Tensor<T>& mu, const Tensor<T>& var, Rng& rng);

/// wce(p) + varphi * kl(mu, var).
template <typename T>
Tensor<T> elbo_loss(const Tensor<T>& p, const Tensor<T>& y, const Tensor<T>& mask, const Tensor<T>& mu,
                    const Tensor<T>& var, const LossConfig& cfg);

/// Stage 1: wce(aux_p). Stage 2: elbo on a sample of N(mu, var) plus
/// alpha2 * elbo on an independent sample of N(aux_mu, aux_var).
template <typename T>
Tensor<T> stage_losses(const EdgeDistribution<T>& out, const Tensor<T>& y, const Tensor<T>& mask,
                       const LossConfig& cfg, Stage stage, Rng& rng);

}  // namespace edmb
