// SPDX-License-Identifier: Apache-2.0

#include "edmb/loss.hpp"

#include <cmath>
#include <limits>

namespace edmb {

void LossConfig::validate() const {
  if (!(lambda > 0)) throw Error("loss: lambda must be positive");
  if (!(varphi >= 0)) throw Error("loss: varphi must be non-negative");
  if (!(alpha2 >= 0)) throw Error("loss: alpha2 must be non-negative");
  if (!(eps > 0 && eps <= 1e-3)) throw Error("loss: eps must lie in (0, 1e-3]");
}

namespace {

template <typename T>
Tensor<T> reduce(const Tensor<T>& terms, const LossConfig& cfg, double count) {
  Tensor<T> s = sum(terms);
  if (cfg.reduction == Reduction::mean && count > 0) return mul_const(s, static_cast<T>(1.0 / count));
  return s;
}

}  // namespace

template <typename T>
Tensor<T> kl_loss(const Tensor<T>& mu, const Tensor<T>& var, const LossConfig& cfg, const Tensor<T>& mask) {
  if (mu.shape() != var.shape()) {
    throw Error("kl_loss: mean " + shape_str(mu.shape()) + " and variance " + shape_str(var.shape()) + " differ");
  }
  const T eps = static_cast<T>(cfg.eps);
  Tensor<T> vc = clamp(var, eps, std::numeric_limits<T>::max());
  for (std::size_t i = 0; i < vc.numel(); ++i) {
    if (!(vc[i] > T(0))) throw Error("kl_loss: non-positive variance at index " + std::to_string(i));
  }
  Tensor<T> terms = add_const(sub(add(mul(mu, mu), vc), log(vc, eps)), T(-1));
  double count = static_cast<double>(mu.numel());
  if (mask.defined()) {
    if (mask.shape() != mu.shape()) throw Error("kl_loss: mask shape mismatch");
    terms = mul(terms, mask);
    count = 0;
    for (T m : mask.vec()) count += static_cast<double>(m);
  }
  return mul_const(reduce(terms, cfg, count), T(0.5));
}

template <typename T>
Tensor<T> wce_loss(const Tensor<T>& p, const Tensor<T>& y, const Tensor<T>& mask, const LossConfig& cfg,
                   bool* empty) {
  if (p.shape() != y.shape() || p.shape() != mask.shape()) {
    throw Error("wce_loss: prediction " + shape_str(p.shape()) + ", label " + shape_str(y.shape()) +
                " and mask " + shape_str(mask.shape()) + " must share a shape");
  }
  const int B = p.dim(0);
  const std::size_t per = p.numel() / static_cast<std::size_t>(B);
  Tensor<T> wpos(p.shape()), wneg(p.shape());
  double counted_total = 0;
  for (int b = 0; b < B; ++b) {
    double npos = 0, nneg = 0;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      if (mask[i] == T(0)) continue;
      if (y[i] > T(0.5)) npos += 1; else nneg += 1;
    }
    const double n = npos + nneg;
    counted_total += n;
    if (n == 0) continue;
    double w_on_pos, w_on_neg;
    if (cfg.literal_weights) {
      w_on_pos = npos / n;
      w_on_neg = cfg.lambda * nneg / n;
    } else {
      w_on_pos = nneg / n;
      w_on_neg = cfg.lambda * npos / n;
    }
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      if (mask[i] == T(0)) continue;
      if (y[i] > T(0.5)) wpos[i] = static_cast<T>(w_on_pos); else wneg[i] = static_cast<T>(w_on_neg);
    }
  }
  if (empty) *empty = counted_total == 0;
  if (counted_total == 0) return Tensor<T>::scalar(T(0));
  const T eps = static_cast<T>(cfg.eps);
  Tensor<T> pc = clamp(p, eps, T(1) - eps);
  Tensor<T> log_p = log(pc, eps);
  Tensor<T> log_q = log(add_const(neg(pc), T(1)), eps);
  Tensor<T> terms = neg(add(mul(wpos, log_p), mul(wneg, log_q)));
  return reduce(terms, cfg, counted_total);
}

template <typename T>
Tensor<T> sample_logits(const Tensor<T>& mu, const Tensor<T>& var, Rng& rng) {
  if (mu.shape() != var.shape()) throw Error("sample_reparam: mean/variance shape mismatch");
  Tensor<T> noise = rng.normal_tensor<T>(mu.shape());
  return add(mu, mul(noise, sqrt(var)));
}

template <typename T>
Tensor<T> sample_reparam(const Tensor<T>& mu, const Tensor<T>& var, Rng& rng) {
  return sigmoid(sample_logits(mu, var, rng));
}

template <typename T>
Tensor<T> elbo_loss(const Tensor<T>& p, const Tensor<T>& y, const Tensor<T>& mask, const Tensor<T>& mu,
                    const Tensor<T>& var, const LossConfig& cfg) {
  Tensor<T> data = wce_loss(p, y, mask, cfg);
  if (cfg.varphi == 0) return data;
  return add(data, mul_const(kl_loss(mu, var, cfg), static_cast<T>(cfg.varphi)));
}

template <typename T>
Tensor<T> stage_losses(const EdgeDistribution<T>& out, const Tensor<T>& y, const Tensor<T>& mask,
                       const LossConfig& cfg, Stage stage, Rng& rng) {
  if (stage == Stage::global) {
    if (!out.aux_p.defined()) throw Error("stage_losses: global stage needs aux_p");
    return wce_loss(out.aux_p, y, mask, cfg);
  }
  if (!out.mu.defined() || !out.var.defined() || !out.aux_mu.defined() || !out.aux_var.defined()) {
    throw Error("stage_losses: fine stage needs mu, var, aux_mu and aux_var");
  }
  Tensor<T> main = elbo_loss(sample_reparam(out.mu, out.var, rng), y, mask, out.mu, out.var, cfg);
  if (cfg.alpha2 == 0) return main;
  Tensor<T> aux = elbo_loss(sample_reparam(out.aux_mu, out.aux_var, rng), y, mask, out.aux_mu, out.aux_var, cfg);
  return add(main, mul_const(aux, static_cast<T>(cfg.alpha2)));
}

#define EDMB_INSTANTIATE_LOSS(T)                                                                     \
  template Tensor<T> kl_loss<T>(const Tensor<T>&, const Tensor<T>&, const LossConfig&, const Tensor<T>&); \
  template Tensor<T> wce_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const LossConfig&, \
                                 bool*);                                                             \
  template Tensor<T> sample_logits<T>(const Tensor<T>&, const Tensor<T>&, Rng&);                     \
  template Tensor<T> sample_reparam<T>(const Tensor<T>&, const Tensor<T>&, Rng&);                    \
  template Tensor<T> elbo_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                  const Tensor<T>&, const LossConfig&);                              \
  template Tensor<T> stage_losses<T>(const EdgeDistribution<T>&, const Tensor<T>&, const Tensor<T>&, \
                                     const LossConfig&, Stage, Rng&);

EDMB_INSTANTIATE_LOSS(float)
EDMB_INSTANTIATE_LOSS(double)

}  // namespace edmb
