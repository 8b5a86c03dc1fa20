// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <limits>
#include <numbers>

#include "edmb/gradcheck.hpp"
#include "edmb/loss.hpp"

namespace edmb {
namespace {

using TD = Tensor<double>;

TD grid(std::initializer_list<double> v) {
  const int n = static_cast<int>(v.size());
  const int side = static_cast<int>(std::lround(std::sqrt(n)));
  return TD({1, 1, side, n / side}, std::vector<double>(v));
}

// KL(N(mu, var) || N(0, 1)) by adaptive quadrature of q log(q/p).
double kl_quadrature(double mu, double var) {
  const double sd = std::sqrt(var);
  auto integrand = [&](double x) {
    const double lq = -0.5 * (x - mu) * (x - mu) / var - 0.5 * std::log(2 * std::numbers::pi * var);
    const double lp = -0.5 * x * x - 0.5 * std::log(2 * std::numbers::pi);
    return std::exp(lq) * (lq - lp);
  };
  using boost::math::quadrature::gauss_kronrod;
  return gauss_kronrod<double, 61>::integrate(integrand, mu - 40 * sd, mu + 40 * sd, 15, 1e-14);
}

TEST(Kl, StandardNormalIsZero) {
  LossConfig cfg;
  TD mu({1, 1, 3, 3}, 0.0), var({1, 1, 3, 3}, 1.0);
  EXPECT_EQ(kl_loss(mu, var, cfg).item(), 0.0);
}

TEST(Kl, HandCasesAgainstQuadrature) {
  LossConfig cfg;
  EXPECT_NEAR(kl_quadrature(1.0, 1.0), 0.5, 1e-9);
  EXPECT_NEAR(kl_loss(grid({1.0}), grid({1.0}), cfg).item(), 0.5, 1e-12);
  const double e = std::numbers::e;
  EXPECT_NEAR(kl_quadrature(0.0, e), (e - 2) / 2, 1e-9);
  EXPECT_NEAR(kl_loss(grid({0.0}), grid({e}), cfg).item(), 0.35914, 1e-5);
}

TEST(Kl, ClosedFormMatchesQuadratureOnGrid) {
  LossConfig cfg;
  for (int i = 0; i <= 20; ++i)
    for (int j = 0; j <= 20; ++j) {
      const double mu = -3.0 + 0.3 * i, var = 0.1 + 0.195 * j;
      EXPECT_NEAR(kl_loss(grid({mu}), grid({var}), cfg).item(), kl_quadrature(mu, var), 1e-6) << mu << " " << var;
    }
}

TEST(Kl, NonNegative) {
  LossConfig cfg;
  Rng rng(1);
  for (int k = 0; k < 200; ++k) {
    TD mu = rng.normal_tensor<double>({1, 1, 2, 2}, 2.0);
    TD var = rng.uniform_tensor<double>({1, 1, 2, 2}, 1e-4, 5.0);
    EXPECT_GE(kl_loss(mu, var, cfg).item(), 0.0);
  }
}

TEST(Kl, MaskAndMeanReduction) {
  LossConfig cfg;
  TD mu = grid({1.0, 1.0, 0.0, 2.0}), var = grid({1.0, 1.0, 1.0, 1.0}), mask = grid({1, 1, 1, 0});
  EXPECT_NEAR(kl_loss(mu, var, cfg, mask).item(), 1.0, 1e-12);
  cfg.reduction = Reduction::mean;
  EXPECT_NEAR(kl_loss(mu, var, cfg, mask).item(), 1.0 / 3, 1e-12);
}

TEST(Wce, PerfectPrediction) {
  LossConfig cfg;
  TD y = grid({1, 0, 0, 1}), mask = grid({1, 1, 1, 1});
  EXPECT_LT(wce_loss(y, y, mask, cfg).item(), 1e-3);
}

TEST(Wce, AllNegativeIsZero) {
  LossConfig cfg;
  TD y = grid({0, 0, 0, 0}), mask = grid({1, 1, 1, 1}), p = grid({0.2, 0.9, 0.5, 0.1});
  EXPECT_EQ(wce_loss(p, y, mask, cfg).item(), 0.0);
}

TEST(Wce, TwoByTwoOnePositive) {
  LossConfig cfg;  // lambda 1.1
  TD y = grid({1, 0, 0, 0}), mask = grid({1, 1, 1, 1}), p = grid({0.5, 0.5, 0.5, 0.5});
  const double expect = std::log(2.0) * (3.0 / 4 + 3 * 1.1 / 4);
  EXPECT_NEAR(wce_loss(p, y, mask, cfg).item(), expect, 1e-12);
  EXPECT_NEAR(expect, 1.0917, 1e-3);
}

TEST(Wce, LiteralWeights) {
  LossConfig cfg;
  cfg.literal_weights = true;
  TD y = grid({1, 0, 0, 0}), mask = grid({1, 1, 1, 1}), p = grid({0.5, 0.5, 0.5, 0.5});
  EXPECT_NEAR(wce_loss(p, y, mask, cfg).item(), std::log(2.0) * (1.0 / 4 + 3 * 1.1 * 3 / 4), 1e-12);
}

TEST(Wce, IgnoredPixelsCarryNoWeight) {
  LossConfig cfg;
  TD y = grid({1, 0, 0, 0}), p = grid({0.5, 0.5, 0.5, 0.01});
  // last pixel ignored: |Y| = 3, one positive, two negatives
  const double expect = std::log(2.0) * (2.0 / 3 + 2 * 1.1 / 3);
  EXPECT_NEAR(wce_loss(p, y, grid({1, 1, 1, 0}), cfg).item(), expect, 1e-12);
  bool empty = false;
  EXPECT_EQ(wce_loss(p, y, grid({0, 0, 0, 0}), cfg, &empty).item(), 0.0);
  EXPECT_TRUE(empty);
}

TEST(Wce, DecreasesTowardTarget) {
  LossConfig cfg;
  TD y = grid({1, 0, 1, 0}), mask = grid({1, 1, 1, 1});
  double prev = std::numeric_limits<double>::infinity();
  for (int k = 0; k <= 20; ++k) {
    const double t = k / 20.0 * 0.98;
    TD p({1, 1, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) p[i] = 0.5 + t * (y[i] - 0.5);
    const double l = wce_loss(p, y, mask, cfg).item();
    EXPECT_LT(l, prev);
    EXPECT_GE(l, 0.0);
    prev = l;
  }
}

TEST(Reparam, DegenerateVarianceIsSigmoidMean) {
  Rng rng(2);
  TD mu = rng.normal_tensor<double>({1, 1, 4, 4});
  TD p = sample_reparam(mu, TD({1, 1, 4, 4}, 0.0), rng);
  for (std::size_t i = 0; i < mu.numel(); ++i) EXPECT_EQ(p[i], sigmoid_value(mu[i]));
}

TEST(Reparam, SeededRepeatIsBitIdentical) {
  TD mu = Rng(3).normal_tensor<double>({1, 1, 5, 5});
  TD var = Rng(4).uniform_tensor<double>({1, 1, 5, 5}, 0.1, 2.0);
  Rng a(9), b(9);
  EXPECT_EQ(sample_reparam(mu, var, a).vec(), sample_reparam(mu, var, b).vec());
}

TEST(Reparam, MonteCarloMean) {
  const int n = 100000;
  const double mu = 0.7, var = 2.5;
  TD m({1, 1, 1, n}, mu), v({1, 1, 1, n}, var);
  Rng rng(5);
  TD s = sample_logits(m, v, rng);
  double acc = 0;
  for (double x : s.vec()) acc += x;
  EXPECT_NEAR(acc / n, mu, 3 * std::sqrt(var / n));
}

TEST(Reparam, PathwiseGradients) {
  const int n = 100000;
  TD m = param(TD({1, 1, 1, n}, -0.4));
  TD v = param(TD({1, 1, 1, n}, 1.7));
  Rng rng(6);
  TD avg = mean(sample_logits(m, v, rng));
  backward(avg);
  double dm = 0, dv = 0;
  for (int i = 0; i < n; ++i) {
    dm += m.grad()[static_cast<std::size_t>(i)] * n;
    dv += v.grad()[static_cast<std::size_t>(i)] * n;
  }
  EXPECT_NEAR(dm / n, 1.0, 1e-9);
  // d/dvar of E[mu + eps sqrt(var)] is 0; the pathwise estimate is eps / (2 sqrt(var))
  EXPECT_NEAR(dv / n, 0.0, 3.0 / (2 * std::sqrt(1.7)) / std::sqrt(n));
}

TEST(Elbo, Composition) {
  LossConfig cfg;
  TD y = grid({1, 0, 0, 0}), mask = grid({1, 1, 1, 1}), p = grid({0.5, 0.5, 0.5, 0.5});
  TD mu = grid({1, 0, 0, 0}), var = grid({1, 1, 1, 1});
  const double wce = std::log(2.0) * (3.0 / 4 + 3 * 1.1 / 4);
  EXPECT_NEAR(elbo_loss(p, y, mask, mu, var, cfg).item(), wce + 0.5, 1e-12);
  cfg.varphi = 0.3;
  EXPECT_NEAR(elbo_loss(p, y, mask, mu, var, cfg).item(), wce + 0.3 * 0.5, 1e-12);
  cfg.varphi = 0;
  TD wild = grid({3, -2, 1, 0});
  EXPECT_EQ(elbo_loss(p, y, mask, wild, var, cfg).item(), wce_loss(p, y, mask, cfg).item());
  cfg.varphi = 1;
  TD zero = grid({0, 0, 0, 0});
  EXPECT_EQ(elbo_loss(p, y, mask, zero, var, cfg).item(), wce_loss(p, y, mask, cfg).item());
}

TEST(StageLoss, GlobalIsWceOnAuxiliary) {
  LossConfig cfg;
  EdgeDistribution<double> out;
  out.aux_p = grid({0.3, 0.6, 0.2, 0.9});
  TD y = grid({0, 1, 0, 1}), mask = grid({1, 1, 1, 1});
  Rng rng(1);
  EXPECT_EQ(stage_losses(out, y, mask, cfg, Stage::global, rng).item(), wce_loss(out.aux_p, y, mask, cfg).item());
  EXPECT_THROW(stage_losses(out, y, mask, cfg, Stage::fine, rng), Error);
}

TEST(StageLoss, FineHandComposition) {
  // Near-zero variances make the sampled probabilities sigmoid(mu) up to
  // ~1e-6, so the stage-2 objective can be evaluated by hand.
  LossConfig cfg;
  cfg.eps = 1e-15;
  const double tiny = 1e-12;
  EdgeDistribution<double> out;
  out.mu = grid({0, 0, 0, 0});
  out.var = grid({tiny, tiny, tiny, tiny});
  out.aux_mu = grid({0, 0, 0, 0});
  out.aux_var = grid({tiny, tiny, tiny, tiny});
  TD y = grid({1, 0, 0, 0}), mask = grid({1, 1, 1, 1});
  const double wce = std::log(2.0) * (3.0 / 4 + 3 * 1.1 / 4);
  const double kl = 4 * 0.5 * (tiny - std::log(tiny) - 1);
  Rng rng(3);
  const double main = wce + kl;
  EXPECT_NEAR(stage_losses(out, y, mask, cfg, Stage::fine, rng).item(), main + 0.4 * main, 1e-4);
  cfg.alpha2 = 0;
  EXPECT_NEAR(stage_losses(out, y, mask, cfg, Stage::fine, rng).item(), main, 1e-4);
}

TEST(StageLoss, AuxiliarySampleIsIndependent) {
  LossConfig cfg;
  cfg.alpha2 = 1.0;
  EdgeDistribution<double> out;
  out.mu = out.aux_mu = grid({0.2, -0.1, 0.4, 0.0});
  out.var = out.aux_var = grid({1, 1, 1, 1});
  TD y = grid({1, 0, 0, 1}), mask = grid({1, 1, 1, 1});
  Rng rng(4);
  const double both = stage_losses(out, y, mask, cfg, Stage::fine, rng).item();
  Rng replay(4);
  const double first = elbo_loss(sample_reparam(out.mu, out.var, replay), y, mask, out.mu, out.var, cfg).item();
  EXPECT_NE(both, 2 * first);
}

TEST(LossConfigCheck, Ranges) {
  LossConfig c;
  EXPECT_NO_THROW(c.validate());
  c.eps = 1e-2;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.lambda = 0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.varphi = -1;
  EXPECT_THROW(c.validate(), Error);
}

TEST(LossGradients, FiniteDifference) {
  LossConfig cfg;
  Rng rng(7);
  TD mu = param(rng.normal_tensor<double>({1, 1, 3, 3}));
  TD var = param(rng.uniform_tensor<double>({1, 1, 3, 3}, 0.2, 2.0));
  TD p = param(rng.uniform_tensor<double>({1, 1, 3, 3}, 0.1, 0.9));
  TD y = grid({1, 0, 0, 1, 0, 0, 0, 1, 0}), mask = grid({1, 1, 1, 1, 1, 0, 1, 1, 1});
  auto r1 = finite_diff_check([&] { return kl_loss(mu, var, cfg); }, {mu, var});
  EXPECT_LT(r1.max_rel_error, 1e-4) << r1.worst;
  auto r2 = finite_diff_check([&] { return wce_loss(p, y, mask, cfg); }, {p});
  EXPECT_LT(r2.max_rel_error, 1e-4) << r2.worst;
  auto r3 = finite_diff_check(
      [&] {
        Rng r(11);
        return elbo_loss(sample_reparam(mu, var, r), y, mask, mu, var, cfg);
      },
      {mu, var});
  EXPECT_LT(r3.max_rel_error, 1e-4) << r3.worst;
}

}  // namespace
}  // namespace edmb
