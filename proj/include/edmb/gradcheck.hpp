// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient verification in 64-bit arithmetic.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "edmb/tensor.hpp"

namespace edmb {

struct GradCheckOptions {
  double eps = 1e-4;
  /// Coordinates sampled per parameter tensor; 0 checks all of them.
  int max_coords = 0;
  // Denominator floor, scaled by max(1, |f(x)|): central-difference
  // round-off grows with the objective, and exact zero gradients would
  // otherwise be judged against that noise alone.
  double denom_floor = 1e-6;
  // Skip coordinates whose +/- eps evaluations take a different branch at
  // some ReLU, clamp or max-pool than the base point (see BranchTrace).
  bool skip_kinks = true;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<tensor>[<index>]"
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  int checked = 0;
  int skipped = 0;  // kink crossings
};

/// `f` must rebuild the graph from the current parameter values on every
/// call and return a scalar. Gradients of `params` are reset before use.
/// Error per coordinate: |a - n| / max(|a| + |n|, denom_floor * max(1, |f|)).
GradCheckResult finite_diff_check(const std::function<Tensor<double>()>& f,
                                  std::vector<Tensor<double>> params,
                                  const GradCheckOptions& opts = {},
                                  const std::vector<std::string>& names = {});

/// Single-tensor convenience form.
double finite_diff_check(const std::function<Tensor<double>()>& f, Tensor<double> params,
                         double eps);

}  // namespace edmb
