// SPDX-License-Identifier: Apache-2.0
//
// Self-contained verification suites behind `edmb check`: finite-difference
// gradient checks and closed-form / independent-oracle comparisons.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace edmb {

struct CheckOutcome {
  std::string name;
  bool pass = false;
  std::string detail;
};

using CheckCallback = std::function<void(const CheckOutcome&)>;

/// Analytic vs central-difference gradients (f64, eps 1e-4, tolerance 1e-4)
/// for the ops, every layer type and both stage losses.
std::vector<CheckOutcome> run_grad_suite(std::uint64_t seed, const CheckCallback& on_result = {});

/// Scan vs convolution-kernel form, ZOH closed form, KL vs quadrature, WCE
/// hand cases, granularity monotonicity, eval hand cases and MAC counting.
std::vector<CheckOutcome> run_oracle_suite(std::uint64_t seed, const CheckCallback& on_result = {});

bool all_passed(const std::vector<CheckOutcome>& outcomes);

}  // namespace edmb
