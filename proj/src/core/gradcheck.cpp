// SPDX-License-Identifier: Apache-2.0

#include "edmb/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "edmb/branch_trace.hpp"
#include "edmb/rng.hpp"

namespace edmb {

namespace {

double evaluate(const std::function<Tensor<double>()>& f, const std::string& where,
                std::uint64_t* branches = nullptr) {
  NoGradGuard guard;
  BranchTrace trace;
  Tensor<double> y = f();
  if (branches) *branches = trace.digest();
  if (!y.defined() || y.numel() != 1) throw Error("finite_diff_check: function must return a scalar");
  const double v = y.item();
  if (!std::isfinite(v)) throw Error("finite_diff_check: non-finite value at " + where);
  return v;
}

}  // namespace

GradCheckResult finite_diff_check(const std::function<Tensor<double>()>& f,
                                  std::vector<Tensor<double>> params, const GradCheckOptions& opts,
                                  const std::vector<std::string>& names) {
  if (!(opts.eps >= 1e-6 && opts.eps <= 1e-2)) {
    throw Error("finite_diff_check: eps must lie in [1e-6, 1e-2]");
  }
  auto name_of = [&](std::size_t k) {
    return k < names.size() ? names[k] : "param" + std::to_string(k);
  };
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tensor<double> y = f();
    if (!y.defined() || y.numel() != 1) throw Error("finite_diff_check: function must return a scalar");
    if (!std::isfinite(y.item())) throw Error("finite_diff_check: non-finite value at base point");
    backward(y);
  }
  GradCheckResult res;
  std::uint64_t base_branches = 0;
  const double f0 = evaluate(f, "base point", &base_branches);
  const double floor = opts.denom_floor * std::max(1.0, std::abs(f0));
  Rng rng(opts.seed);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    std::vector<int> coords;
    const int n = static_cast<int>(p.numel());
    if (opts.max_coords > 0 && opts.max_coords < n) {
      coords = rng.choose(n, opts.max_coords);
    } else {
      coords.resize(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    }
    for (int i : coords) {
      const std::string where = name_of(k) + "[" + std::to_string(i) + "]";
      const double a = analytic.empty() ? 0.0 : analytic[static_cast<std::size_t>(i)];
      if (!std::isfinite(a)) throw Error("finite_diff_check: non-finite gradient at " + where);
      const double orig = p[static_cast<std::size_t>(i)];
      // On a kink crossing, retry with smaller steps before giving up.
      double step = opts.eps, num = 0.0;
      bool smooth = false;
      for (int attempt = 0; attempt < (opts.skip_kinks ? 3 : 1); ++attempt, step /= 10) {
        std::uint64_t up = 0, down = 0;
        p[static_cast<std::size_t>(i)] = orig + step;
        const double fp = evaluate(f, where, &up);
        p[static_cast<std::size_t>(i)] = orig - step;
        const double fm = evaluate(f, where, &down);
        p[static_cast<std::size_t>(i)] = orig;
        num = (fp - fm) / (2.0 * step);
        if (!opts.skip_kinks || (up == base_branches && down == base_branches)) {
          smooth = true;
          break;
        }
      }
      if (!smooth) {
        ++res.skipped;
        continue;
      }
      const double err = std::abs(a - num) / std::max(std::abs(a) + std::abs(num), floor);
      ++res.checked;
      if (err > res.max_rel_error || res.worst.empty()) {
        if (err >= res.max_rel_error) {
          res.max_rel_error = err;
          res.worst = where;
          res.worst_analytic = a;
          res.worst_numeric = num;
        }
      }
    }
  }
  return res;
}

double finite_diff_check(const std::function<Tensor<double>()>& f, Tensor<double> params, double eps) {
  GradCheckOptions opts;
  opts.eps = eps;
  return finite_diff_check(f, {std::move(params)}, opts).max_rel_error;
}

}  // namespace edmb
