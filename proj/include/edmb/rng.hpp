// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "edmb/tensor.hpp"

namespace edmb {

/// Seeded generator shared by initialisation, augmentation, label selection,
/// window gradient keeping and reparameterised sampling.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
  /// Uniform integer in [0, n).
  int index(int n) { return std::uniform_int_distribution<int>(0, n - 1)(engine_); }
  std::uint64_t next() { return engine_(); }

  /// k distinct indices from [0, n), sorted.
  std::vector<int> choose(int n, int k);

  template <typename T>
  Tensor<T> normal_tensor(Shape shape, double stddev = 1.0);
  template <typename T>
  Tensor<T> uniform_tensor(Shape shape, double lo, double hi);

 private:
  std::mt19937_64 engine_;
};

}  // namespace edmb
