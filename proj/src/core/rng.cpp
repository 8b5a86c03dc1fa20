// SPDX-License-Identifier: Apache-2.0

#include "edmb/rng.hpp"

#include <algorithm>
#include <numeric>

namespace edmb {

std::vector<int> Rng::choose(int n, int k) {
  if (k < 0 || k > n) throw Error("Rng::choose: cannot pick " + std::to_string(k) + " of " + std::to_string(n));
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates with our own draws so the sequence is portable.
  for (int i = 0; i < k; ++i) {
    const int j = i + index(n - i);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <typename T>
Tensor<T> Rng::normal_tensor(Shape shape, double stddev) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(normal() * stddev);
  return t;
}

template <typename T>
Tensor<T> Rng::uniform_tensor(Shape shape, double lo, double hi) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(uniform(lo, hi));
  return t;
}

template Tensor<float> Rng::normal_tensor<float>(Shape, double);
template Tensor<double> Rng::normal_tensor<double>(Shape, double);
template Tensor<float> Rng::uniform_tensor<float>(Shape, double, double);
template Tensor<double> Rng::uniform_tensor<double>(Shape, double, double);

}  // namespace edmb
