// SPDX-License-Identifier: Apache-2.0

#include "edmb/nn.hpp"

#include <cmath>

namespace edmb {

template <typename T>
Linear<T>::Linear(int in, int out, bool with_bias, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = param(rng.uniform_tensor<T>({out, in}, -bound, bound));
  if (with_bias) bias = param(rng.uniform_tensor<T>({out}, -bound, bound));
}

template <typename T>
void Linear<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  add_param(out, prefix + ".weight", weight);
  add_param(out, prefix + ".bias", bias);
}

template <typename T>
LayerNorm<T>::LayerNorm(int dim) {
  gamma = param(Tensor<T>::ones({dim}));
  beta = param(Tensor<T>::zeros({dim}));
}

template <typename T>
void LayerNorm<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  add_param(out, prefix + ".gamma", gamma);
  add_param(out, prefix + ".beta", beta);
}

template <typename T>
Conv2d<T>::Conv2d(int in, int out, int kernel, bool with_bias, Rng& rng, int groups_)
    : padding(kernel / 2), groups(groups_) {
  const int fan_in = in / groups * kernel * kernel;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  // He-style range keeps ReLU stacks from shrinking at init.
  const double wb = std::sqrt(6.0 / fan_in);
  weight = param(rng.uniform_tensor<T>({out, in / groups, kernel, kernel}, -wb, wb));
  if (with_bias) bias = param(rng.uniform_tensor<T>({out}, -bound, bound));
}

template <typename T>
void Conv2d<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  add_param(out, prefix + ".weight", weight);
  add_param(out, prefix + ".bias", bias);
}

template <typename T>
Norm2d<T>::Norm2d(int channels, NormKind kind_) : kind(kind_) {
  gamma = param(Tensor<T>::ones({channels}));
  beta = param(Tensor<T>::zeros({channels}));
  if (kind == NormKind::batch) {
    running_mean = Tensor<T>::zeros({channels});
    running_var = Tensor<T>::ones({channels});
  } else {
    groups = 1;
    for (int g : {8, 4, 2}) {
      if (channels % g == 0) {
        groups = g;
        break;
      }
    }
  }
}

template <typename T>
Tensor<T> Norm2d<T>::forward(const Tensor<T>& x, bool training) {
  if (kind == NormKind::group) return group_norm(x, groups, gamma, beta);
  return batch_norm2d(x, gamma, beta, running_mean, running_var, training);
}

template <typename T>
void Norm2d<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  add_param(out, prefix + ".gamma", gamma);
  add_param(out, prefix + ".beta", beta);
  add_param(out, prefix + ".running_mean", running_mean, false);
  add_param(out, prefix + ".running_var", running_var, false);
}

template struct Linear<float>;
template struct Linear<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template struct Conv2d<float>;
template struct Conv2d<double>;
template struct Norm2d<float>;
template struct Norm2d<double>;

}  // namespace edmb
