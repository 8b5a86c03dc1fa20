// SPDX-License-Identifier: Apache-2.0
//
// Small parameter-holding layers shared by the encoders and the decoder.

#pragma once

#include <string>
#include <vector>

#include "edmb/ops.hpp"
#include "edmb/rng.hpp"
#include "edmb/tensor.hpp"

namespace edmb {

template <typename T>
struct ParamEntry {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;  // false for running statistics
};

template <typename T>
using ParamList = std::vector<ParamEntry<T>>;

template <typename T>
void add_param(ParamList<T>& out, const std::string& name, const Tensor<T>& t, bool trainable = true) {
  if (t.defined()) out.push_back({name, t, trainable});
}

/// Fresh leaf tensor requiring grad.
template <typename T>
Tensor<T> param(Tensor<T> t) {
  t.set_requires_grad(true);
  return t;
}

template <typename T>
struct Linear {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out] or undefined

  Linear() = default;
  Linear(int in, int out, bool with_bias, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  LayerNorm() = default;
  explicit LayerNorm(int dim);
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
struct Conv2d {
  Tensor<T> weight;  // [out, in/groups, k, k]
  Tensor<T> bias;
  int stride = 1;
  int padding = 0;
  int groups = 1;

  Conv2d() = default;
  Conv2d(int in, int out, int kernel, bool with_bias, Rng& rng, int groups = 1);
  Tensor<T> operator()(const Tensor<T>& x) const {
    return conv2d(x, weight, bias, stride, padding, groups);
  }
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

enum class NormKind { batch, group };

/// Per-channel normalisation: batch statistics with running buffers, or
/// group normalisation as the batch-size-independent fallback.
template <typename T>
struct Norm2d {
  NormKind kind = NormKind::batch;
  int groups = 1;
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;

  Norm2d() = default;
  Norm2d(int channels, NormKind kind);
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

}  // namespace edmb
