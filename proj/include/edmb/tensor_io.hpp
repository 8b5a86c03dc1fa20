// SPDX-License-Identifier: Apache-2.0
//
// Raw tensor blobs: "EDMBTNSR", u32 rank, rank x u32 dims, f32 payload, all
// little-endian.

#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "edmb/tensor.hpp"

namespace edmb {

struct RawTensor {
  Shape shape;
  std::vector<float> data;
};

void write_tensor_blob(std::ostream& os, const Shape& shape, std::span<const float> data);

/// Throws Error on bad magic, truncation or absurd dimensions. `what` is
/// used in messages.
RawTensor read_tensor_blob(std::istream& is, const std::string& what = "stream");

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t);

template <typename T>
Tensor<T> load_tensor(const std::string& path);

}  // namespace edmb
