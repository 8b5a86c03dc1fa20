// SPDX-License-Identifier: Apache-2.0

#include "edmb/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace edmb {

namespace {

constexpr std::array<char, 8> kMagic{'E', 'D', 'M', 'B', 'T', 'N', 'S', 'R'};
constexpr std::uint32_t kMaxRank = 8;

static_assert(std::endian::native == std::endian::little, "little-endian host required");

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& is, const std::string& what) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw Error(what + ": truncated tensor header");
  return v;
}

}  // namespace

void write_tensor_blob(std::ostream& os, const Shape& shape, std::span<const float> data) {
  if (shape_numel(shape) != data.size()) throw Error("write_tensor_blob: shape/data size mismatch");
  os.write(kMagic.data(), kMagic.size());
  put_u32(os, static_cast<std::uint32_t>(shape.size()));
  for (int d : shape) put_u32(os, static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!os) throw Error("write_tensor_blob: write failed");
}

RawTensor read_tensor_blob(std::istream& is, const std::string& what) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size())) throw Error(what + ": truncated tensor header");
  if (magic != kMagic) throw Error(what + ": bad tensor magic");
  const std::uint32_t rank = get_u32(is, what);
  if (rank == 0 || rank > kMaxRank) throw Error(what + ": unsupported tensor rank " + std::to_string(rank));
  RawTensor out;
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint32_t d = get_u32(is, what);
    if (d == 0 || d > (1u << 30)) throw Error(what + ": invalid tensor dimension " + std::to_string(d));
    count *= d;
    if (count > (1ull << 32)) throw Error(what + ": tensor too large");
    out.shape.push_back(static_cast<int>(d));
  }
  out.data.resize(count);
  if (!is.read(reinterpret_cast<char*>(out.data.data()),
               static_cast<std::streamsize>(count * sizeof(float)))) {
    throw Error(what + ": truncated tensor payload");
  }
  return out;
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  std::vector<float> buf(t.vec().begin(), t.vec().end());
  write_tensor_blob(os, t.shape(), buf);
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  RawTensor raw = read_tensor_blob(is, path);
  return Tensor<T>(raw.shape, std::vector<T>(raw.data.begin(), raw.data.end()));
}

template void save_tensor<float>(const std::string&, const Tensor<float>&);
template void save_tensor<double>(const std::string&, const Tensor<double>&);
template Tensor<float> load_tensor<float>(const std::string&);
template Tensor<double> load_tensor<double>(const std::string&);

}  // namespace edmb
