// SPDX-License-Identifier: Apache-2.0

#include "edmb/encoders.hpp"

namespace edmb {

template <typename T>
MambaEncoder<T>::MambaEncoder(const EncoderConfig& c, Rng& rng) : cfg(c) {
  if (c.keep_count < 1 || c.keep_count > 4) throw Error("encoder: keep_count must lie in [1, 4]");
  PatchEmbedConfig<T> pe;
  pe.patch_size = c.patch_size;
  pe.embed_dim = c.embed_dim;
  pe.pos_grid = c.pos_grid;
  embed = PatchEmbed<T>(pe, rng);
  int dim = c.embed_dim;
  for (int s = 0; s < 3; ++s) {
    if (s > 0) {
      merges.emplace_back(dim, rng);
      dim *= 2;
    }
    std::vector<VimBlock<T>> blocks;
    for (int i = 0; i < c.depths[static_cast<std::size_t>(s)]; ++i) blocks.emplace_back(dim, c.state_dim, rng);
    stages.push_back(std::move(blocks));
  }
}

template <typename T>
Pyramid<T> MambaEncoder<T>::operator()(const Tensor<T>& image) const {
  TokenSequence<T> seq = embed(image);
  Pyramid<T> out;
  int stride = cfg.patch_size;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    if (s > 0) {
      seq = merges[s - 1](seq);
      stride *= 2;
    }
    for (const auto& block : stages[s]) seq = block(seq);
    out.push_back({seq.to_spatial(), stride});
  }
  return out;
}

template <typename T>
void MambaEncoder<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  embed.collect(prefix + ".embed", out);
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::string sp = prefix + ".stage" + std::to_string(s + 1);
    if (s > 0) merges[s - 1].collect(sp + ".merge", out);
    for (std::size_t i = 0; i < stages[s].size(); ++i) stages[s][i].collect(sp + ".block" + std::to_string(i), out);
  }
}

template <typename T>
Pyramid<T> encode_global(const MambaEncoder<T>& enc, const Tensor<T>& image) {
  const int unit = enc.cfg.patch_size * 4;
  if (image.rank() != 4 || image.dim(2) % unit != 0 || image.dim(3) % unit != 0) {
    throw Error("encode_global: image " + shape_str(image.shape()) + " must have H, W divisible by " +
                std::to_string(unit));
  }
  return enc(image);
}

template <typename T>
std::array<Tensor<T>, 4> window_split(const Tensor<T>& image) {
  if (image.rank() != 4) throw Error("window_split: expected NCHW input");
  const int H = image.dim(2), W = image.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw Error("window_split: odd spatial size " + std::to_string(H) + "x" + std::to_string(W));
  }
  const int h = H / 2, w = W / 2;
  return {crop2d(image, 0, 0, h, w), crop2d(image, 0, w, h, w), crop2d(image, h, 0, h, w),
          crop2d(image, h, w, h, w)};
}

template <typename T>
Tensor<T> window_reassemble(const std::array<Tensor<T>, 4>& windows) {
  return assemble_quadrants(windows[0], windows[1], windows[2], windows[3]);
}

template <typename T>
Pyramid<T> encode_fine(const MambaEncoder<T>& enc, const Tensor<T>& image, bool training, Rng& rng) {
  const int unit = enc.cfg.patch_size * 8;
  if (image.rank() != 4 || image.dim(2) % unit != 0 || image.dim(3) % unit != 0) {
    throw Error("encode_fine: image " + shape_str(image.shape()) + " must have H, W divisible by " +
                std::to_string(unit));
  }
  const auto windows = window_split(image);
  std::array<bool, 4> track{true, true, true, true};
  if (training) {
    track.fill(false);
    for (int i : rng.choose(4, enc.cfg.keep_count)) track[static_cast<std::size_t>(i)] = true;
  }
  std::array<Pyramid<T>, 4> parts;
  for (std::size_t i = 0; i < 4; ++i) {
    if (track[i]) {
      parts[i] = enc(windows[i]);
    } else {
      NoGradGuard guard;
      parts[i] = enc(windows[i]);
    }
  }
  Pyramid<T> out;
  for (std::size_t s = 0; s < parts[0].size(); ++s) {
    out.push_back({assemble_quadrants(parts[0][s].map, parts[1][s].map, parts[2][s].map, parts[3][s].map),
                   parts[0][s].stride});
  }
  return out;
}

template <typename T>
HighResEncoder<T>::HighResEncoder(Rng& rng) : conv1(3, 16, 3, true, rng), conv2(16, 32, 3, true, rng) {}

template <typename T>
Pyramid<T> HighResEncoder<T>::operator()(const Tensor<T>& image) const {
  Tensor<T> f1 = relu(conv1(image));
  Tensor<T> f2 = relu(conv2(max_pool2x2(f1)));
  return {{f1, 1}, {f2, 2}};
}

template <typename T>
void HighResEncoder<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  conv1.collect(prefix + ".conv1", out);
  conv2.collect(prefix + ".conv2", out);
}

template <typename T>
Pyramid<T> encode_highres(const HighResEncoder<T>& enc, const Tensor<T>& image) {
  if (image.rank() != 4 || image.dim(2) % 2 != 0 || image.dim(3) % 2 != 0) {
    throw Error("encode_highres: image " + shape_str(image.shape()) + " must have even H, W");
  }
  return enc(image);
}

#define EDMB_INSTANTIATE_ENC(T)                                                                 \
  template struct MambaEncoder<T>;                                                              \
  template struct HighResEncoder<T>;                                                            \
  template Pyramid<T> encode_global<T>(const MambaEncoder<T>&, const Tensor<T>&);               \
  template std::array<Tensor<T>, 4> window_split<T>(const Tensor<T>&);                          \
  template Tensor<T> window_reassemble<T>(const std::array<Tensor<T>, 4>&);                     \
  template Pyramid<T> encode_fine<T>(const MambaEncoder<T>&, const Tensor<T>&, bool, Rng&);     \
  template Pyramid<T> encode_highres<T>(const HighResEncoder<T>&, const Tensor<T>&);

EDMB_INSTANTIATE_ENC(float)
EDMB_INSTANTIATE_ENC(double)

}  // namespace edmb
