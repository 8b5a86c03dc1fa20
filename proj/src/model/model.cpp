// SPDX-License-Identifier: Apache-2.0

#include "edmb/model.hpp"

#include <cstring>

namespace edmb {

namespace {

struct Fnv {
  std::uint64_t h = 1469598103934665603ull;
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= c[i];
      h *= 1099511628211ull;
    }
  }
  void i32(int v) { bytes(&v, sizeof v); }
};

}  // namespace

std::uint64_t config_fingerprint(const ModelConfig& cfg) {
  Fnv f;
  const auto& e = cfg.encoder;
  f.i32(e.embed_dim);
  for (int d : e.depths) f.i32(d);
  f.i32(e.state_dim);
  f.i32(e.patch_size);
  f.i32(e.pos_grid);
  const auto& d = cfg.decoder;
  f.i32(d.width);
  f.i32(d.head_width);
  f.i32(d.head_depth);
  f.i32(d.sft_hidden);
  f.i32(static_cast<int>(d.norm));
  return f.h;
}

bool is_stage1_param(const std::string& name) {
  for (const char* p : {"global_encoder.", "highres_encoder.", "decoder.cff_global.", "decoder.edge_head."}) {
    if (name.rfind(p, 0) == 0) return true;
  }
  return false;
}

template <typename T>
EdmbModel<T>::EdmbModel(const ModelConfig& c) : cfg(c) {
  Rng rng(c.init_seed);
  global_encoder = MambaEncoder<T>(c.encoder, rng);
  fine_encoder = MambaEncoder<T>(c.encoder, rng);
  highres_encoder = HighResEncoder<T>(rng);
  decoder = LgdDecoder<T>(c.encoder, c.decoder, rng);
}

template <typename T>
EdgeDistribution<T> EdmbModel<T>::forward_train(const Tensor<T>& image, Stage stage, Rng& rng) {
  if (stage == Stage::global) {
    const Pyramid<T> fg = encode_global(global_encoder, image);
    const Pyramid<T> fh = encode_highres(highres_encoder, image);
    EdgeDistribution<T> out;
    out.aux_p = edge_probability(decoder, fuse_global(decoder, fg, fh, true), true);
    return out;
  }
  Pyramid<T> fh;
  Tensor<T> hg, aux_p;
  {
    NoGradGuard frozen;
    const Pyramid<T> fg = encode_global(global_encoder, image);
    fh = encode_highres(highres_encoder, image);
    hg = fuse_global(decoder, fg, fh, false);
    aux_p = edge_probability(decoder, hg, false);
  }
  const Pyramid<T> ff = encode_fine(fine_encoder, image, true, rng);
  EdgeDistribution<T> out = decode_fine(decoder, ff, fh, hg, true, true);
  out.aux_p = aux_p;
  return out;
}

template <typename T>
EdgeDistribution<T> EdmbModel<T>::forward_eval(const Tensor<T>& image, bool with_aux) {
  Rng unused(0);
  const Pyramid<T> fg = encode_global(global_encoder, image);
  const Pyramid<T> fh = encode_highres(highres_encoder, image);
  const Pyramid<T> ff = encode_fine(fine_encoder, image, false, unused);
  Tensor<T> hg = fuse_global(decoder, fg, fh, false);
  EdgeDistribution<T> out = decode_fine(decoder, ff, fh, hg, with_aux, false);
  if (with_aux) out.aux_p = edge_probability(decoder, hg, false);
  return out;
}

template <typename T>
ParamList<T> EdmbModel<T>::parameters() const {
  ParamList<T> out;
  global_encoder.collect("global_encoder", out);
  fine_encoder.collect("fine_encoder", out);
  highres_encoder.collect("highres_encoder", out);
  decoder.collect("decoder", out);
  return out;
}

template struct EdmbModel<float>;
template struct EdmbModel<double>;

}  // namespace edmb
