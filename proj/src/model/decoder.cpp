// SPDX-License-Identifier: Apache-2.0

#include "edmb/decoder.hpp"

#include <algorithm>

namespace edmb {

template <typename T>
MBConv<T>::MBConv(int in, int out, NormKind norm, Rng& rng)
    : expand(in, 2 * out, 1, false, rng),
      depthwise(2 * out, 2 * out, 3, false, rng, 2 * out),
      project(2 * out, out, 1, false, rng),
      n1(2 * out, norm),
      n2(2 * out, norm),
      n3(out, norm),
      residual(in == out) {}

template <typename T>
Tensor<T> MBConv<T>::forward(const Tensor<T>& x, bool training) {
  Tensor<T> h = relu(n1.forward(expand(x), training));
  h = relu(n2.forward(depthwise(h), training));
  h = n3.forward(project(h), training);
  return residual ? add(h, x) : h;
}

template <typename T>
void MBConv<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  expand.collect(prefix + ".expand", out);
  n1.collect(prefix + ".norm1", out);
  depthwise.collect(prefix + ".depthwise", out);
  n2.collect(prefix + ".norm2", out);
  project.collect(prefix + ".project", out);
  n3.collect(prefix + ".norm3", out);
}

namespace {

void check_strides(const std::vector<int>& strides) {
  if (strides.empty()) throw Error("cff: no levels");
  for (std::size_t i = 1; i < strides.size(); ++i) {
    if (strides[i] >= strides[i - 1] || strides[i - 1] % strides[i] != 0) {
      throw Error("cff: strides must be strictly decreasing integer ratios, got " +
                  std::to_string(strides[i - 1]) + " then " + std::to_string(strides[i]));
    }
  }
  if (strides.back() != 1) throw Error("cff: finest level must have stride 1");
}

// Coarse-first union of two pyramids.
template <typename T>
Pyramid<T> coarse_first(const Pyramid<T>& a, const Pyramid<T>& b) {
  Pyramid<T> all(a);
  all.insert(all.end(), b.begin(), b.end());
  std::stable_sort(all.begin(), all.end(), [](const auto& x, const auto& y) { return x.stride > y.stride; });
  return all;
}

}  // namespace

template <typename T>
CascadedFusion<T>::CascadedFusion(const std::vector<int>& channels, const std::vector<int>& strides_,
                                  int width, NormKind norm, Rng& rng)
    : strides(strides_) {
  check_strides(strides);
  if (channels.size() != strides.size()) throw Error("cff: channel and stride lists differ in length");
  for (std::size_t i = 0; i < channels.size(); ++i) {
    const int in = i == 0 ? channels[0] : width + channels[i];
    blocks.emplace_back(in, width, norm, rng);
  }
}

template <typename T>
void CascadedFusion<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".block" + std::to_string(i), out);
}

template <typename T>
Tensor<T> cff_fuse(CascadedFusion<T>& cff, const Pyramid<T>& levels, bool training) {
  std::vector<int> strides;
  for (const auto& l : levels) strides.push_back(l.stride);
  check_strides(strides);
  if (strides != cff.strides) throw Error("cff: level strides do not match the configured cascade");
  Tensor<T> cur = cff.blocks[0].forward(levels[0].map, training);
  for (std::size_t i = 1; i < levels.size(); ++i) {
    Tensor<T> up = bilinear_upsample(cur, strides[i - 1] / strides[i]);
    cur = cff.blocks[i].forward(concat_channels<T>({up, levels[i].map}), training);
  }
  return cur;
}

template <typename T>
SpatialFeatureTransform<T>::SpatialFeatureTransform(int content_ch, int guide_ch, int hidden, Rng& rng)
    : scale1(guide_ch, hidden, 1, true, rng),
      scale2(hidden, content_ch, 1, true, rng),
      shift1(guide_ch, hidden, 1, true, rng),
      shift2(hidden, content_ch, 1, true, rng) {
  for (auto& v : scale2.bias.vec()) v = T(1);
}

template <typename T>
void SpatialFeatureTransform<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  scale1.collect(prefix + ".scale1", out);
  scale2.collect(prefix + ".scale2", out);
  shift1.collect(prefix + ".shift1", out);
  shift2.collect(prefix + ".shift2", out);
}

template <typename T>
Tensor<T> sft_modulate(const SpatialFeatureTransform<T>& sft, const Tensor<T>& content, const Tensor<T>& guide) {
  if (content.rank() != 4 || guide.rank() != 4 || content.dim(0) != guide.dim(0) ||
      content.dim(2) != guide.dim(2) || content.dim(3) != guide.dim(3)) {
    throw Error("sft_modulate: content " + shape_str(content.shape()) + " and guide " +
                shape_str(guide.shape()) + " differ in batch or spatial size");
  }
  Tensor<T> s = sft.scale2(relu(sft.scale1(guide)));
  Tensor<T> t = sft.shift2(relu(sft.shift1(guide)));
  return add(mul(s, content), t);
}

template <typename T>
Head<T>::Head(int in, const DecoderConfig& cfg, Rng& rng) {
  int ch = in;
  for (int i = 0; i < cfg.head_depth; ++i) {
    convs.emplace_back(ch, cfg.head_width, 3, false, rng);
    norms.emplace_back(cfg.head_width, cfg.norm);
    ch = cfg.head_width;
  }
  out = Conv2d<T>(ch, 1, 1, true, rng);
}

template <typename T>
Tensor<T> Head<T>::forward(const Tensor<T>& x, bool training) {
  Tensor<T> h = x;
  for (std::size_t i = 0; i < convs.size(); ++i) h = relu(norms[i].forward(convs[i](h), training));
  return out(h);
}

template <typename T>
void Head<T>::collect(const std::string& prefix, ParamList<T>& out_list) const {
  for (std::size_t i = 0; i < convs.size(); ++i) {
    convs[i].collect(prefix + ".conv" + std::to_string(i), out_list);
    norms[i].collect(prefix + ".norm" + std::to_string(i), out_list);
  }
  out.collect(prefix + ".out", out_list);
}

template <typename T>
LgdDecoder<T>::LgdDecoder(const EncoderConfig& enc, const DecoderConfig& c, Rng& rng) : cfg(c) {
  const int d = enc.embed_dim;
  const int p = enc.patch_size;
  const std::vector<int> channels{4 * d, 2 * d, d, 32, 16};
  const std::vector<int> strides{4 * p, 2 * p, p, 2, 1};
  cff_global = CascadedFusion<T>(channels, strides, c.width, c.norm, rng);
  cff_mean = CascadedFusion<T>(channels, strides, c.width, c.norm, rng);
  cff_var = CascadedFusion<T>(channels, strides, c.width, c.norm, rng);
  sft_mean = SpatialFeatureTransform<T>(c.width, c.width, c.sft_hidden, rng);
  sft_var = SpatialFeatureTransform<T>(c.width, c.width, c.sft_hidden, rng);
  mean_head = Head<T>(c.width, c, rng);
  var_head = Head<T>(c.width, c, rng);
  edge_head = Head<T>(c.width, c, rng);
  aux_mean_head = Head<T>(c.width, c, rng);
  aux_var_head = Head<T>(c.width, c, rng);
}

template <typename T>
void LgdDecoder<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  cff_global.collect(prefix + ".cff_global", out);
  edge_head.collect(prefix + ".edge_head", out);
  cff_mean.collect(prefix + ".cff_mean", out);
  cff_var.collect(prefix + ".cff_var", out);
  sft_mean.collect(prefix + ".sft_mean", out);
  sft_var.collect(prefix + ".sft_var", out);
  mean_head.collect(prefix + ".mean_head", out);
  var_head.collect(prefix + ".var_head", out);
  aux_mean_head.collect(prefix + ".aux_mean_head", out);
  aux_var_head.collect(prefix + ".aux_var_head", out);
}

template <typename T>
Tensor<T> fuse_global(LgdDecoder<T>& dec, const Pyramid<T>& fg, const Pyramid<T>& fh, bool training) {
  return cff_fuse(dec.cff_global, coarse_first(fg, fh), training);
}

template <typename T>
Tensor<T> edge_probability(LgdDecoder<T>& dec, const Tensor<T>& hg, bool training) {
  return sigmoid(dec.edge_head.forward(hg, training));
}

template <typename T>
EdgeDistribution<T> decode_fine(LgdDecoder<T>& dec, const Pyramid<T>& ff, const Pyramid<T>& fh,
                                const Tensor<T>& hg, bool with_aux, bool training) {
  const Pyramid<T> levels = coarse_first(ff, fh);
  Tensor<T> fm = cff_fuse(dec.cff_mean, levels, training);
  Tensor<T> fv = cff_fuse(dec.cff_var, levels, training);
  EdgeDistribution<T> out;
  out.mu = dec.mean_head.forward(sft_modulate(dec.sft_mean, fm, hg), training);
  out.var = softplus(dec.var_head.forward(sft_modulate(dec.sft_var, fv, hg), training));
  if (with_aux) {
    out.aux_mu = dec.aux_mean_head.forward(fm, training);
    out.aux_var = softplus(dec.aux_var_head.forward(fv, training));
  }
  return out;
}

template <typename T>
EdgeDistribution<T> decode_lgd(LgdDecoder<T>& dec, const Pyramid<T>& fg, const Pyramid<T>& ff,
                               const Pyramid<T>& fh, bool training) {
  Tensor<T> hg = fuse_global(dec, fg, fh, training);
  EdgeDistribution<T> out = decode_fine(dec, ff, fh, hg, true, training);
  out.aux_p = edge_probability(dec, hg, training);
  return out;
}

#define EDMB_INSTANTIATE_DEC(T)                                                                      \
  template struct MBConv<T>;                                                                         \
  template struct CascadedFusion<T>;                                                                 \
  template struct SpatialFeatureTransform<T>;                                                        \
  template struct Head<T>;                                                                           \
  template struct LgdDecoder<T>;                                                                     \
  template Tensor<T> cff_fuse<T>(CascadedFusion<T>&, const Pyramid<T>&, bool);                       \
  template Tensor<T> sft_modulate<T>(const SpatialFeatureTransform<T>&, const Tensor<T>&,            \
                                     const Tensor<T>&);                                              \
  template Tensor<T> fuse_global<T>(LgdDecoder<T>&, const Pyramid<T>&, const Pyramid<T>&, bool);     \
  template Tensor<T> edge_probability<T>(LgdDecoder<T>&, const Tensor<T>&, bool);                    \
  template EdgeDistribution<T> decode_fine<T>(LgdDecoder<T>&, const Pyramid<T>&, const Pyramid<T>&,  \
                                              const Tensor<T>&, bool, bool);                         \
  template EdgeDistribution<T> decode_lgd<T>(LgdDecoder<T>&, const Pyramid<T>&, const Pyramid<T>&,   \
                                             const Pyramid<T>&, bool);

EDMB_INSTANTIATE_DEC(float)
EDMB_INSTANTIATE_DEC(double)

}  // namespace edmb
