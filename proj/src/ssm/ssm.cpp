// SPDX-License-Identifier: Apache-2.0

#include "edmb/ssm.hpp"

#include <cmath>

#include "edmb/kernels.hpp"

namespace edmb {

template <typename T>
Discretized<T> discretize_zoh(std::span<const T> a_diag, std::span<const T> b, T delta) {
  if (!(delta > T(0))) throw Error("discretize_zoh: step size must be positive");
  if (a_diag.size() != b.size()) throw Error("discretize_zoh: A and B lengths differ");
  Discretized<T> out;
  out.a_bar.resize(a_diag.size());
  out.b_bar.resize(b.size());
  for (std::size_t n = 0; n < a_diag.size(); ++n) {
    const T z = delta * a_diag[n];
    const T ab = std::exp(z);
    const T bb = kernels::zoh_gain(z) * delta * b[n];
    if (!std::isfinite(static_cast<double>(ab)) || !std::isfinite(static_cast<double>(bb))) {
      throw Error("discretize_zoh: non-finite exponential at state " + std::to_string(n));
    }
    out.a_bar[n] = ab;
    out.b_bar[n] = bb;
  }
  return out;
}

template <typename T>
Tensor<T> scan_kernel_oracle(const Tensor<T>& x, const LtiParams<T>& p) {
  const int B = x.dim(0), M = x.dim(1), D = x.dim(2), N = p.a.dim(1);
  if (p.delta.shape() != x.shape() || p.a.dim(0) != D || p.b.shape() != Shape{B, M, N} ||
      p.c.shape() != Shape{B, M, N}) {
    throw Error("scan_kernel_oracle: parameter shapes do not match input " + shape_str(x.shape()));
  }
  auto constant_along_tokens = [&](const Tensor<T>& t, int width) {
    for (int b = 0; b < B; ++b)
      for (int m = 1; m < M; ++m)
        for (int k = 0; k < width; ++k)
          if (t[(static_cast<std::size_t>(b) * M + m) * width + k] !=
              t[static_cast<std::size_t>(b) * M * width + k])
            return false;
    return true;
  };
  if (!constant_along_tokens(p.delta, D) || !constant_along_tokens(p.b, N) ||
      !constant_along_tokens(p.c, N)) {
    throw Error("scan_kernel_oracle: parameters vary across tokens; the kernel form needs an LTI system");
  }
  Tensor<T> y(x.shape());
  std::vector<T> kernel(static_cast<std::size_t>(M));
  for (int b = 0; b < B; ++b) {
    const T* bv = p.b.data().data() + static_cast<std::size_t>(b) * M * N;
    const T* cv = p.c.data().data() + static_cast<std::size_t>(b) * M * N;
    for (int d = 0; d < D; ++d) {
      const T delta = p.delta[static_cast<std::size_t>(b) * M * D + d];
      // Closed-form ZOH, deliberately not the scan's series path.
      for (int j = 0; j < M; ++j) {
        T k = T(0);
        for (int n = 0; n < N; ++n) {
          const T z = delta * p.a[static_cast<std::size_t>(d) * N + n];
          const T a_bar = std::exp(z);
          const T b_bar = (z == T(0) ? T(1) : (a_bar - T(1)) / z) * delta * bv[n];
          k += cv[n] * std::pow(a_bar, T(j)) * b_bar;
        }
        kernel[static_cast<std::size_t>(j)] = k;
      }
      for (int t = 0; t < M; ++t) {
        T acc = T(0);
        for (int s = 0; s <= t; ++s)
          acc += kernel[static_cast<std::size_t>(t - s)] * x[(static_cast<std::size_t>(b) * M + s) * D + d];
        y[(static_cast<std::size_t>(b) * M + t) * D + d] = acc;
      }
    }
  }
  return y;
}

template <typename T>
SsmBranch<T>::SsmBranch(int dim, int state_dim, Rng& rng)
    : delta_proj(dim, dim, true, rng), b_proj(dim, state_dim, false, rng), c_proj(dim, state_dim, false, rng) {
  // Step sizes start log-uniform in [1e-3, 1e-1] through the bias.
  for (auto& v : delta_proj.bias.vec()) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    v = static_cast<T>(dt + std::log(-std::expm1(-dt)));
  }
  a_log = Tensor<T>({dim, state_dim});
  for (int d = 0; d < dim; ++d)
    for (int n = 0; n < state_dim; ++n) a_log[static_cast<std::size_t>(d) * state_dim + n] = std::log(T(n + 1));
  a_log.set_requires_grad(true);
}

template <typename T>
Tensor<T> SsmBranch<T>::operator()(const Tensor<T>& u, bool reverse) const {
  Tensor<T> delta = softplus(delta_proj(u));
  Tensor<T> a = neg(exp(a_log));
  return selective_scan(u, delta, a, b_proj(u), c_proj(u), reverse);
}

template <typename T>
void SsmBranch<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  delta_proj.collect(prefix + ".delta_proj", out);
  b_proj.collect(prefix + ".b_proj", out);
  c_proj.collect(prefix + ".c_proj", out);
  add_param(out, prefix + ".a_log", a_log);
}

template <typename T>
VimBlock<T>::VimBlock(int dim, int state_dim, Rng& rng)
    : norm(dim), forward_branch(dim, state_dim, rng), backward_branch(dim, state_dim, rng),
      out_proj(dim, dim, true, rng) {}

template <typename T>
TokenSequence<T> VimBlock<T>::operator()(const TokenSequence<T>& x) const {
  Tensor<T> u = norm(x.tokens);
  Tensor<T> mixed = add(forward_branch(u, false), backward_branch(u, true));
  return {add(out_proj(mixed), x.tokens), x.h, x.w};
}

template <typename T>
void VimBlock<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  norm.collect(prefix + ".norm", out);
  forward_branch.collect(prefix + ".fwd", out);
  backward_branch.collect(prefix + ".bwd", out);
  out_proj.collect(prefix + ".out_proj", out);
}

template <typename T>
PatchEmbed<T>::PatchEmbed(const PatchEmbedConfig<T>& c, Rng& rng)
    : cfg(c), proj(3 * c.patch_size * c.patch_size, c.embed_dim, true, rng) {
  pos = param(rng.normal_tensor<T>({1, c.embed_dim, c.pos_grid, c.pos_grid}, 0.02));
}

template <typename T>
TokenSequence<T> PatchEmbed<T>::operator()(const Tensor<T>& image) const {
  if (image.rank() != 4 || image.dim(1) != 3) {
    throw Error("patch_embed: expected [B,3,H,W] image, got " + shape_str(image.shape()));
  }
  const int P = cfg.patch_size;
  const int H = image.dim(2), W = image.dim(3);
  if (H % P != 0 || W % P != 0) {
    throw Error("patch_embed: image H=" + std::to_string(H) + ", W=" + std::to_string(W) +
                " not divisible by patch size P=" + std::to_string(P));
  }
  const int gh = H / P, gw = W / P;
  Tensor<T> tokens = proj(patchify(image, P));
  Tensor<T> table = (gh == pos.dim(2) && gw == pos.dim(3)) ? pos : resize_bilinear(pos, gh, gw);
  Tensor<T> pos_tokens = reshape(spatial_to_tokens(table), Shape{gh * gw, cfg.embed_dim});
  return {add_broadcast_leading(tokens, pos_tokens), gh, gw};
}

template <typename T>
void PatchEmbed<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  proj.collect(prefix + ".proj", out);
  add_param(out, prefix + ".pos", pos);
}

template <typename T>
PatchMerge<T>::PatchMerge(int dim, Rng& rng) : norm(4 * dim), reduce(4 * dim, 2 * dim, false, rng) {}

template <typename T>
TokenSequence<T> PatchMerge<T>::operator()(const TokenSequence<T>& x) const {
  Tensor<T> merged = merge_patches(x.tokens, x.h, x.w);
  return {reduce(norm(merged)), x.h / 2, x.w / 2};
}

template <typename T>
void PatchMerge<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  norm.collect(prefix + ".norm", out);
  reduce.collect(prefix + ".reduce", out);
}

template Discretized<float> discretize_zoh<float>(std::span<const float>, std::span<const float>, float);
template Discretized<double> discretize_zoh<double>(std::span<const double>, std::span<const double>, double);
template Tensor<float> scan_kernel_oracle<float>(const Tensor<float>&, const LtiParams<float>&);
template Tensor<double> scan_kernel_oracle<double>(const Tensor<double>&, const LtiParams<double>&);
template struct SsmBranch<float>;
template struct SsmBranch<double>;
template struct VimBlock<float>;
template struct VimBlock<double>;
template struct PatchEmbed<float>;
template struct PatchEmbed<double>;
template struct PatchMerge<float>;
template struct PatchMerge<double>;

}  // namespace edmb
