// SPDX-License-Identifier: Apache-2.0

#include <omp.h>

#include <algorithm>
#include <cstdlib>
#include <string>
#include <vector>

#include "edmb/kernels.hpp"

namespace edmb::kernels {

namespace {

struct Tap {
  int lo = 0;
  int hi = 0;
  double frac = 0.0;
};

// align_corners=false source coordinates, clamped at the low border.
std::vector<Tap> make_taps(int in, int out) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int lo = static_cast<int>(src);
    if (lo > in - 1) lo = in - 1;
    const int hi = std::min(lo + 1, in - 1);
    taps[static_cast<std::size_t>(i)] = {lo, hi, src - lo};
  }
  return taps;
}

}  // namespace

template <typename T>
void bilinear_forward(int planes, int in_h, int in_w, int out_h, int out_w, std::span<const T> x,
                      std::span<T> y) {
  const auto ty = make_taps(in_h, out_h);
  const auto tx = make_taps(in_w, out_w);
#pragma omp parallel for schedule(static)
  for (int p = 0; p < planes; ++p) {
    const T* src = x.data() + static_cast<std::size_t>(p) * in_h * in_w;
    T* dst = y.data() + static_cast<std::size_t>(p) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const Tap& vy = ty[static_cast<std::size_t>(oy)];
      const T fy = static_cast<T>(vy.frac);
      const T* r0 = src + static_cast<std::size_t>(vy.lo) * in_w;
      const T* r1 = src + static_cast<std::size_t>(vy.hi) * in_w;
      for (int ox = 0; ox < out_w; ++ox) {
        const Tap& vx = tx[static_cast<std::size_t>(ox)];
        const T fx = static_cast<T>(vx.frac);
        const T top = r0[vx.lo] * (T(1) - fx) + r0[vx.hi] * fx;
        const T bot = r1[vx.lo] * (T(1) - fx) + r1[vx.hi] * fx;
        dst[oy * out_w + ox] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
}

template <typename T>
void bilinear_backward(int planes, int in_h, int in_w, int out_h, int out_w, std::span<const T> dy,
                       std::span<T> dx) {
  const auto ty = make_taps(in_h, out_h);
  const auto tx = make_taps(in_w, out_w);
#pragma omp parallel for schedule(static)
  for (int p = 0; p < planes; ++p) {
    const T* src = dy.data() + static_cast<std::size_t>(p) * out_h * out_w;
    T* dst = dx.data() + static_cast<std::size_t>(p) * in_h * in_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const Tap& vy = ty[static_cast<std::size_t>(oy)];
      const T fy = static_cast<T>(vy.frac);
      T* r0 = dst + static_cast<std::size_t>(vy.lo) * in_w;
      T* r1 = dst + static_cast<std::size_t>(vy.hi) * in_w;
      for (int ox = 0; ox < out_w; ++ox) {
        const Tap& vx = tx[static_cast<std::size_t>(ox)];
        const T fx = static_cast<T>(vx.frac);
        const T g = src[oy * out_w + ox];
        r0[vx.lo] += g * (T(1) - fy) * (T(1) - fx);
        r0[vx.hi] += g * (T(1) - fy) * fx;
        r1[vx.lo] += g * fy * (T(1) - fx);
        r1[vx.hi] += g * fy * fx;
      }
    }
  }
}

int max_threads() { return omp_get_max_threads(); }

void configure_threads_from_env() {
  if (const char* env = std::getenv("EDMB_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) omp_set_num_threads(std::min(n, omp_get_num_procs()));
  }
}

template void bilinear_forward<float>(int, int, int, int, int, std::span<const float>, std::span<float>);
template void bilinear_forward<double>(int, int, int, int, int, std::span<const double>, std::span<double>);
template void bilinear_backward<float>(int, int, int, int, int, std::span<const float>, std::span<float>);
template void bilinear_backward<double>(int, int, int, int, int, std::span<const double>, std::span<double>);

}  // namespace edmb::kernels
