// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <vector>

#include "edmb/kernels.hpp"

namespace edmb::kernels {

namespace {
// Below this |z| the (exp(z) - 1) / z quotient switches to its Taylor series.
constexpr double kTaylorThreshold = 1e-4;
// Below this |z| the gain derivative uses its power series.
constexpr double kSeriesThreshold = 0.25;
}  // namespace

template <typename T>
T zoh_gain(T z) {
  if (std::abs(z) < T(kTaylorThreshold)) return T(1) + z / T(2) + z * z / T(6);
  return std::expm1(z) / z;
}

template <typename T>
T zoh_gain_derivative(T z) {
  // Series sum_{k>=1} k z^{k-1} / (k+1)! avoids the cancellation in
  // (e^z - gain(z)) / z near zero.
  if (std::abs(z) < T(kSeriesThreshold)) {
    T term = T(1);  // z^{k-1}
    T fact = T(2);  // (k+1)!
    T sum = T(0);
    for (int k = 1; k <= 10; ++k) {
      sum += T(k) * term / fact;
      term *= z;
      fact *= T(k + 2);
    }
    return sum;
  }
  return (std::exp(z) - std::expm1(z) / z) / z;
}

template <typename T>
void selective_scan_forward(const ScanGeometry& g, std::span<const T> x, std::span<const T> delta,
                            std::span<const T> a, std::span<const T> b, std::span<const T> c,
                            std::span<T> y, std::span<T> states) {
  const int M = g.length, D = g.channels, N = g.state_dim;
  const bool keep = !states.empty();
#pragma omp parallel for collapse(2) schedule(static)
  for (int bi = 0; bi < g.batch; ++bi) {
    for (int d = 0; d < D; ++d) {
      std::vector<T> h(N, T(0));
      const T* ad = a.data() + static_cast<std::size_t>(d) * N;
      for (int s = 0; s < M; ++s) {
        const int t = g.reverse ? M - 1 - s : s;
        const std::size_t td = (static_cast<std::size_t>(bi) * M + t) * D + d;
        const T dt = delta[td];
        const T xt = x[td];
        const T* bt = b.data() + (static_cast<std::size_t>(bi) * M + t) * N;
        const T* ct = c.data() + (static_cast<std::size_t>(bi) * M + t) * N;
        T acc = T(0);
        for (int n = 0; n < N; ++n) {
          const T z = dt * ad[n];
          // one expm1 gives both the decay and the input gain
          const T em1 = std::expm1(z);
          const T abar = em1 + T(1);
          const T gain = std::abs(z) < T(kTaylorThreshold) ? T(1) + z / T(2) + z * z / T(6) : em1 / z;
          h[n] = abar * h[n] + gain * dt * bt[n] * xt;
          acc += ct[n] * h[n];
        }
        y[td] = acc;
        if (keep) {
          T* dst = states.data() + td * N;
          for (int n = 0; n < N; ++n) dst[n] = h[n];
        }
      }
    }
  }
}

template <typename T>
void selective_scan_backward(const ScanGeometry& g, std::span<const T> x, std::span<const T> delta,
                             std::span<const T> a, std::span<const T> b, std::span<const T> c,
                             std::span<const T> states, std::span<const T> dy, std::span<T> dx,
                             std::span<T> ddelta, std::span<T> da, std::span<T> db,
                             std::span<T> dc) {
  const int M = g.length, D = g.channels, N = g.state_dim;
  // dA is shared across the batch; per-item partials are reduced in order.
  std::vector<T> da_parts(da.empty() ? 0 : static_cast<std::size_t>(g.batch) * D * N, T(0));
#pragma omp parallel for schedule(static)
  for (int bi = 0; bi < g.batch; ++bi) {
    std::vector<T> dh(N);
    for (int d = 0; d < D; ++d) {
      std::fill(dh.begin(), dh.end(), T(0));
      const T* ad = a.data() + static_cast<std::size_t>(d) * N;
      T* da_d = da.empty() ? nullptr : da_parts.data() + (static_cast<std::size_t>(bi) * D + d) * N;
      for (int s = M - 1; s >= 0; --s) {
        const int t = g.reverse ? M - 1 - s : s;
        const int prev = g.reverse ? t + 1 : t - 1;
        const bool has_prev = s > 0;
        const std::size_t td = (static_cast<std::size_t>(bi) * M + t) * D + d;
        const std::size_t tn = (static_cast<std::size_t>(bi) * M + t) * N;
        const T dt = delta[td];
        const T xt = x[td];
        const T gy = dy[td];
        const T* ht = states.data() + td * N;
        const T* hp = has_prev ? states.data() + ((static_cast<std::size_t>(bi) * M + prev) * D + d) * N
                               : nullptr;
        T gx = T(0), gdelta = T(0);
        for (int n = 0; n < N; ++n) {
          if (!dc.empty()) dc[tn + n] += gy * ht[n];
          const T gh = dh[n] + gy * c[tn + n];
          const T z = dt * ad[n];
          const T em1 = std::expm1(z);
          const T abar = em1 + T(1);
          const bool tiny = std::abs(z) < T(kTaylorThreshold);
          const T gain = tiny ? T(1) + z / T(2) + z * z / T(6) : em1 / z;
          const T gain_dz = std::abs(z) < T(kSeriesThreshold) ? zoh_gain_derivative(z) : (abar - gain) / z;
          const T bbar = gain * dt * b[tn + n];
          const T h_prev = hp ? hp[n] : T(0);
          gx += gh * bbar;
          const T g_abar = gh * h_prev;
          const T g_bbar = gh * xt;
          const T gz = g_abar * abar + g_bbar * gain_dz * dt * b[tn + n];
          gdelta += gz * ad[n] + g_bbar * gain * b[tn + n];
          if (da_d) da_d[n] += gz * dt;
          if (!db.empty()) db[tn + n] += g_bbar * gain * dt;
          dh[n] = gh * abar;
        }
        if (!dx.empty()) dx[td] += gx;
        if (!ddelta.empty()) ddelta[td] += gdelta;
      }
    }
  }
  if (!da.empty()) {
    for (int bi = 0; bi < g.batch; ++bi) {
      const T* part = da_parts.data() + static_cast<std::size_t>(bi) * D * N;
      for (std::size_t i = 0; i < static_cast<std::size_t>(D) * N; ++i) da[i] += part[i];
    }
  }
}

namespace reference {

template <typename T>
void selective_scan_forward(const ScanGeometry& g, std::span<const T> x, std::span<const T> delta,
                            std::span<const T> a, std::span<const T> b, std::span<const T> c,
                            std::span<T> y) {
  const int M = g.length, D = g.channels, N = g.state_dim;
  auto at = [&](int bi, int t, int d) { return (static_cast<std::size_t>(bi) * M + t) * D + d; };
  auto bn = [&](int bi, int t, int n) { return (static_cast<std::size_t>(bi) * M + t) * N + n; };
  for (int bi = 0; bi < g.batch; ++bi) {
    for (int d = 0; d < D; ++d) {
      std::vector<T> h(N, T(0));
      const int start = g.reverse ? M - 1 : 0;
      const int step = g.reverse ? -1 : 1;
      for (int t = start; t >= 0 && t < M; t += step) {
        T out = T(0);
        for (int n = 0; n < N; ++n) {
          const T abar = std::exp(delta[at(bi, t, d)] * a[d * N + n]);
          const T z = delta[at(bi, t, d)] * a[d * N + n];
          T bbar;
          if (std::abs(z) < T(kTaylorThreshold)) {
            bbar = (T(1) + z / T(2) + z * z / T(6)) * delta[at(bi, t, d)] * b[bn(bi, t, n)];
          } else {
            bbar = (abar - T(1)) / z * delta[at(bi, t, d)] * b[bn(bi, t, n)];
          }
          h[n] = abar * h[n] + bbar * x[at(bi, t, d)];
          out += c[bn(bi, t, n)] * h[n];
        }
        y[at(bi, t, d)] = out;
      }
    }
  }
}

template void selective_scan_forward<float>(const ScanGeometry&, std::span<const float>,
                                            std::span<const float>, std::span<const float>,
                                            std::span<const float>, std::span<const float>,
                                            std::span<float>);
template void selective_scan_forward<double>(const ScanGeometry&, std::span<const double>,
                                             std::span<const double>, std::span<const double>,
                                             std::span<const double>, std::span<const double>,
                                             std::span<double>);

}  // namespace reference

template float zoh_gain<float>(float);
template double zoh_gain<double>(double);
template float zoh_gain_derivative<float>(float);
template double zoh_gain_derivative<double>(double);
template void selective_scan_forward<float>(const ScanGeometry&, std::span<const float>,
                                            std::span<const float>, std::span<const float>,
                                            std::span<const float>, std::span<const float>,
                                            std::span<float>, std::span<float>);
template void selective_scan_forward<double>(const ScanGeometry&, std::span<const double>,
                                             std::span<const double>, std::span<const double>,
                                             std::span<const double>, std::span<const double>,
                                             std::span<double>, std::span<double>);
template void selective_scan_backward<float>(const ScanGeometry&, std::span<const float>,
                                             std::span<const float>, std::span<const float>,
                                             std::span<const float>, std::span<const float>,
                                             std::span<const float>, std::span<const float>,
                                             std::span<float>, std::span<float>, std::span<float>,
                                             std::span<float>, std::span<float>);
template void selective_scan_backward<double>(const ScanGeometry&, std::span<const double>,
                                              std::span<const double>, std::span<const double>,
                                              std::span<const double>, std::span<const double>,
                                              std::span<const double>, std::span<const double>,
                                              std::span<double>, std::span<double>,
                                              std::span<double>, std::span<double>,
                                              std::span<double>);

}  // namespace edmb::kernels
