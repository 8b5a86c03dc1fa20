// SPDX-License-Identifier: Apache-2.0
//
// Raw compute kernels on contiguous buffers. The top-level namespace holds
// the OpenMP-parallel versions used by the autodiff ops; kernels::reference
// holds straightforward serial loops kept as test oracles and benchmark
// baselines. All layouts are row-major NCHW or [B, M, D].

#pragma once

#include <cstddef>
#include <span>

namespace edmb::kernels {

struct ConvGeometry {
  int batch = 1;
  int in_channels = 1;
  int height = 1;
  int width = 1;
  int out_channels = 1;
  int kernel_h = 1;
  int kernel_w = 1;
  int stride = 1;
  int padding = 0;
  int groups = 1;

  int out_height() const { return (height + 2 * padding - kernel_h) / stride + 1; }
  int out_width() const { return (width + 2 * padding - kernel_w) / stride + 1; }
  int in_per_group() const { return in_channels / groups; }
  int out_per_group() const { return out_channels / groups; }
};

/// y[B,Co,Ho,Wo] = conv(x, w) + bias. bias may be empty.
template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                    std::span<const T> bias, std::span<T> y);

/// Accumulates into dx, dw, db; any of them may be empty to skip.
template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                     std::span<const T> dy, std::span<T> dx, std::span<T> dw, std::span<T> db);

struct ScanGeometry {
  int batch = 1;
  int length = 1;     // M tokens
  int channels = 1;   // D
  int state_dim = 1;  // N
  bool reverse = false;
};

/// ZOH input gain (exp(z) - 1) / z with the small-|z| Taylor branch.
template <typename T>
T zoh_gain(T z);

/// d/dz of zoh_gain.
template <typename T>
T zoh_gain_derivative(T z);

/// Selective scan over [B, M, D] inputs with per-token delta [B,M,D],
/// diagonal state matrix A [D,N] and per-token B, C [B,M,N]. When `states`
/// is non-empty it receives every h_t as [B, M, D, N] for the backward pass.
template <typename T>
void selective_scan_forward(const ScanGeometry& g, std::span<const T> x, std::span<const T> delta,
                            std::span<const T> a, std::span<const T> b, std::span<const T> c,
                            std::span<T> y, std::span<T> states);

/// Accumulates gradients for every scan input. `states` must come from the
/// matching forward call.
template <typename T>
void selective_scan_backward(const ScanGeometry& g, std::span<const T> x, std::span<const T> delta,
                             std::span<const T> a, std::span<const T> b, std::span<const T> c,
                             std::span<const T> states, std::span<const T> dy, std::span<T> dx,
                             std::span<T> ddelta, std::span<T> da, std::span<T> db,
                             std::span<T> dc);

/// Bilinear resize with the align-corners=false convention over [P, H, W]
/// planes.
template <typename T>
void bilinear_forward(int planes, int in_h, int in_w, int out_h, int out_w, std::span<const T> x,
                      std::span<T> y);

template <typename T>
void bilinear_backward(int planes, int in_h, int in_w, int out_h, int out_w, std::span<const T> dy,
                       std::span<T> dx);

/// Worker count honouring EDMB_THREADS.
int max_threads();
void configure_threads_from_env();

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                    std::span<const T> bias, std::span<T> y);

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                     std::span<const T> dy, std::span<T> dx, std::span<T> dw, std::span<T> db);

template <typename T>
void selective_scan_forward(const ScanGeometry& g, std::span<const T> x, std::span<const T> delta,
                            std::span<const T> a, std::span<const T> b, std::span<const T> c,
                            std::span<T> y);

}  // namespace reference

}  // namespace edmb::kernels
