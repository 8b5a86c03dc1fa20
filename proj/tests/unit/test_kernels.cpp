// SPDX-License-Identifier: Apache-2.0
//
// OpenMP kernels against the serial reference loops on random geometries.

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "edmb/kernels.hpp"
#include "edmb/rng.hpp"

namespace edmb::kernels {
namespace {

std::vector<double> normals(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

TEST(ConvKernel, ParallelMatchesReference) {
  Rng rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    ConvGeometry g;
    g.groups = 1 + rng.index(2);
    g.batch = 1 + rng.index(3);
    g.in_channels = g.groups * (1 + rng.index(3));
    g.out_channels = g.groups * (1 + rng.index(3));
    g.kernel_h = g.kernel_w = 1 + 2 * rng.index(2);
    g.padding = rng.index(2);
    g.stride = 1 + rng.index(2);
    // sizes that give an integral output
    const int out = 2 + rng.index(5);
    g.height = (out - 1) * g.stride + g.kernel_h - 2 * g.padding;
    g.width = g.height;
    if (g.height < 1) continue;
    const std::size_t nx = static_cast<std::size_t>(g.batch) * g.in_channels * g.height * g.width;
    const std::size_t nw = static_cast<std::size_t>(g.out_channels) * g.in_per_group() * g.kernel_h * g.kernel_w;
    const std::size_t ny = static_cast<std::size_t>(g.batch) * g.out_channels * g.out_height() * g.out_width();
    const auto x = normals(rng, nx), w = normals(rng, nw), b = normals(rng, g.out_channels), dy = normals(rng, ny);

    std::vector<double> y1(ny), y2(ny);
    conv2d_forward<double>(g, x, w, b, y1);
    reference::conv2d_forward<double>(g, x, w, b, y2);
    for (std::size_t i = 0; i < ny; ++i) ASSERT_NEAR(y1[i], y2[i], 1e-12) << "trial " << trial;

    std::vector<double> dx1(nx), dw1(nw), db1(g.out_channels), dx2(nx), dw2(nw), db2(g.out_channels);
    conv2d_backward<double>(g, x, w, dy, dx1, dw1, db1);
    reference::conv2d_backward<double>(g, x, w, dy, dx2, dw2, db2);
    for (std::size_t i = 0; i < nx; ++i) ASSERT_NEAR(dx1[i], dx2[i], 1e-12);
    for (std::size_t i = 0; i < nw; ++i) ASSERT_NEAR(dw1[i], dw2[i], 1e-12);
    for (std::size_t i = 0; i < db1.size(); ++i) ASSERT_NEAR(db1[i], db2[i], 1e-12);
  }
}

TEST(ScanKernel, ParallelMatchesReference) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    ScanGeometry g;
    g.batch = 1 + rng.index(3);
    g.length = 1 + rng.index(20);
    g.channels = 1 + rng.index(5);
    g.state_dim = 1 + rng.index(8);
    g.reverse = rng.index(2) == 1;
    const std::size_t nt = static_cast<std::size_t>(g.batch) * g.length;
    const auto x = normals(rng, nt * g.channels);
    std::vector<double> delta(nt * g.channels), a(static_cast<std::size_t>(g.channels) * g.state_dim);
    for (auto& d : delta) d = rng.uniform(0.01, 1.0);
    for (auto& v : a) v = -rng.uniform(0.1, 2.0);
    const auto b = normals(rng, nt * g.state_dim), c = normals(rng, nt * g.state_dim);
    std::vector<double> y1(x.size()), y2(x.size());
    selective_scan_forward<double>(g, x, delta, a, b, c, y1, {});
    reference::selective_scan_forward<double>(g, x, delta, a, b, c, y2);
    for (std::size_t i = 0; i < y1.size(); ++i) ASSERT_NEAR(y1[i], y2[i], 1e-12) << "trial " << trial;
  }
}

TEST(ScanKernel, LongSequenceStaysBounded) {
  ScanGeometry g;
  g.length = 4096;
  g.channels = 2;
  g.state_dim = 8;
  Rng rng(9);
  std::vector<float> x(static_cast<std::size_t>(g.length) * g.channels), delta(x.size());
  std::vector<float> b(static_cast<std::size_t>(g.length) * g.state_dim), c(b.size());
  std::vector<float> a(static_cast<std::size_t>(g.channels) * g.state_dim);
  for (auto& v : x) v = static_cast<float>(rng.uniform(-1, 1));
  for (auto& v : delta) v = static_cast<float>(rng.uniform(0.001, 2.0));
  for (auto& v : a) v = static_cast<float>(-rng.uniform(0.01, 1.0));
  for (auto& v : b) v = static_cast<float>(rng.uniform(-1, 1));
  for (auto& v : c) v = static_cast<float>(rng.uniform(-1, 1));
  std::vector<float> y(x.size());
  selective_scan_forward<float>(g, x, delta, a, b, c, y, {});
  // |h| <= sum_k |b_bar| |x| a_bar^k <= max|b_bar| / (1 - max a_bar); with
  // b_bar = (1 - a_bar)/|a| * |b| this is bounded by max |b| / min |a|.
  const double bound = g.state_dim * 1.0 / 0.01;
  for (float v : y) {
    ASSERT_TRUE(std::isfinite(v));
    ASSERT_LE(std::abs(v), bound);
  }
}

TEST(ZohGain, SeriesAndLimit) {
  EXPECT_DOUBLE_EQ(zoh_gain<double>(0.0), 1.0);
  for (double z : {-3.0, -1e-3, -1e-5, 1e-5, 0.7}) EXPECT_NEAR(zoh_gain<double>(z), std::expm1(z) / z, 1e-12) << z;
  for (double z : {-2.0, -1e-5, 0.0, 1e-3}) {
    const double h = 1e-6;
    const double fd = (zoh_gain<double>(z + h) - zoh_gain<double>(z - h)) / (2 * h);
    EXPECT_NEAR(zoh_gain_derivative<double>(z), fd, 1e-7) << z;
  }
}

TEST(BilinearKernel, AdjointIdentity) {
  // <up(x), y> == <x, up^T(y)> for the forward/backward pair.
  Rng rng(12);
  const int P = 2, h = 3, w = 5, H = 7, W = 11;
  const auto x = normals(rng, static_cast<std::size_t>(P) * h * w);
  const auto y = normals(rng, static_cast<std::size_t>(P) * H * W);
  std::vector<double> ux(y.size()), ty(x.size(), 0.0);
  bilinear_forward<double>(P, h, w, H, W, x, ux);
  bilinear_backward<double>(P, h, w, H, W, y, ty);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < y.size(); ++i) lhs += ux[i] * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * ty[i];
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

}  // namespace
}  // namespace edmb::kernels
