// SPDX-License-Identifier: Apache-2.0
//
// OpenMP kernels against their serial reference loops, plus one whole-model
// forward pass.

#include <benchmark/benchmark.h>

#include <vector>

#include "edmb/kernels.hpp"
#include "edmb/model.hpp"
#include "edmb/rng.hpp"

namespace k = edmb::kernels;

namespace {

std::vector<float> noise(std::size_t n, std::uint64_t seed) {
  edmb::Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

k::ConvGeometry conv_case(const benchmark::State& s) {
  k::ConvGeometry g;
  g.batch = 2;
  g.in_channels = static_cast<int>(s.range(0));
  g.out_channels = static_cast<int>(s.range(0));
  g.height = g.width = static_cast<int>(s.range(1));
  g.kernel_h = g.kernel_w = 3;
  g.padding = 1;
  return g;
}

std::size_t conv_macs(const k::ConvGeometry& g) {
  return static_cast<std::size_t>(g.batch) * g.out_channels * g.out_height() * g.out_width() * g.in_per_group() *
         g.kernel_h * g.kernel_w;
}

template <bool Parallel>
void BM_ConvForward(benchmark::State& s) {
  const auto g = conv_case(s);
  const auto x = noise(static_cast<std::size_t>(g.batch) * g.in_channels * g.height * g.width, 1);
  const auto w = noise(static_cast<std::size_t>(g.out_channels) * g.in_per_group() * 9, 2);
  const auto b = noise(static_cast<std::size_t>(g.out_channels), 3);
  std::vector<float> y(static_cast<std::size_t>(g.batch) * g.out_channels * g.out_height() * g.out_width());
  for (auto _ : s) {
    if constexpr (Parallel) k::conv2d_forward<float>(g, x, w, b, y);
    else k::reference::conv2d_forward<float>(g, x, w, b, y);
    benchmark::DoNotOptimize(y.data());
  }
  s.counters["GMAC/s"] = benchmark::Counter(static_cast<double>(conv_macs(g)) * s.iterations() / 1e9,
                                            benchmark::Counter::kIsRate);
}

template <bool Parallel>
void BM_ConvBackward(benchmark::State& s) {
  const auto g = conv_case(s);
  const auto x = noise(static_cast<std::size_t>(g.batch) * g.in_channels * g.height * g.width, 1);
  const auto w = noise(static_cast<std::size_t>(g.out_channels) * g.in_per_group() * 9, 2);
  const auto dy = noise(static_cast<std::size_t>(g.batch) * g.out_channels * g.out_height() * g.out_width(), 3);
  std::vector<float> dx(x.size()), dw(w.size()), db(static_cast<std::size_t>(g.out_channels));
  for (auto _ : s) {
    if constexpr (Parallel) k::conv2d_backward<float>(g, x, w, dy, dx, dw, db);
    else k::reference::conv2d_backward<float>(g, x, w, dy, dx, dw, db);
    benchmark::DoNotOptimize(dx.data());
  }
}

template <bool Parallel>
void BM_ScanForward(benchmark::State& s) {
  k::ScanGeometry g;
  g.batch = 2;
  g.length = static_cast<int>(s.range(0));
  g.channels = 96;
  g.state_dim = 16;
  const std::size_t bmd = static_cast<std::size_t>(g.batch) * g.length * g.channels;
  const std::size_t bmn = static_cast<std::size_t>(g.batch) * g.length * g.state_dim;
  const auto x = noise(bmd, 1), b = noise(bmn, 2), c = noise(bmn, 3);
  std::vector<float> delta(bmd, 0.05f), a(static_cast<std::size_t>(g.channels) * g.state_dim, -1.0f), y(bmd);
  for (auto _ : s) {
    if constexpr (Parallel) k::selective_scan_forward<float>(g, x, delta, a, b, c, y, {});
    else k::reference::selective_scan_forward<float>(g, x, delta, a, b, c, y);
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_Bilinear(benchmark::State& s) {
  const int n = static_cast<int>(s.range(0));
  const auto x = noise(static_cast<std::size_t>(64) * n * n, 1);
  std::vector<float> y(static_cast<std::size_t>(64) * 4 * n * n);
  for (auto _ : s) {
    k::bilinear_forward<float>(64, n, n, 2 * n, 2 * n, x, y);
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_ModelForward(benchmark::State& s) {
  edmb::ModelConfig cfg;  // default architecture
  edmb::EdmbModel<float> model(cfg);
  const int side = static_cast<int>(s.range(0));
  const auto img = edmb::Rng(4).uniform_tensor<float>({1, 3, side, side}, 0, 1);
  edmb::NoGradGuard guard;
  for (auto _ : s) benchmark::DoNotOptimize(model.forward_eval(img, false).mu.vec().data());
}

}  // namespace

BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/omp")->Args({32, 64})->Args({64, 128})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/reference")->Args({32, 64})->Args({64, 128})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackward<true>)->Name("conv_backward/omp")->Args({32, 64})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackward<false>)->Name("conv_backward/reference")->Args({32, 64})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ScanForward<true>)->Name("scan_forward/omp")->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ScanForward<false>)->Name("scan_forward/reference")->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Bilinear)->Name("bilinear_forward")->Arg(32)->Arg(80)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ModelForward)->Name("model_forward")->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
