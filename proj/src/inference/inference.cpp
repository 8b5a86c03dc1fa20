// SPDX-License-Identifier: Apache-2.0

#include "edmb/inference.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "edmb/dataset.hpp"

namespace fs = std::filesystem;

namespace edmb {

namespace {

int mirror(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  return i < n ? i : period - i;
}

}  // namespace

GranularityConfig GranularityConfig::defaults() { return parse("-5:0.5:11"); }

GranularityConfig GranularityConfig::parse(const std::string& text) {
  std::stringstream ss(text);
  std::string a, b, c;
  if (!std::getline(ss, a, ':') || !std::getline(ss, b, ':') || !std::getline(ss, c) || c.find(':') != std::string::npos) {
    throw Error("gamma list '" + text + "' must look like start:step:count");
  }
  double start = 0, step = 0;
  long count = 0;
  try {
    std::size_t p1 = 0, p2 = 0, p3 = 0;
    start = std::stod(a, &p1);
    step = std::stod(b, &p2);
    count = std::stol(c, &p3);
    if (p1 != a.size() || p2 != b.size() || p3 != c.size()) throw std::invalid_argument(text);
  } catch (const std::exception&) {
    throw Error("gamma list '" + text + "' must look like start:step:count");
  }
  if (count < 1) throw Error("gamma list '" + text + "' needs a positive count");
  GranularityConfig g;
  for (long n = 0; n < count; ++n) g.gammas.push_back(start + step * static_cast<double>(n));
  return g;
}

template <typename T>
Tensor<T> image_tensor(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw Error("image must have 1 or 3 channels");
  Tensor<T> t({1, 3, img.height, img.width});
  for (int c = 0; c < 3; ++c) {
    const int src = img.channels == 1 ? 0 : c;
    for (std::size_t i = 0; i < img.plane(); ++i) t[c * img.plane() + i] = static_cast<T>(img.data[src * img.plane() + i]);
  }
  return t;
}

template <typename T>
EdgeDistribution<T> predict_distribution(EdmbModel<T>& model, const Tensor<T>& image) {
  if (image.rank() != 4 || image.dim(1) != 3) throw Error("predict: expected [B,3,H,W] input, got " + shape_str(image.shape()));
  NoGradGuard guard;
  const int B = image.dim(0), H = image.dim(2), W = image.dim(3);
  const int unit = model.cfg.size_unit();
  const int Hp = round_up(H, unit), Wp = round_up(W, unit);
  Tensor<T> input = image;
  if (Hp != H || Wp != W) {
    input = Tensor<T>({B, 3, Hp, Wp});
    for (int b = 0; b < B; ++b) {
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < Hp; ++y)
          for (int x = 0; x < Wp; ++x) {
            input[((static_cast<std::size_t>(b) * 3 + c) * Hp + y) * Wp + x] =
                image[((static_cast<std::size_t>(b) * 3 + c) * H + mirror(y, H)) * W + mirror(x, W)];
          }
    }
  }
  EdgeDistribution<T> d = model.forward_eval(input, false);
  if (Hp != H || Wp != W) {
    d.mu = crop2d(d.mu, 0, 0, H, W);
    d.var = crop2d(d.var, 0, 0, H, W);
  }
  return d;
}

template <typename T>
Tensor<T> sample_granularity(const EdgeDistribution<T>& dist, double gamma, bool sigma_form) {
  if (!dist.mu.defined() || !dist.var.defined() || dist.mu.shape() != dist.var.shape()) {
    throw Error("sample_granularity: distribution needs matching mu and var");
  }
  Tensor<T> out(dist.mu.shape());
  const T g = static_cast<T>(gamma);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T spread = sigma_form ? std::sqrt(std::max(dist.var[i], T(0))) : dist.var[i];
    out[i] = sigmoid_value(gamma == 0.0 ? dist.mu[i] : dist.mu[i] + g * spread);
  }
  return out;
}

std::string gamma_label(double gamma) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", gamma == 0.0 ? 0.0 : gamma);
  return buf;
}

template <typename T>
Image map_to_image(const Tensor<T>& map, int index) {
  if (map.rank() != 4 || map.dim(1) != 1) throw Error("expected a [B,1,H,W] map");
  const int H = map.dim(2), W = map.dim(3);
  Image img(1, H, W);
  const std::size_t off = static_cast<std::size_t>(index) * H * W;
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(map[off + i]);
  return img;
}

template <typename T>
std::vector<std::string> granularity_sweep(const EdgeDistribution<T>& dist, const GranularityConfig& cfg,
                                           const std::string& out_dir, const std::string& id) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw Error("cannot create " + out_dir + ": " + ec.message());
  std::vector<std::string> paths;
  for (double g : cfg.gammas) {
    const std::string path = (fs::path(out_dir) / (id + "_g" + gamma_label(g) + ".pgm")).string();
    write_netpbm(path, map_to_image(sample_granularity(dist, g, cfg.sigma_form)));
    paths.push_back(path);
  }
  return paths;
}

#define EDMB_INSTANTIATE_INF(T)                                                                           \
  template Tensor<T> image_tensor<T>(const Image&);                                                       \
  template EdgeDistribution<T> predict_distribution<T>(EdmbModel<T>&, const Tensor<T>&);                  \
  template Tensor<T> sample_granularity<T>(const EdgeDistribution<T>&, double, bool);                     \
  template std::vector<std::string> granularity_sweep<T>(const EdgeDistribution<T>&, const GranularityConfig&, \
                                                         const std::string&, const std::string&);         \
  template Image map_to_image<T>(const Tensor<T>&, int);

EDMB_INSTANTIATE_INF(float)
EDMB_INSTANTIATE_INF(double)

}  // namespace edmb
