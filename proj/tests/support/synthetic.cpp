// SPDX-License-Identifier: Apache-2.0

#include "synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace edmb::testing {

std::vector<DatasetSample> make_shape_corpus(const ShapeCorpusOptions& opts) {
  Rng rng(opts.seed);
  std::vector<DatasetSample> out;
  const int S = opts.size;
  for (int k = 0; k < opts.count; ++k) {
    std::vector<int> region(static_cast<std::size_t>(S) * S, 0);
    std::vector<std::array<float, 3>> colour{{static_cast<float>(rng.uniform(0.1, 0.3)),
                                             static_cast<float>(rng.uniform(0.1, 0.3)),
                                             static_cast<float>(rng.uniform(0.1, 0.3))}};
    for (int s = 1; s <= opts.shapes; ++s) {
      colour.push_back({static_cast<float>(rng.uniform(0.45, 0.95)), static_cast<float>(rng.uniform(0.45, 0.95)),
                        static_cast<float>(rng.uniform(0.45, 0.95))});
      const bool disc = rng.uniform() < 0.5;
      const double cy = rng.uniform(0.2 * S, 0.8 * S), cx = rng.uniform(0.2 * S, 0.8 * S);
      const double ry = rng.uniform(0.1 * S, 0.25 * S), rx = disc ? ry : rng.uniform(0.1 * S, 0.25 * S);
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
          const bool inside = disc ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
          if (inside) region[static_cast<std::size_t>(y) * S + x] = s;
        }
    }
    DatasetSample smp;
    smp.id = "shape" + std::to_string(k);
    smp.image = Image(3, S, S);
    Image label(1, S, S);
    auto reg = [&](int y, int x) { return region[static_cast<std::size_t>(y) * S + x]; };
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const int r = reg(y, x);
        for (int c = 0; c < 3; ++c) {
          const float v = colour[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] +
                          static_cast<float>(opts.noise * rng.normal());
          smp.image.at(c, y, x) = std::clamp(v, 0.0f, 1.0f);
        }
        // Boundary pixels sit on the side of the upper (later) region.
        bool edge = false;
        const int nb[4][2] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
        for (const auto& d : nb) {
          const int yy = y + d[0], xx = x + d[1];
          if (yy < 0 || xx < 0 || yy >= S || xx >= S) continue;
          if (reg(yy, xx) < r) edge = true;
        }
        label.at(0, y, x) = edge ? 1.0f : 0.0f;
      }
    smp.labels.push_back(std::move(label));
    out.push_back(std::move(smp));
  }
  return out;
}

void write_corpus(const std::vector<DatasetSample>& corpus, const std::string& root) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(root) / "images");
  fs::create_directories(fs::path(root) / "labels");
  std::ofstream list(fs::path(root) / "list.txt");
  for (const auto& s : corpus) {
    write_netpbm((fs::path(root) / "images" / (s.id + ".ppm")).string(), s.image);
    write_netpbm((fs::path(root) / "labels" / (s.id + ".pgm")).string(), s.labels.at(0));
    list << s.id << "\n";
  }
}

}  // namespace edmb::testing
