// SPDX-License-Identifier: Apache-2.0

#include "edmb/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "edmb/tensor.hpp"

namespace fs = std::filesystem;

namespace edmb {

std::vector<std::string> read_list_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open list file " + path);
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(is, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.pop_back();
    std::size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos) continue;
    line = line.substr(start);
    if (line[0] == '#') continue;
    ids.push_back(line);
  }
  return ids;
}

namespace {

Image binarize_label(const Image& raw) {
  Image out(1, raw.height, raw.width);
  for (int y = 0; y < raw.height; ++y)
    for (int x = 0; x < raw.width; ++x) {
      float v = 0;
      for (int c = 0; c < raw.channels; ++c) v = std::max(v, raw.at(c, y, x));
      out.at(0, y, x) = v >= 128.0f / 255.0f ? 1.0f : 0.0f;
    }
  return out;
}

}  // namespace

std::vector<Image> load_label_set(const std::string& dir, const std::string& id) {
  const fs::path base(dir);
  std::vector<fs::path> label_paths;
  for (const char* ext : {".pgm", ".png"}) {
    const fs::path single = base / (id + ext);
    if (fs::is_regular_file(single)) {
      label_paths.push_back(single);
      break;
    }
  }
  const fs::path multi = base / id;
  if (label_paths.empty() && fs::is_directory(multi)) {
    for (const auto& e : fs::directory_iterator(multi)) {
      const auto ext = e.path().extension().string();
      if (e.is_regular_file() && (ext == ".pgm" || ext == ".png")) label_paths.push_back(e.path());
    }
    std::sort(label_paths.begin(), label_paths.end());
  }
  if (label_paths.empty()) throw Error("sample " + id + ": no label maps under " + base.string());
  std::vector<Image> out;
  for (const auto& lp : label_paths) {
    out.push_back(binarize_label(read_image(lp.string())));
    if (out.back().height != out.front().height || out.back().width != out.front().width) {
      throw Error("sample " + id + ": annotator maps differ in size");
    }
  }
  return out;
}

std::vector<DatasetSample> load_dataset(const std::string& root, const std::string& list_file) {
  std::vector<DatasetSample> out;
  const fs::path base(root);
  for (const auto& id : read_list_file(list_file)) {
    DatasetSample s;
    s.id = id;
    fs::path img_path;
    for (const char* ext : {".ppm", ".png", ".pgm"}) {
      fs::path p = base / "images" / (id + ext);
      if (fs::exists(p)) {
        img_path = p;
        break;
      }
    }
    if (img_path.empty()) throw Error("sample " + id + ": no image under " + (base / "images").string());
    Image img = read_image(img_path.string());
    if (img.channels == 1) {
      Image rgb(3, img.height, img.width);
      for (int c = 0; c < 3; ++c) std::copy(img.data.begin(), img.data.end(), rgb.data.begin() + c * img.plane());
      img = std::move(rgb);
    }
    s.image = std::move(img);
    s.labels = load_label_set((base / "labels").string(), id);
    for (const auto& lab : s.labels) {
      if (lab.height != s.image.height || lab.width != s.image.width) {
        throw Error("sample " + id + ": label size " + std::to_string(lab.height) + "x" + std::to_string(lab.width) +
                    " differs from image " + std::to_string(s.image.height) + "x" + std::to_string(s.image.width));
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

AugmentRecipe parse_augment_recipe(const std::string& s) {
  if (s == "none") return AugmentRecipe::none;
  if (s == "bsds") return AugmentRecipe::bsds;
  if (s == "nyud") return AugmentRecipe::nyud;
  if (s == "biped") return AugmentRecipe::biped;
  throw Error("unknown augmentation recipe '" + s + "' (expected none|bsds|nyud|biped)");
}

std::string to_string(AugmentRecipe r) {
  switch (r) {
    case AugmentRecipe::none: return "none";
    case AugmentRecipe::bsds: return "bsds";
    case AugmentRecipe::nyud: return "nyud";
    case AugmentRecipe::biped: return "biped";
  }
  return "none";
}

AugmentDraw draw_augmentation(AugmentRecipe recipe, Rng& rng) {
  AugmentDraw d;
  static const double scales[] = {0.5, 1.0, 1.5};
  static const double gammas[] = {0.7, 1.0, 1.3};
  switch (recipe) {
    case AugmentRecipe::none:
      break;
    case AugmentRecipe::bsds: {
      const int f = rng.index(4);
      d.hflip = f & 1;
      d.vflip = f & 2;
      d.angle_deg = 360.0 * rng.index(25) / 25.0;
      break;
    }
    case AugmentRecipe::nyud:
      d.hflip = rng.index(2) == 1;
      d.scale = scales[rng.index(3)];
      d.angle_deg = 90.0 * rng.index(4);
      break;
    case AugmentRecipe::biped:
      d.hflip = rng.index(2) == 1;
      d.scale = scales[rng.index(3)];
      d.angle_deg = 360.0 * rng.index(16) / 16.0;
      d.gamma = gammas[rng.index(3)];
      break;
  }
  return d;
}

Image flip_horizontal(const Image& img) {
  Image out(img.channels, img.height, img.width);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
  return out;
}

Image flip_vertical(const Image& img) {
  Image out(img.channels, img.height, img.width);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, img.height - 1 - y, x);
  return out;
}

Image rotate(const Image& img, double angle_deg, float fill) {
  const double turns = angle_deg / 90.0;
  const int H = img.height, W = img.width;
  // Quarter turns of square frames are exact permutations.
  if (H == W && turns == std::round(turns)) {
    const int k = ((static_cast<int>(std::round(turns)) % 4) + 4) % 4;
    Image out(img.channels, H, W);
    for (int c = 0; c < img.channels; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          int sy = y, sx = x;
          // counter-clockwise: output (y, x) reads input (x, W-1-y) per quarter turn
          for (int i = 0; i < k; ++i) {
            const int ny = sx, nx = W - 1 - sy;
            sy = ny;
            sx = nx;
          }
          out.at(c, y, x) = img.at(c, sy, sx);
        }
    return out;
  }
  const double th = angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  const double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
  Image out(img.channels, H, W, fill);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      // inverse map of a counter-clockwise rotation (image y axis points down)
      const double dx = x - cx, dy = y - cy;
      const double sx = cs * dx - sn * dy + cx;
      const double sy = sn * dx + cs * dy + cy;
      if (sx < -0.5 || sy < -0.5 || sx > W - 0.5 || sy > H - 0.5) continue;
      const double fx = std::clamp(sx, 0.0, W - 1.0), fy = std::clamp(sy, 0.0, H - 1.0);
      const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
      const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      const double ax = fx - x0, ay = fy - y0;
      for (int c = 0; c < img.channels; ++c) {
        const double v = (1 - ay) * ((1 - ax) * img.at(c, y0, x0) + ax * img.at(c, y0, x1)) +
                         ay * ((1 - ax) * img.at(c, y1, x0) + ax * img.at(c, y1, x1));
        out.at(c, y, x) = static_cast<float>(v);
      }
    }
  return out;
}

Image resize_image(const Image& img, int out_h, int out_w) {
  Image out(img.channels, out_h, out_w);
  auto tap = [](int i, int in, int outn, int& lo, int& hi, double& f) {
    double s = (i + 0.5) * in / outn - 0.5;
    if (s < 0) s = 0;
    lo = std::min(static_cast<int>(s), in - 1);
    hi = std::min(lo + 1, in - 1);
    f = s - lo;
  };
  for (int y = 0; y < out_h; ++y) {
    int y0, y1;
    double fy;
    tap(y, img.height, out_h, y0, y1, fy);
    for (int x = 0; x < out_w; ++x) {
      int x0, x1;
      double fx;
      tap(x, img.width, out_w, x0, x1, fx);
      for (int c = 0; c < img.channels; ++c) {
        const double v = (1 - fy) * ((1 - fx) * img.at(c, y0, x0) + fx * img.at(c, y0, x1)) +
                         fy * ((1 - fx) * img.at(c, y1, x0) + fx * img.at(c, y1, x1));
        out.at(c, y, x) = static_cast<float>(v);
      }
    }
  }
  return out;
}

namespace {

Image geometric(const Image& img, const AugmentDraw& d, float fill) {
  Image out = img;
  if (d.hflip) out = flip_horizontal(out);
  if (d.vflip) out = flip_vertical(out);
  if (d.scale != 1.0) {
    const int h = std::max(1, static_cast<int>(std::lround(out.height * d.scale)));
    const int w = std::max(1, static_cast<int>(std::lround(out.width * d.scale)));
    out = resize_image(out, h, w);
  }
  if (d.angle_deg != 0.0) out = rotate(out, d.angle_deg, fill);
  return out;
}

}  // namespace

Image apply_label_transform(const Image& label, const AugmentDraw& d) {
  if (d.identity()) return label;
  // Edge and ignore indicators are interpolated separately, then re-binarised.
  Image edge(1, label.height, label.width), ign(1, label.height, label.width);
  for (std::size_t i = 0; i < label.data.size(); ++i) {
    edge.data[i] = label.data[i] == 1.0f ? 1.0f : 0.0f;
    ign.data[i] = label.data[i] == kIgnore ? 1.0f : 0.0f;
  }
  Image e2 = geometric(edge, d, 0.0f);
  Image i2 = geometric(ign, d, 1.0f);
  Image out(1, e2.height, e2.width);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    if (i2.data[i] >= 0.5f) out.data[i] = kIgnore;
    else out.data[i] = e2.data[i] >= 0.5f ? 1.0f : 0.0f;
  }
  return out;
}

DatasetSample apply_augmentation(const DatasetSample& s, const AugmentDraw& d) {
  if (d.identity()) return s;
  DatasetSample out;
  out.id = s.id;
  out.image = geometric(s.image, d, 0.0f);
  if (d.gamma != 1.0) {
    for (auto& v : out.image.data) v = static_cast<float>(std::pow(std::max(v, 0.0f), d.gamma));
  }
  for (const auto& l : s.labels) out.labels.push_back(apply_label_transform(l, d));
  return out;
}

DatasetSample augment(const DatasetSample& s, AugmentRecipe recipe, Rng& rng) {
  return apply_augmentation(s, draw_augmentation(recipe, rng));
}

LabelMode parse_label_mode(const std::string& s) {
  if (s == "random") return LabelMode::random;
  if (s == "mixed") return LabelMode::mixed;
  throw Error("unknown label mode '" + s + "' (expected random|mixed)");
}

SelectedLabel select_label(const std::vector<Image>& labels, LabelMode mode, Rng& rng, double threshold) {
  if (labels.empty()) throw Error("select_label: no label maps");
  const int H = labels[0].height, W = labels[0].width;
  for (const auto& l : labels) {
    if (l.height != H || l.width != W) throw Error("select_label: label maps differ in size");
  }
  SelectedLabel out{Image(1, H, W), Image(1, H, W, 1.0f)};
  const std::size_t n = out.y.data.size();
  if (mode == LabelMode::random || labels.size() == 1) {
    const auto& pick = labels[static_cast<std::size_t>(labels.size() == 1 ? 0 : rng.index(static_cast<int>(labels.size())))];
    for (std::size_t i = 0; i < n; ++i) {
      if (pick.data[i] == kIgnore) out.mask.data[i] = 0.0f;
      else out.y.data[i] = pick.data[i];
    }
    return out;
  }
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    bool ignored = false;
    for (const auto& l : labels) {
      if (l.data[i] == kIgnore) ignored = true;
      s += l.data[i] == 1.0f ? 1.0 : 0.0;
    }
    const double mean = s / static_cast<double>(labels.size());
    if (ignored) out.mask.data[i] = 0.0f;
    else if (mean >= threshold) out.y.data[i] = 1.0f;
    else if (mean > 0.0) out.mask.data[i] = 0.0f;
  }
  return out;
}

namespace {

int mirror(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

Image reflect_pad(const Image& img, int out_h, int out_w) {
  if (out_h < img.height || out_w < img.width) throw Error("reflect_pad: target smaller than image");
  Image out(img.channels, out_h, out_w);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x) out.at(c, y, x) = img.at(c, mirror(y, img.height), mirror(x, img.width));
  return out;
}

Image constant_pad(const Image& img, int out_h, int out_w, float value) {
  if (out_h < img.height || out_w < img.width) throw Error("constant_pad: target smaller than image");
  Image out(img.channels, out_h, out_w, value);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, x);
  return out;
}

int round_up(int v, int unit) { return (v + unit - 1) / unit * unit; }

}  // namespace edmb
