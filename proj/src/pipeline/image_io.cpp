// SPDX-License-Identifier: Apache-2.0

#include "edmb/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

#include "edmb/tensor.hpp"

#ifdef EDMB_HAVE_PNG
#include <png.h>
#endif

namespace edmb {

namespace {

bool has_suffix(const std::string& s, const std::string& suf) {
  if (s.size() < suf.size()) return false;
  return std::equal(suf.rbegin(), suf.rend(), s.rbegin(),
                    [](char a, char b) { return std::tolower(a) == std::tolower(b); });
}

// Next header integer, skipping whitespace and '#' comments.
int header_int(std::istream& is, const std::string& path) {
  int c = is.get();
  while (is && (std::isspace(c) || c == '#')) {
    if (c == '#') {
      while (is && c != '\n') c = is.get();
    }
    c = is.get();
  }
  if (!is || !std::isdigit(c)) throw Error(path + ": corrupt Netpbm header");
  long v = 0;
  while (is && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    if (v > (1 << 20)) throw Error(path + ": corrupt Netpbm header (value too large)");
    c = is.get();
  }
  // exactly one whitespace byte follows the last header field
  if (!std::isspace(c)) throw Error(path + ": corrupt Netpbm header");
  return static_cast<int>(v);
}

Image read_netpbm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  char magic[2] = {0, 0};
  is.read(magic, 2);
  if (!is || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
    throw Error(path + ": not a binary PGM/PPM file");
  }
  const int channels = magic[1] == '6' ? 3 : 1;
  const int w = header_int(is, path);
  const int h = header_int(is, path);
  const int maxval = header_int(is, path);
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) throw Error(path + ": corrupt Netpbm header");
  const int bytes = maxval < 256 ? 1 : 2;
  const std::size_t count = static_cast<std::size_t>(w) * h * channels;
  std::vector<unsigned char> raw(count * bytes);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw Error(path + ": truncated pixel data");
  }
  Image img(channels, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c) {
        const std::size_t k = (static_cast<std::size_t>(y) * w + x) * channels + c;
        const int v = bytes == 1 ? raw[k] : (raw[2 * k] << 8) | raw[2 * k + 1];
        img.at(c, y, x) = static_cast<float>(v) / static_cast<float>(maxval);
      }
  return img;
}

#ifdef EDMB_HAVE_PNG
Image read_png(const std::string& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str())) {
    throw Error(path + ": " + pi.message);
  }
  const bool gray = (pi.format & PNG_FORMAT_FLAG_COLOR) == 0;
  pi.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw Error(path + ": " + pi.message);
  }
  const int c = gray ? 1 : 3;
  Image img(c, static_cast<int>(pi.height), static_cast<int>(pi.width));
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int k = 0; k < c; ++k)
        img.at(k, y, x) = buf[(static_cast<std::size_t>(y) * img.width + x) * c + k] / 255.0f;
  return img;
}
#endif

}  // namespace

std::uint8_t quantize_unit(float v) {
  const float c = std::min(std::max(v, 0.0f), 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

Image read_image(const std::string& path) {
  if (has_suffix(path, ".png")) {
#ifdef EDMB_HAVE_PNG
    return read_png(path);
#else
    throw Error(path + ": PNG support not compiled in");
#endif
  }
  return read_netpbm(path);
}

void write_netpbm(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw Error(path + ": Netpbm output needs 1 or 3 channels");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  os << (img.channels == 1 ? "P5" : "P6") << "\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> raw(img.data.size());
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        raw[(static_cast<std::size_t>(y) * img.width + x) * img.channels + c] = quantize_unit(img.at(c, y, x));
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!os) throw Error("write failed: " + path);
}

bool png_supported() {
#ifdef EDMB_HAVE_PNG
  return true;
#else
  return false;
#endif
}

void write_png(const std::string& path, const Image& img) {
#ifdef EDMB_HAVE_PNG
  if (img.channels != 1 && img.channels != 3) throw Error(path + ": PNG output needs 1 or 3 channels");
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<unsigned char> raw(img.data.size());
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        raw[(static_cast<std::size_t>(y) * img.width + x) * img.channels + c] = quantize_unit(img.at(c, y, x));
  if (!png_image_write_to_file(&pi, path.c_str(), 0, raw.data(), 0, nullptr)) {
    throw Error(path + ": " + pi.message);
  }
#else
  (void)img;
  throw Error(path + ": PNG support not compiled in");
#endif
}

}  // namespace edmb
