#pragma once

#include <png.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "stdr/core.hpp"

namespace stdr {

// Planar RGB image, doubles in [0, 1]. channel[c] is height x width, so
// channel[c](y, x) addresses pixel (x, y).
struct Image {
  int width = 0;
  int height = 0;
  std::array<MatX, 3> channel;

  Image() = default;
  Image(int w, int h) { resize(w, h); }

  void resize(int w, int h) {
    require(w >= 0 && h >= 0, "image: negative dimensions");
    width = w;
    height = h;
    for (auto& c : channel) c.setZero(h, w);
  }

  double& at(int x, int y, int c) { return channel[c](y, x); }
  double at(int x, int y, int c) const { return channel[c](y, x); }
  Eigen::Index pixels() const { return Eigen::Index(width) * height; }
};

inline bool same_shape(const Image& a, const Image& b) {
  return a.width == b.width && a.height == b.height;
}

inline unsigned char quantize_channel(double v) {
  const double c = std::min(1.0, std::max(0.0, v));
  return static_cast<unsigned char>(std::lround(c * 255.0));
}

namespace detail {

struct PngFile {
  std::FILE* f = nullptr;
  explicit PngFile(const std::string& path, const char* mode) : f(std::fopen(path.c_str(), mode)) {}
  ~PngFile() {
    if (f) std::fclose(f);
  }
  PngFile(const PngFile&) = delete;
  PngFile& operator=(const PngFile&) = delete;
};

}  // namespace detail

inline void save_png(const std::string& path, const Image& img) {
  require(img.width > 0 && img.height > 0, "save_png: empty image");
  detail::PngFile file(path, "wb");
  if (!file.f) throw IoError("save_png: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("save_png: libpng initialization failed for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("save_png: write failed for " + path);
  }

  png_init_io(png, file.f);
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<unsigned char> row(static_cast<std::size_t>(img.width) * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) row[3 * x + c] = quantize_channel(img.at(x, y, c));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline Image load_png(const std::string& path) {
  detail::PngFile file(path, "rb");
  if (!file.f) throw IoError("load_png: cannot open " + path);

  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.f) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw IoError("load_png: not a PNG file: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("load_png: libpng initialization failed for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("load_png: corrupt PNG: " + path);
  }

  png_init_io(png, file.f);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  if (png_get_rowbytes(png, info) != static_cast<std::size_t>(w) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("load_png: unsupported pixel layout: " + path);
  }

  Image img(w, h);
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = row[3 * x + c] / 255.0;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace stdr
