#pragma once

// PNG output for image grids. Needs libpng at link time.

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <memory>

#include "dime/tensor.hpp"

namespace dime {

struct RgbImage {
  int width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB

  RgbImage() = default;
  RgbImage(int w, int h, std::uint8_t fill = 0) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, fill) {}
  std::uint8_t* at(int x, int y) { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
};

inline void write_png(const std::filesystem::path& path, const RgbImage& img) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw std::runtime_error("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + static_cast<std::size_t>(y) * img.width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255)); }

// Pastes a [C, H, W] image in [-1, 1] at (x0, y0), magnified by `zoom`.
inline void paste(RgbImage& dst, const Tensor<float>& img, int x0, int y0, int zoom = 1) {
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  for (int y = 0; y < h * zoom; ++y)
    for (int x = 0; x < w * zoom; ++x) {
      auto* p = dst.at(x0 + x, y0 + y);
      for (int k = 0; k < 3; ++k) {
        const int ch = c == 1 ? 0 : k;
        p[k] = to_byte(0.5 * (img[(static_cast<std::size_t>(ch) * h + y / zoom) * w + x / zoom] + 1.0));
      }
    }
}

// Per-pixel channel-mean absolute difference, black (none) to red-yellow (>= scale).
inline void paste_heatmap(RgbImage& dst, const Tensor<float>& a, const Tensor<float>& b, int x0, int y0, int zoom = 1,
                          double scale = 1.0) {
  require_same_shape(a, b, "heatmap");
  const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
  for (int y = 0; y < h * zoom; ++y)
    for (int x = 0; x < w * zoom; ++x) {
      double d = 0;
      for (int k = 0; k < c; ++k) {
        const std::size_t i = (static_cast<std::size_t>(k) * h + y / zoom) * w + x / zoom;
        d += std::abs(a[i] - b[i]);
      }
      const double v = std::min(1.0, d / c / scale);
      auto* p = dst.at(x0 + x, y0 + y);
      p[0] = to_byte(std::min(1.0, 2 * v));
      p[1] = to_byte(std::max(0.0, 2 * v - 1));
      p[2] = 0;
    }
}

// One row per entry: query | counterfactual | difference heatmap.
inline RgbImage counterfactual_grid(const std::vector<Tensor<float>>& queries, const std::vector<Tensor<float>>& cfs,
                                    int zoom = 2, int gap = 2) {
  if (queries.size() != cfs.size() || queries.empty()) throw std::invalid_argument("grid needs matching non-empty lists");
  const int h = queries[0].dim(1) * zoom, w = queries[0].dim(2) * zoom;
  const int rows = static_cast<int>(queries.size());
  RgbImage img(3 * w + 4 * gap, rows * h + (rows + 1) * gap, 255);
  for (int r = 0; r < rows; ++r) {
    const int y = gap + r * (h + gap);
    paste(img, queries[r], gap, y, zoom);
    paste(img, cfs[r], 2 * gap + w, y, zoom);
    paste_heatmap(img, queries[r], cfs[r], 3 * gap + 2 * w, y, zoom, 0.5);
  }
  return img;
}

// Plain tiling of a batch [N, C, H, W].
inline RgbImage tile_images(const Tensor<float>& batch, int cols, int zoom = 1, int gap = 1) {
  const int n = batch.dim(0), h = batch.dim(2) * zoom, w = batch.dim(3) * zoom;
  const int rows = (n + cols - 1) / cols;
  RgbImage img(cols * (w + gap) + gap, rows * (h + gap) + gap, 255);
  for (int i = 0; i < n; ++i) paste(img, unstack(batch, i), gap + (i % cols) * (w + gap), gap + (i / cols) * (h + gap), zoom);
  return img;
}

}  // namespace dime
