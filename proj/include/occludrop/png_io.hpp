#pragma once

// Grayscale PNG input/output and directory-of-identities ingestion
// (`<root>/<identity>/<image>.png`).

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "occludrop/data.hpp"
#include "occludrop/errors.hpp"

namespace occludrop {

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<float> pixels;  ///< [0,1], row-major
};

/// Any PNG color type; color is reduced to luminance by libpng.
inline GrayImage read_png_gray(const std::string& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw DataError("cannot decode PNG '" + path + "': " + img.message);
  }
  img.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw DataError("cannot decode PNG '" + path + "': " + msg);
  }
  GrayImage out;
  out.width = img.width;
  out.height = img.height;
  out.pixels.resize(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) out.pixels[i] = static_cast<float>(buf[i]) / 255.0f;
  return out;
}

inline void write_png_gray(const std::string& path, std::size_t width, std::size_t height, const float* pixels) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(width * height);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    buf[i] = static_cast<std::uint8_t>(std::lround(std::clamp(pixels[i], 0.0f, 1.0f) * 255.0f));
  }
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw DataError("cannot write PNG '" + path + "': " + img.message);
  }
}

/// Bilinear resampling with pixel-center alignment.
inline std::vector<float> resize_bilinear(const GrayImage& src, std::size_t size) {
  std::vector<float> out(size * size);
  const double sy = static_cast<double>(src.height) / static_cast<double>(size);
  const double sx = static_cast<double>(src.width) / static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < size; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - static_cast<double>(x0);
      auto at = [&src](std::size_t yy, std::size_t xx) { return static_cast<double>(src.pixels[yy * src.width + xx]); };
      const double top = at(y0, x0) * (1 - wx) + at(y0, x1) * wx;
      const double bot = at(y1, x0) * (1 - wx) + at(y1, x1) * wx;
      out[y * size + x] = static_cast<float>(top * (1 - wy) + bot * wy);
    }
  }
  return out;
}

/// Identities are the sorted subdirectory names; within each, the first
/// round(train_fraction * count) sorted images go to train.
inline Dataset load_directory_dataset(const std::string& root, std::size_t size, double train_fraction) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw DataError("dataset root '" + root + "' is not a directory");
  std::vector<fs::path> ids;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) ids.push_back(e.path());
  }
  std::sort(ids.begin(), ids.end());
  Dataset ds;
  ds.train.size = ds.test.size = size;
  for (const auto& dir : ids) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      auto ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
      if (e.is_regular_file() && ext == ".png") files.push_back(e.path());
    }
    if (files.size() < 2) continue;
    std::sort(files.begin(), files.end());
    const std::size_t label = ds.num_ids++;
    const std::size_t n_train = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(files.size()))), 1,
        files.size() - 1);
    for (std::size_t k = 0; k < files.size(); ++k) {
      auto img = read_png_gray(files[k].string());
      (k < n_train ? ds.train : ds.test).push(resize_bilinear(img, size), label);
    }
  }
  if (ds.num_ids < 2) throw DataError("dataset root '" + root + "' needs >= 2 identity folders with >= 2 PNGs each");
  return ds;
}

}  // namespace occludrop
