#pragma once

// Dataset from a directory of per-class PNG folders: root/<class>/<file>.png.
// Classes are numbered in sorted name order; within a class, files are
// taken in sorted order and every sixth one goes to the test split.

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "cvt/data_stream.hpp"

namespace cvt {

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // interleaved rows
};

/// Decodes any PNG to 8-bit RGB.
inline RgbImage read_png(const std::string& path) {
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> f(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!f) throw ConfigError("cannot open image '" + path + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ConfigError("libpng initialisation failed");
  }
  RgbImage img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ConfigError("malformed PNG '" + path + "'");
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
  }
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  img.width = int(png_get_image_width(png, info));
  img.height = int(png_get_image_height(png, info));
  img.rgb.resize(std::size_t(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y) rows.push_back(img.rgb.data() + std::size_t(y) * img.width * 3);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

/// Box-filter resize to side x side, returned as CHW bytes.
inline std::vector<std::uint8_t> downsample_chw(const RgbImage& img, int side) {
  std::vector<std::uint8_t> out(std::size_t(3) * side * side);
  for (int oy = 0; oy < side; ++oy) {
    const int y0 = oy * img.height / side, y1 = std::max(y0 + 1, (oy + 1) * img.height / side);
    for (int ox = 0; ox < side; ++ox) {
      const int x0 = ox * img.width / side, x1 = std::max(x0 + 1, (ox + 1) * img.width / side);
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int y = y0; y < y1; ++y) {
          for (int x = x0; x < x1; ++x) acc += img.rgb[(std::size_t(y) * img.width + x) * 3 + c];
        }
        out[(std::size_t(c) * side + oy) * side + ox] = std::uint8_t(std::lround(acc / double((y1 - y0) * (x1 - x0))));
      }
    }
  }
  return out;
}

inline Dataset load_image_folder(const std::filesystem::path& root, int side = 16) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw ConfigError("dataset folder '" + root.string() + "' does not exist");
  Dataset ds;
  ds.name = "folder:" + root.string();
  ds.channels = 3;
  ds.height = ds.width = side;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) ds.class_names.push_back(e.path().filename().string());
  }
  std::sort(ds.class_names.begin(), ds.class_names.end());
  if (ds.class_names.empty()) throw ConfigError("dataset folder '" + root.string() + "' has no class folders");
  ds.num_classes = int(ds.class_names.size());
  for (int c = 0; c < ds.num_classes; ++c) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(root / ds.class_names[std::size_t(c)])) {
      auto ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return char(std::tolower(ch)); });
      if (e.is_regular_file() && ext == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.size() < 2) throw ConfigError("class '" + ds.class_names[std::size_t(c)] + "' needs at least two images");
    for (std::size_t i = 0; i < files.size(); ++i) {
      auto& target = (i % 6 == 5) ? ds.test : ds.train;
      target.push_back(Sample{downsample_chw(read_png(files[i].string()), side), c, int(target.size())});
    }
  }
  return ds;
}

}  // namespace cvt
