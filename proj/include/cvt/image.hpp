#pragma once

#include <cstdint>
#include <vector>

#include "cvt/autograd.hpp"

namespace cvt {

/// A batch of images in NCHW order with values in [0, 1].
struct ImageBatch {
  int count = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  ImageBatch() = default;
  ImageBatch(int n, int c, int h, int w)
      : count(n), channels(c), height(h), width(w), data(static_cast<std::size_t>(n) * c * h * w, 0.0f) {}

  std::size_t image_size() const { return static_cast<std::size_t>(channels) * height * width; }
  float* image(int i) { return data.data() + static_cast<std::size_t>(i) * image_size(); }
  const float* image(int i) const { return data.data() + static_cast<std::size_t>(i) * image_size(); }
  float& at(int n, int c, int y, int x) {
    return data[((static_cast<std::size_t>(n) * channels + c) * height + y) * width + x];
  }
  float at(int n, int c, int y, int x) const {
    return data[((static_cast<std::size_t>(n) * channels + c) * height + y) * width + x];
  }
};

/// NCHW batch to a (n*h*w) x c matrix, one row per pixel.
template <class T>
Matrix<T> to_channels_last(const ImageBatch& images) {
  Matrix<T> out(Eigen::Index(images.count) * images.height * images.width, images.channels);
  for (int n = 0; n < images.count; ++n) {
    for (int y = 0; y < images.height; ++y) {
      for (int x = 0; x < images.width; ++x) {
        const Eigen::Index row = (Eigen::Index(n) * images.height + y) * images.width + x;
        for (int c = 0; c < images.channels; ++c) out(row, c) = T(images.at(n, c, y, x));
      }
    }
  }
  return out;
}

}  // namespace cvt
