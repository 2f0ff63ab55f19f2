// Copyright 2026 The gmflow-desk Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// 8-bit PNG read/write through libpng's simplified API, and conversions to
// [C, H, W] tensors in [0, 1].

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gmflow/tensor.hpp"

namespace gmflow {

/// Interleaved 8-bit image, 1 (gray) or 3 (RGB) channels.
struct Image8 {
  std::size_t height = 0, width = 0, channels = 3;
  std::vector<std::uint8_t> pixels;

  Image8() = default;
  Image8(std::size_t h, std::size_t w, std::size_t c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}
  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
  bool operator==(const Image8&) const = default;
};

inline void write_png(const Image8& img, const std::string& path) {
  if (img.channels != 1 && img.channels != 3) throw Error("write_png: unsupported channel count for '" + path + "'");
  if (img.pixels.size() != img.height * img.width * img.channels)
    throw Error("write_png: pixel buffer does not match extents for '" + path + "'");
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, img.pixels.data(), 0, nullptr))
    throw Error("write_png: '" + path + "': " + png.message);
}

/// Reads any PNG, converted to `channels` (1 or 3) 8-bit channels.
inline Image8 read_png(const std::string& path, std::size_t channels = 3) {
  if (channels != 1 && channels != 3) throw Error("read_png: channels must be 1 or 3");
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) throw Error("read_png: '" + path + "': " + png.message);
  png.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 img(png.height, png.width, channels);
  if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&png);
    throw Error("read_png: '" + path + "': " + png.message);
  }
  return img;
}

template <class T>
Tensor<T> to_tensor(const Image8& img) {
  Tensor<T> t({img.channels, img.height, img.width});
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) t(c, y, x) = static_cast<T>(img.at(y, x, c)) / T(255);
  return t;
}

/// [C, H, W] in [0, 1] to 8 bits, clamped and rounded.
template <class T>
Image8 to_image(const Tensor<T>& t) {
  require_rank(t.shape(), 3, "to_image");
  Image8 img(t.dim(1), t.dim(2), t.dim(0));
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) {
        const double v = std::clamp(static_cast<double>(t(c, y, x)), 0.0, 1.0);
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  return img;
}

}  // namespace gmflow
