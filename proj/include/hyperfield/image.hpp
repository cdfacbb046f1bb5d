// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hyperfield/tensor.hpp"

#include <filesystem>
#include <vector>

namespace hyperfield {

/// Interleaved float image in [0, 1], row-major [H x W x C].
struct Image {
  Index height = 0;
  Index width = 0;
  Index channels = 3;
  std::vector<float> pixels;

  Image() = default;
  Image(Index h, Index w, Index c, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h * w * c), fill) {}

  float& at(Index y, Index x, Index c) { return pixels[static_cast<std::size_t>((y * width + x) * channels + c)]; }
  float at(Index y, Index x, Index c) const {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }

  template <class S>
  Tensor<S> to_tensor() const {
    Tensor<S> t({height, width, channels});
    for (std::size_t i = 0; i < pixels.size(); ++i) t.data()[i] = static_cast<S>(pixels[i]);
    return t;
  }
};

/// Binary PPM (P6, maxval 255). Values are clamped to [0, 1] and rounded.
void write_ppm(const Image& image, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

}  // namespace hyperfield
