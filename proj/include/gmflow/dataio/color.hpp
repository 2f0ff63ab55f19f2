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

// Middlebury flow color wheel: hue from the flow direction, saturation from
// magnitude / max_norm. Zero flow is white.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include "gmflow/dataio/image_io.hpp"
#include "gmflow/flow_field.hpp"

namespace gmflow {

namespace detail {

/// 55 hues: red-yellow 15, yellow-green 6, green-cyan 4, cyan-blue 11,
/// blue-magenta 13, magenta-red 6.
inline const std::vector<std::array<double, 3>>& color_wheel() {
  static const auto wheel = [] {
    std::vector<std::array<double, 3>> w;
    auto ramp = [&](int n, auto f) {
      for (int i = 0; i < n; ++i) w.push_back(f(static_cast<double>(i) / n));
    };
    ramp(15, [](double t) { return std::array<double, 3>{1, t, 0}; });
    ramp(6, [](double t) { return std::array<double, 3>{1 - t, 1, 0}; });
    ramp(4, [](double t) { return std::array<double, 3>{0, 1, t}; });
    ramp(11, [](double t) { return std::array<double, 3>{0, 1 - t, 1}; });
    ramp(13, [](double t) { return std::array<double, 3>{t, 0, 1}; });
    ramp(6, [](double t) { return std::array<double, 3>{1, 0, 1 - t}; });
    return w;
  }();
  return wheel;
}

}  // namespace detail

/// max_norm defaults to the largest magnitude in the field; magnitudes above
/// it are clamped to full saturation.
template <class T>
Image8 flow_to_color(const FlowField<T>& flow, std::optional<double> max_norm = std::nullopt) {
  const std::size_t h = flow.height(), w = flow.width();
  double norm = 0;
  if (max_norm) {
    if (!(*max_norm > 0)) throw Error("flow_to_color: max_norm must be positive");
    norm = *max_norm;
  } else {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        norm = std::max(norm, std::hypot(static_cast<double>(flow.u(y, x)), static_cast<double>(flow.v(y, x))));
    if (norm == 0) norm = 1;
  }
  const auto& wheel = detail::color_wheel();
  const double ncols = static_cast<double>(wheel.size());
  Image8 img(h, w, 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double u = flow.u(y, x), v = flow.v(y, x);
      if (!std::isfinite(u) || !std::isfinite(v)) throw Error("flow_to_color: non-finite flow");
      const double rad = std::min(std::hypot(u, v) / norm, 1.0);
      const double a = std::atan2(-v, -u) / std::numbers::pi;  // (-1, 1]
      const double fk = (a + 1) / 2 * ncols;
      const auto k0 = static_cast<std::size_t>(std::floor(fk)) % wheel.size();
      const std::size_t k1 = (k0 + 1) % wheel.size();
      const double f = fk - std::floor(fk);
      for (std::size_t c = 0; c < 3; ++c) {
        const double col = (1 - f) * wheel[k0][c] + f * wheel[k1][c];
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(255.0 * (1 - rad * (1 - col))));
      }
    }
  return img;
}

}  // namespace gmflow
