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

// Averaged local matching matrices: for every source cell whose ground-truth
// displacement falls in a bin, softmax the cost-volume slice over the
// (2w) x (2w) window [t - w, t + w) around its ground-truth target t, then
// average the windows elementwise. Perfect matching puts all mass at (w, w).

#include <algorithm>
#include <cmath>
#include <vector>

#include "gmflow/dataio/image_io.hpp"
#include "gmflow/dataio/metrics.hpp"
#include "gmflow/matcher.hpp"

namespace gmflow {

inline constexpr std::size_t kDefaultCostVisRadius = 2;

struct CostVisResult {
  Tensor<double> matrix;  // [2w, 2w]
  std::size_t points = 0;
  std::size_t skipped = 0;  // in the bin but with a window leaving the grid
};

/// Adds the softmaxed windows of every qualifying point to `acc.matrix`
/// (unnormalised) and counts them. `gt` is on the 1/8 grid; the bin is keyed
/// on the full-resolution magnitude 8|gt|.
template <class T>
void accumulate_costvis(const CostVolume<T>& cost, const FlowField<T>& gt, const DisplacementBin& bin,
                        std::size_t radius, CostVisResult& acc) {
  gt.require_scale(FlowScale::eighth, "costvol_vis");
  if (radius < 1) throw Error("costvol_vis: window radius must be >= 1");
  require_rank(cost.values.shape(), 4, "costvol_vis cost volume");
  if (gt.height() != cost.h1() || gt.width() != cost.w1())
    throw Error("costvol_vis: flow " + shape_str(gt.data.shape()) + " does not match cost volume " +
                shape_str(cost.values.shape()));
  const long side = 2 * static_cast<long>(radius);
  const long h2 = static_cast<long>(cost.h2()), w2 = static_cast<long>(cost.w2());
  if (acc.matrix.shape() != Shape{2 * radius, 2 * radius}) acc = {Tensor<double>({2 * radius, 2 * radius}), 0, 0};
  auto& out = acc;
  std::vector<double> logits(static_cast<std::size_t>(side * side));
  for (std::size_t i = 0; i < cost.h1(); ++i)
    for (std::size_t j = 0; j < cost.w1(); ++j) {
      const double u = gt.u(i, j), v = gt.v(i, j);
      if (!bin.contains(8.0 * std::hypot(u, v))) continue;
      const long ti = static_cast<long>(i) + std::lround(v), tj = static_cast<long>(j) + std::lround(u);
      const long r0 = ti - static_cast<long>(radius), c0 = tj - static_cast<long>(radius);
      if (r0 < 0 || c0 < 0 || r0 + side > h2 || c0 + side > w2) {
        ++out.skipped;
        continue;
      }
      for (long a = 0; a < side; ++a)
        for (long b = 0; b < side; ++b)
          logits[static_cast<std::size_t>(a * side + b)] =
              static_cast<double>(cost(i, j, static_cast<std::size_t>(r0 + a), static_cast<std::size_t>(c0 + b)));
      const auto p = softmax(std::span<const double>(logits));
      for (std::size_t k = 0; k < p.size(); ++k) out.matrix[k] += p[k];
      ++out.points;
    }
}

/// Divides the accumulated sums by the point count; fails naming the bin when
/// no point contributed.
inline CostVisResult finish_costvis(CostVisResult acc, const DisplacementBin& bin, std::size_t radius) {
  const std::size_t side = 2 * radius;
  auto& out = acc;
  if (out.points == 0)
    throw Error("costvol_vis: no point in bin " + bin.label + " has a " + std::to_string(side) + "x" +
                std::to_string(side) + " window inside the cost volume (" + std::to_string(out.skipped) +
                " skipped at the border)");
  for (auto& x : out.matrix.values()) x /= static_cast<double>(out.points);
  return out;
}

template <class T>
CostVisResult costvol_vis(const CostVolume<T>& cost, const FlowField<T>& gt, const DisplacementBin& bin,
                          std::size_t radius = kDefaultCostVisRadius) {
  CostVisResult acc;
  accumulate_costvis(cost, gt, bin, radius, acc);
  return finish_costvis(std::move(acc), bin, radius);
}

/// Grayscale heatmap scaled to the matrix maximum, `cell` pixels per entry.
inline Image8 render_heatmap(const Tensor<double>& m, std::size_t cell = 16) {
  require_rank(m.shape(), 2, "render_heatmap");
  double hi = 0;
  for (double x : m.values()) hi = std::max(hi, x);
  if (hi <= 0) hi = 1;
  Image8 img(m.dim(0) * cell, m.dim(1) * cell, 1);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      img.at(y, x, 0) = static_cast<std::uint8_t>(std::lround(255.0 * m[(y / cell) * m.dim(1) + x / cell] / hi));
  return img;
}

}  // namespace gmflow
