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

// Losses: matching NLL over ground-truth matches, decayed L1 sequence loss
// over refinement iterates, and their weighted total.

#include <cmath>
#include <cstdint>
#include <vector>

#include "gmflow/flow_field.hpp"
#include "gmflow/layers.hpp"

namespace gmflow {

using Mask = Tensor<std::uint8_t>;  // [H, W], nonzero = set

/// Ground-truth matches on the 1/8 grid: per source cell a matched flag and
/// the row-major index of its target cell.
struct GtMatchSet {
  std::size_t h = 0, w = 0;
  std::vector<std::uint8_t> matched;
  std::vector<std::size_t> target;

  std::size_t count() const {
    std::size_t n = 0;
    for (auto m : matched) n += m;
    return n;
  }
};

/// Cell (i, j) of the 1/8 grid is anchored at full-resolution position
/// (8i + 3.5, 8j + 3.5); its flow is the bilinear sample there, i.e. the mean of
/// the four central pixels, divided by 8.
template <class T>
FlowField<T> eighth_flow(const FlowField<T>& full) {
  full.require_scale(FlowScale::full, "eighth_flow");
  if (full.height() % 8 || full.width() % 8)
    throw Error("eighth_flow: flow extents must be multiples of 8, got " + shape_str(full.data.shape()));
  FlowField<T> out(full.height() / 8, full.width() / 8, FlowScale::eighth);
  for (std::size_t i = 0; i < out.height(); ++i)
    for (std::size_t j = 0; j < out.width(); ++j) {
      double u = 0, v = 0;
      for (std::size_t y = 8 * i + 3; y <= 8 * i + 4; ++y)
        for (std::size_t x = 8 * j + 3; x <= 8 * j + 4; ++x) {
          u += static_cast<double>(full.u(y, x));
          v += static_cast<double>(full.v(y, x));
        }
      out.u(i, j) = static_cast<T>(u / 32.0);
      out.v(i, j) = static_cast<T>(v / 32.0);
    }
  return out;
}

/// A cell is matched iff none of its four central pixels is occluded and its
/// 1/8 flow, rounded to the nearest integer, lands on the grid.
template <class T>
GtMatchSet gt_match_set(const FlowField<T>& gt, const Mask& occlusion) {
  require_same_shape(occlusion.shape(), Shape{gt.height(), gt.width()}, "gt_match_set occlusion");
  const auto coarse = eighth_flow(gt);
  GtMatchSet s;
  s.h = coarse.height();
  s.w = coarse.width();
  s.matched.assign(s.h * s.w, 0);
  s.target.assign(s.h * s.w, 0);
  const std::size_t fw = gt.width();
  for (std::size_t i = 0; i < s.h; ++i)
    for (std::size_t j = 0; j < s.w; ++j) {
      bool occluded = false;
      for (std::size_t y = 8 * i + 3; y <= 8 * i + 4; ++y)
        for (std::size_t x = 8 * j + 3; x <= 8 * j + 4; ++x) occluded = occluded || occlusion[y * fw + x] != 0;
      if (occluded) continue;
      const long ti = static_cast<long>(i) + std::lround(static_cast<double>(coarse.v(i, j)));
      const long tj = static_cast<long>(j) + std::lround(static_cast<double>(coarse.u(i, j)));
      if (ti < 0 || tj < 0 || ti >= static_cast<long>(s.h) || tj >= static_cast<long>(s.w)) continue;
      s.matched[i * s.w + j] = 1;
      s.target[i * s.w + j] = static_cast<std::size_t>(ti) * s.w + static_cast<std::size_t>(tj);
    }
  return s;
}

inline constexpr double kMinConfidence = 1e-12;

struct MatchingLoss {
  double value = 0;
  bool empty = false;  // no ground-truth matches: value is 0 by convention
};

/// -mean log P_c over ground-truth pairs, with P_c clamped below at 1e-12.
template <class T>
MatchingLoss matching_loss(const Tensor<T>& confidence, const GtMatchSet& gt) {
  require_rank(confidence.shape(), 4, "matching_loss confidence");
  if (confidence.dim(0) * confidence.dim(1) != gt.matched.size())
    throw Error("matching_loss: confidence " + shape_str(confidence.shape()) + " does not match gt grid");
  const std::size_t n2 = confidence.dim(2) * confidence.dim(3);
  const std::size_t n = gt.count();
  if (n == 0) return {0.0, true};
  double acc = 0;
  for (std::size_t s = 0; s < gt.matched.size(); ++s)
    if (gt.matched[s]) acc -= std::log(std::max<double>(confidence[s * n2 + gt.target[s]], kMinConfidence));
  return {acc / static_cast<double>(n), false};
}

template <class T>
double sequence_loss(const std::vector<FlowField<T>>& preds, const FlowField<T>& gt, double gamma, std::size_t iters) {
  if (preds.size() != iters)
    throw Error("sequence_loss: expected " + std::to_string(iters) + " predictions, got " + std::to_string(preds.size()));
  gt.require_scale(FlowScale::full, "sequence_loss");
  double total = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    preds[i].require_scale(FlowScale::full, "sequence_loss");
    require_same_shape(preds[i].data.shape(), gt.data.shape(), "sequence_loss");
    double e = 0;
    for (std::size_t k = 0; k < gt.data.size(); ++k) e += std::abs(static_cast<double>(gt.data[k] - preds[i].data[k]));
    total += std::pow(gamma, static_cast<double>(iters - 1 - i)) * e / static_cast<double>(gt.data.size());
  }
  return total;
}

inline double total_loss(double flow_loss, double matching, double lambda) { return flow_loss + lambda * matching; }

namespace ad {

/// Matching NLL on a graph holding log P_c; a constant 0 when `gt` is empty.
template <class T>
Var matching_nll(Graph<T>& g, Var log_confidence, const GtMatchSet& gt) {
  const auto& lp = g.value(log_confidence);
  require_rank(lp.shape(), 4, "matching_nll");
  if (lp.dim(0) * lp.dim(1) != gt.matched.size()) throw Error("matching_nll: gt grid does not match confidence");
  const std::size_t n2 = lp.dim(2) * lp.dim(3);
  const std::size_t n = gt.count();
  if (n == 0) return g.constant(Tensor<T>({1}, T(0)));
  const T floor = static_cast<T>(std::log(kMinConfidence));
  auto* slot = g.branch_slot(gt.matched.size());
  std::vector<std::size_t> live;  // pairs above the clamp
  T acc = 0;
  for (std::size_t s = 0; s < gt.matched.size(); ++s) {
    if (!gt.matched[s]) continue;
    const std::size_t idx = s * n2 + gt.target[s];
    if (g.decide(slot, s, lp[idx] > floor)) {
      acc -= lp[idx];
      live.push_back(idx);
    } else {
      acc -= floor;
    }
  }
  const T inv = T(1) / static_cast<T>(n);
  return g.emit(Tensor<T>({1}, acc * inv), {log_confidence},
                [log_confidence, inv, live = std::move(live)](Graph<T>& g, std::size_t self) {
    const T go = g.grad(self)[0];
    auto& gl = g.grad(log_confidence);
    for (std::size_t idx : live) gl[idx] -= go * inv;
  });
}

/// sum_i gamma^(T-i) * mean |gt - f^i| over full-resolution predictions.
template <class T>
Var sequence_loss(Graph<T>& g, const std::vector<Var>& preds, const Tensor<T>& gt, T gamma) {
  std::vector<Var> terms;
  std::vector<T> weights;
  const std::size_t n = preds.size();
  for (std::size_t i = 0; i < n; ++i) {
    terms.push_back(l1_mean(g, preds[i], gt));
    weights.push_back(static_cast<T>(std::pow(static_cast<double>(gamma), static_cast<double>(n - 1 - i))));
  }
  return weighted_sum(g, terms, weights);
}

template <class T>
Var total_loss(Graph<T>& g, Var flow_loss, Var matching, T lambda) {
  return weighted_sum(g, {flow_loss, matching}, {T(1), lambda});
}

}  // namespace ad
}  // namespace gmflow
