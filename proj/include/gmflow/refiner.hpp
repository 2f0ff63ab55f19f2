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

// Iterative refinement: cost-volume lookup around the current flow, a
// convolutional GRU with weights shared across iterations, and a delta-flow
// head. Predictions stay at 1/8 resolution until upsample_flow.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <string>
#include <utility>
#include <vector>

#include "gmflow/flow_field.hpp"
#include "gmflow/layers.hpp"
#include "gmflow/matcher.hpp"

namespace gmflow {

enum class LookupBall { l1, linf };

struct LookupConfig {
  int radius = 3;
  LookupBall ball = LookupBall::l1;

  /// Integer offsets (drow, dcol) with |d|_1 < r (or |d|_inf < r), sorted by
  /// (row, col).
  std::vector<std::pair<int, int>> offsets() const {
    if (radius < 1) throw Error("lookup radius must be >= 1, got " + std::to_string(radius));
    std::vector<std::pair<int, int>> out;
    for (int dr = -radius; dr <= radius; ++dr)
      for (int dc = -radius; dc <= radius; ++dc) {
        const int norm = ball == LookupBall::l1 ? std::abs(dr) + std::abs(dc) : std::max(std::abs(dr), std::abs(dc));
        if (norm < radius) out.emplace_back(dr, dc);
      }
    return out;
  }
  std::size_t channels() const { return offsets().size(); }
};

namespace ad {

/// Samples C(x, x + f(x) + delta) for every source pixel x and offset delta.
/// `flow` is [2, H1, W1] in 1/8-resolution units; output is [K, H1, W1].
template <class T>
Var lookup(Graph<T>& g, Var cost, Var flow, const std::vector<std::pair<int, int>>& offsets) {
  const auto& c = g.value(cost);
  const auto& f = g.value(flow);
  require_rank(c.shape(), 4, "lookup cost volume");
  require_same_shape(f.shape(), Shape{2, c.dim(0), c.dim(1)}, "lookup flow");
  const std::size_t h1 = c.dim(0), w1 = c.dim(1), h2 = c.dim(2), w2 = c.dim(3);
  const std::size_t n1 = h1 * w1, n2 = h2 * w2, nk = offsets.size();
  auto* slot = g.branch_slot(2 * n1 * nk);
  std::vector<std::int32_t> cells(2 * n1 * nk);  // (y0, x0) per (k, p)
  Tensor<T> out({nk, h1, w1});
  for (std::size_t p = 0; p < n1; ++p) {
    const T row = static_cast<T>(p / w1) + f[n1 + p];
    const T col = static_cast<T>(p % w1) + f[p];
    const T* plane = c.data() + p * n2;
    for (std::size_t k = 0; k < nk; ++k) {
      const T r = row + static_cast<T>(offsets[k].first), q = col + static_cast<T>(offsets[k].second);
      const std::size_t at = 2 * (k * n1 + p);
      cells[at] = g.decide(slot, at, static_cast<std::int32_t>(std::floor(r)));
      cells[at + 1] = g.decide(slot, at + 1, static_cast<std::int32_t>(std::floor(q)));
      std::array<BilinearTap<T>, 4> taps;
      const int n = bilinear_taps_in_cell(h2, w2, r, q, cells[at], cells[at + 1], taps);
      T v = 0;
      for (int i = 0; i < n; ++i) v += taps[i].weight * plane[taps[i].index];
      out[k * n1 + p] = v;
    }
  }
  return g.emit(std::move(out), {cost, flow},
                [cost, flow, offsets, h1, w1, h2, w2, cells = std::move(cells)](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad(self);
    const auto& c = g.value(cost);
    const auto& f = g.value(flow);
    const std::size_t n1 = h1 * w1, n2 = h2 * w2;
    Tensor<T>* gc = g.needs_grad(cost) ? &g.grad(cost) : nullptr;
    Tensor<T>* gf = g.needs_grad(flow) ? &g.grad(flow) : nullptr;
    auto at = [&](const T* plane, long y, long x) {
      return (y < 0 || x < 0 || y >= static_cast<long>(h2) || x >= static_cast<long>(w2))
                 ? T(0)
                 : plane[static_cast<std::size_t>(y) * w2 + static_cast<std::size_t>(x)];
    };
    for (std::size_t p = 0; p < n1; ++p) {
      const T* plane = c.data() + p * n2;
      for (std::size_t k = 0; k < offsets.size(); ++k) {
        const T gv = go[k * n1 + p];
        if (gv == T(0)) continue;
        const T row = static_cast<T>(p / w1) + f[n1 + p] + static_cast<T>(offsets[k].first);
        const T col = static_cast<T>(p % w1) + f[p] + static_cast<T>(offsets[k].second);
        const long y0 = cells[2 * (k * n1 + p)], x0 = cells[2 * (k * n1 + p) + 1];
        if (gc) {
          std::array<BilinearTap<T>, 4> taps;
          const int n = bilinear_taps_in_cell(h2, w2, row, col, y0, x0, taps);
          for (int i = 0; i < n; ++i) (*gc)[p * n2 + taps[i].index] += gv * taps[i].weight;
        }
        if (gf) {
          const T ay = row - static_cast<T>(y0), ax = col - static_cast<T>(x0);
          const T v00 = at(plane, y0, x0), v01 = at(plane, y0, x0 + 1);
          const T v10 = at(plane, y0 + 1, x0), v11 = at(plane, y0 + 1, x0 + 1);
          (*gf)[n1 + p] += gv * ((T(1) - ax) * (v10 - v00) + ax * (v11 - v01));
          (*gf)[p] += gv * ((T(1) - ay) * (v01 - v00) + ay * (v11 - v10));
        }
      }
    }
  });
}

}  // namespace ad

template <class T>
Tensor<T> lookup(const CostVolume<T>& cost, const FlowField<T>& flow, const LookupConfig& cfg) {
  flow.require_scale(FlowScale::eighth, "lookup");
  Graph<T> g(false);
  return g.value(ad::lookup(g, g.constant(cost.values), g.constant(flow.data), cfg.offsets()));
}

template <class T>
FlowField<T> upsample_flow(const FlowField<T>& flow) {
  flow.require_scale(FlowScale::eighth, "upsample_flow");
  Graph<T> g(false);
  return {g.value(ad::upsample_bilinear(g, g.constant(flow.data), 8, T(8))), FlowScale::full};
}

struct RefinerConfig {
  std::size_t hidden = 32;  // c_h
  std::size_t motion = 32;  // motion-encoder output channels
  std::size_t iters = 4;    // T
  LookupConfig lookup;
  ad::Activation activation = ad::Activation::relu;
};

namespace refiner {

template <class T>
void add_params(ParamStore<T>& store, const RefinerConfig& cfg, std::size_t context_dim, Rng& rng) {
  const std::size_t ch = cfg.hidden, cm = cfg.motion, k = cfg.lookup.channels();
  const std::size_t x_dim = 2 + context_dim + cm, gate_in = ch + x_dim;
  store.add_uniform("refiner.hinit.weight", {ch, context_dim}, context_dim, rng);
  store.add_constant("refiner.hinit.bias", {ch}, T(0));
  store.add_uniform("refiner.motion.weight", {cm, k + 2, 3, 3}, (k + 2) * 9, rng);
  store.add_constant("refiner.motion.bias", {cm}, T(0));
  for (const char* gate : {"gate_z", "gate_r", "candidate"}) {
    store.add_uniform(std::string("refiner.") + gate + ".weight", {ch, gate_in, 3, 3}, gate_in * 9, rng);
    store.add_constant(std::string("refiner.") + gate + ".bias", {ch}, T(0));
  }
  store.add_uniform("refiner.head.weight", {2, ch, 3, 3}, ch * 9, rng);
  store.add_constant("refiner.head.bias", {2}, T(0));
}

/// h0 = tanh(W context + b).
template <class T>
Var initial_hidden(Graph<T>& g, Var context, const ParamStore<T>& store) {
  return ad::tanh(g, ad::linear_channels(g, context, g.param(store, "refiner.hinit.weight"),
                                         g.param(store, "refiner.hinit.bias")));
}

struct GruStep {
  Var hidden;
  Var delta;
};

/// One ConvGRU update:
///   x  = [f, context, motion(f, lookup(C, f))]
///   z  = sigmoid(Conv([h, x])),  r = sigmoid(Conv([h, x]))
///   h~ = tanh(Conv([r * h, x])), h' = (1 - z) h + z h~,  df = Conv(h')
template <class T>
GruStep gru_update(Graph<T>& g, Var hidden, Var flow, Var context, Var cost, const ParamStore<T>& store,
                   const RefinerConfig& cfg, const std::vector<std::pair<int, int>>& offsets) {
  auto conv = [&](Var in, const std::string& name) {
    return ad::conv2d(g, in, g.param(store, "refiner." + name + ".weight"), g.param(store, "refiner." + name + ".bias"),
                      1, 1);
  };
  Var corr = ad::lookup(g, cost, flow, offsets);
  Var motion = ad::activate(g, conv(ad::concat_channels(g, {flow, corr}), "motion"), cfg.activation);
  Var x = ad::concat_channels(g, {flow, context, motion});
  Var hx = ad::concat_channels(g, {hidden, x});
  Var z = ad::sigmoid(g, conv(hx, "gate_z"));
  Var r = ad::sigmoid(g, conv(hx, "gate_r"));
  Var cand = ad::tanh(g, conv(ad::concat_channels(g, {ad::mul(g, r, hidden), x}), "candidate"));
  Var next = ad::add(g, ad::mul(g, ad::affine(g, z, T(-1), T(1)), hidden), ad::mul(g, z, cand));
  return {next, conv(next, "head")};
}

/// Runs T updates from `initial` (1/8 resolution, [2, H, W]) and returns
/// f^1 .. f^T; the initial flow itself is not part of the sequence.
template <class T>
std::vector<Var> refine(Graph<T>& g, Var context, Var cost, Var initial, std::size_t iters,
                        const ParamStore<T>& store, const RefinerConfig& cfg) {
  const auto offsets = cfg.lookup.offsets();
  std::vector<Var> out;
  out.reserve(iters);
  if (iters == 0) return out;
  Var h = initial_hidden(g, context, store);
  Var flow = initial;
  for (std::size_t t = 0; t < iters; ++t) {
    auto step = gru_update(g, h, flow, context, cost, store, cfg, offsets);
    h = step.hidden;
    flow = ad::add(g, flow, step.delta);
    out.push_back(flow);
  }
  return out;
}

template <class T>
std::vector<FlowField<T>> refine(const Tensor<T>& context, const CostVolume<T>& cost, const FlowField<T>& initial,
                                 std::size_t iters, const ParamStore<T>& store, const RefinerConfig& cfg) {
  initial.require_scale(FlowScale::eighth, "refine");
  Graph<T> g(false);
  const auto seq = refine(g, g.constant(context), g.constant(cost.values), g.constant(initial.data), iters, store, cfg);
  std::vector<FlowField<T>> out;
  for (Var v : seq) out.emplace_back(g.value(v), FlowScale::eighth);
  return out;
}

}  // namespace refiner
}  // namespace gmflow
