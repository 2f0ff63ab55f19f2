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

// Global matching: all-pairs cost volume, dual-softmax confidence, mutual
// nearest-neighbour selection and the coarse flow derived from it.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "gmflow/flow_field.hpp"
#include "gmflow/layers.hpp"

namespace gmflow {

/// Largest 1/8-resolution extent accepted by the dense cost volume (96 px input).
inline constexpr std::size_t kMaxCostGrid = 12;

/// Dense 4D similarity C(i, j, u, v) stored as [H1, W1, H2, W2].
template <class T>
struct CostVolume {
  Tensor<T> values;

  std::size_t h1() const { return values.dim(0); }
  std::size_t w1() const { return values.dim(1); }
  std::size_t h2() const { return values.dim(2); }
  std::size_t w2() const { return values.dim(3); }
  std::size_t sources() const { return h1() * w1(); }
  std::size_t targets() const { return h2() * w2(); }
  T operator()(std::size_t i, std::size_t j, std::size_t u, std::size_t v) const {
    return values[((i * w1() + j) * h2() + u) * w2() + v];
  }
};

namespace ad {

/// C = F1^T F2 over channels: [d, H1, W1] x [d, H2, W2] -> [H1, W1, H2, W2].
template <class T>
Var cost_volume(Graph<T>& g, Var f1, Var f2) {
  const auto& a = g.value(f1);
  const auto& b = g.value(f2);
  require_rank(a.shape(), 3, "cost volume F1");
  require_rank(b.shape(), 3, "cost volume F2");
  if (a.dim(0) != b.dim(0))
    throw Error("cost volume: channel mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  for (std::size_t e : {a.dim(1), a.dim(2), b.dim(1), b.dim(2)})
    if (e > kMaxCostGrid)
      throw Error("cost volume: feature grids " + shape_str(a.shape()) + " / " + shape_str(b.shape()) +
                  " exceed the dense budget of " + std::to_string(kMaxCostGrid) + " cells per side (" +
                  std::to_string(kMaxCostGrid * 8) + " px input)");
  const std::size_t d = a.dim(0), n1 = a.dim(1) * a.dim(2), n2 = b.dim(1) * b.dim(2);
  Tensor<T> out({a.dim(1), a.dim(2), b.dim(1), b.dim(2)});
  MatMap<T>(out.data(), n1, n2).noalias() =
      ConstMatMap<T>(a.data(), d, n1).transpose() * ConstMatMap<T>(b.data(), d, n2);
  return g.emit(std::move(out), {f1, f2}, [f1, f2, d, n1, n2](Graph<T>& g, std::size_t self) {
    ConstMatMap<T> dc(g.grad(self).data(), n1, n2);
    if (g.needs_grad(f1))
      MatMap<T>(g.grad(f1).data(), d, n1).noalias() += ConstMatMap<T>(g.value(f2).data(), d, n2) * dc.transpose();
    if (g.needs_grad(f2))
      MatMap<T>(g.grad(f2).data(), d, n2).noalias() += ConstMatMap<T>(g.value(f1).data(), d, n1) * dc;
  });
}

/// log P_c = log softmax over targets + log softmax over sources, of C / temperature.
template <class T>
Var log_dual_softmax(Graph<T>& g, Var cost, T temperature = T(1)) {
  const auto& c = g.value(cost);
  require_rank(c.shape(), 4, "dual softmax");
  const std::size_t n1 = c.dim(0) * c.dim(1), n2 = c.dim(2) * c.dim(3);
  std::vector<T> row_lse(n1), col_lse(n2);
  for (std::size_t s = 0; s < n1; ++s) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t t = 0; t < n2; ++t) mx = std::max(mx, c[s * n2 + t] / temperature);
    T acc = 0;
    for (std::size_t t = 0; t < n2; ++t) acc += std::exp(c[s * n2 + t] / temperature - mx);
    row_lse[s] = mx + std::log(acc);
  }
  for (std::size_t t = 0; t < n2; ++t) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t s = 0; s < n1; ++s) mx = std::max(mx, c[s * n2 + t] / temperature);
    T acc = 0;
    for (std::size_t s = 0; s < n1; ++s) acc += std::exp(c[s * n2 + t] / temperature - mx);
    col_lse[t] = mx + std::log(acc);
  }
  Tensor<T> out(c.shape());
  for (std::size_t s = 0; s < n1; ++s)
    for (std::size_t t = 0; t < n2; ++t) out[s * n2 + t] = 2 * c[s * n2 + t] / temperature - row_lse[s] - col_lse[t];
  return g.emit(std::move(out), {cost},
                [cost, n1, n2, temperature, row_lse = std::move(row_lse), col_lse = std::move(col_lse)](
                    Graph<T>& g, std::size_t self) {
                  const auto& go = g.grad(self);
                  const auto& c = g.value(cost);
                  auto& gc = g.grad(cost);
                  std::vector<T> row_sum(n1, T(0)), col_sum(n2, T(0));
                  for (std::size_t s = 0; s < n1; ++s)
                    for (std::size_t t = 0; t < n2; ++t) {
                      row_sum[s] += go[s * n2 + t];
                      col_sum[t] += go[s * n2 + t];
                    }
                  for (std::size_t s = 0; s < n1; ++s)
                    for (std::size_t t = 0; t < n2; ++t) {
                      const T l = c[s * n2 + t] / temperature;
                      const T d = 2 * go[s * n2 + t] - std::exp(l - row_lse[s]) * row_sum[s] -
                                  std::exp(l - col_lse[t]) * col_sum[t];
                      gc[s * n2 + t] += d / temperature;
                    }
                });
}

}  // namespace ad

template <class T>
CostVolume<T> build_cost_volume(const Tensor<T>& f1, const Tensor<T>& f2) {
  Graph<T> g(false);
  return {g.value(ad::cost_volume(g, g.constant(f1), g.constant(f2)))};
}

/// Matching confidence together with its two softmax factors.
template <class T>
struct MatchConfidence {
  Tensor<T> values;         // P_c, same layout as the cost volume
  Tensor<T> over_targets;   // softmax(C(i, j, .)), sums to 1 for each source
  Tensor<T> over_sources;   // softmax(C(., u, v)), sums to 1 for each target
};

template <class T>
MatchConfidence<T> match_confidence(const CostVolume<T>& cost, T temperature = T(1)) {
  const auto& c = cost.values;
  const std::size_t n1 = cost.sources(), n2 = cost.targets();
  MatchConfidence<T> out{Tensor<T>(c.shape()), Tensor<T>(c.shape()), Tensor<T>(c.shape())};
  std::vector<T> buf(std::max(n1, n2));
  for (std::size_t s = 0; s < n1; ++s) {
    for (std::size_t t = 0; t < n2; ++t) buf[t] = c[s * n2 + t] / temperature;
    const auto p = softmax(std::span<const T>(buf.data(), n2));
    for (std::size_t t = 0; t < n2; ++t) out.over_targets[s * n2 + t] = p[t];
  }
  for (std::size_t t = 0; t < n2; ++t) {
    for (std::size_t s = 0; s < n1; ++s) buf[s] = c[s * n2 + t] / temperature;
    const auto p = softmax(std::span<const T>(buf.data(), n1));
    for (std::size_t s = 0; s < n1; ++s) out.over_sources[s * n2 + t] = p[s];
  }
  for (std::size_t i = 0; i < c.size(); ++i) out.values[i] = out.over_targets[i] * out.over_sources[i];
  return out;
}

/// Argmax matches in both directions plus the mutual-consistency mask.
/// Indices are row-major over the respective 1/8-resolution grid.
struct MatchResult {
  std::size_t h1 = 0, w1 = 0, h2 = 0, w2 = 0;
  std::vector<std::size_t> forward;   // source -> target
  std::vector<std::size_t> backward;  // target -> source
  std::vector<std::uint8_t> mutual;   // per source

  double coverage() const {
    if (mutual.empty()) return 0.0;
    std::size_t n = 0;
    for (auto m : mutual) n += m;
    return static_cast<double>(n) / static_cast<double>(mutual.size());
  }
};

/// Ties go to the smallest row-major index.
template <class T>
MatchResult select_matches(const Tensor<T>& confidence) {
  require_rank(confidence.shape(), 4, "select_matches");
  MatchResult r{confidence.dim(0), confidence.dim(1), confidence.dim(2), confidence.dim(3), {}, {}, {}};
  const std::size_t n1 = r.h1 * r.w1, n2 = r.h2 * r.w2;
  r.forward.assign(n1, 0);
  r.backward.assign(n2, 0);
  std::vector<T> best_col(n2, -std::numeric_limits<T>::infinity());
  for (std::size_t s = 0; s < n1; ++s) {
    T best = -std::numeric_limits<T>::infinity();
    for (std::size_t t = 0; t < n2; ++t) {
      const T p = confidence[s * n2 + t];
      if (p > best) {
        best = p;
        r.forward[s] = t;
      }
      if (p > best_col[t]) {
        best_col[t] = p;
        r.backward[t] = s;
      }
    }
  }
  r.mutual.resize(n1);
  for (std::size_t s = 0; s < n1; ++s) r.mutual[s] = r.backward[r.forward[s]] == s ? 1 : 0;
  return r;
}

template <class T>
MatchResult select_matches(const MatchConfidence<T>& confidence) {
  return select_matches(confidence.values);
}

/// Displacement to the matched target for mutual matches, zero elsewhere,
/// in 1/8-resolution pixels.
template <class T>
FlowField<T> coarse_flow(const MatchResult& m) {
  FlowField<T> f(m.h1, m.w1, FlowScale::eighth);
  for (std::size_t s = 0; s < m.h1 * m.w1; ++s) {
    if (!m.mutual[s]) continue;
    const std::size_t i = s / m.w1, j = s % m.w1;
    const std::size_t t = m.forward[s];
    f.u(i, j) = static_cast<T>(static_cast<double>(t % m.w2) - static_cast<double>(j));
    f.v(i, j) = static_cast<T>(static_cast<double>(t / m.w2) - static_cast<double>(i));
  }
  return f;
}

}  // namespace gmflow
