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

// Reference implementations written directly from the definitions, sharing
// no code with the library beyond the Tensor container.

#include <cmath>
#include <cstdlib>
#include <string>
#include <vector>

#include "gmflow/params.hpp"
#include "gmflow/tensor.hpp"

namespace gmflow::oracle {

/// Full multi-head attention over every pixel of the map, where a key is
/// admitted iff its patch is the query's patch or one of its 8 neighbours.
/// Includes the q/k/v/out projections of `prefix` in `store`.
inline Tensor<double> dense_pola(const Tensor<double>& x, const ParamStore<double>& store, const std::string& prefix,
                                 std::size_t heads, std::size_t m) {
  const std::size_t d = x.dim(0), h = x.dim(1), w = x.dim(2), n = h * w, dk = d / heads;
  auto project = [&](const Tensor<double>& in, const std::string& name) {
    const auto& W = store.value(prefix + name + ".weight");
    const auto& b = store.value(prefix + name + ".bias");
    std::vector<std::vector<double>> out(n, std::vector<double>(d));
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t o = 0; o < d; ++o) {
        double s = b[o];
        for (std::size_t c = 0; c < d; ++c) s += W[o * d + c] * in[c * n + p];
        out[p][o] = s;
      }
    return out;
  };
  const auto Q = project(x, "query"), K = project(x, "key"), V = project(x, "value");
  const auto& table = store.value(prefix + "rel_bias");
  const long ext = static_cast<long>(4 * m - 1), off = static_cast<long>(2 * m - 1);
  Tensor<double> attn({d, h, w});
  for (std::size_t p = 0; p < n; ++p) {
    const long py = static_cast<long>(p / w), px = static_cast<long>(p % w);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      std::vector<double> logits(n, 0.0);
      std::vector<bool> admitted(n, false);
      double mx = -1e300;
      for (std::size_t q = 0; q < n; ++q) {
        const long qy = static_cast<long>(q / w), qx = static_cast<long>(q % w);
        const long dpy = qy / static_cast<long>(m) - py / static_cast<long>(m);
        const long dpx = qx / static_cast<long>(m) - px / static_cast<long>(m);
        if (std::labs(dpy) > 1 || std::labs(dpx) > 1) continue;
        double dot = 0;
        for (std::size_t c = 0; c < dk; ++c) dot += Q[p][hd * dk + c] * K[q][hd * dk + c];
        const long ty = qy - py + off, tx = qx - px + off;
        logits[q] = dot / std::sqrt(static_cast<double>(dk)) +
                    table[(hd * static_cast<std::size_t>(ext) + static_cast<std::size_t>(ty)) * static_cast<std::size_t>(ext) +
                          static_cast<std::size_t>(tx)];
        admitted[q] = true;
        mx = std::max(mx, logits[q]);
      }
      double z = 0;
      for (std::size_t q = 0; q < n; ++q)
        if (admitted[q]) z += std::exp(logits[q] - mx);
      for (std::size_t q = 0; q < n; ++q) {
        if (!admitted[q]) continue;
        const double a = std::exp(logits[q] - mx) / z;
        for (std::size_t c = 0; c < dk; ++c) attn[(hd * dk + c) * n + p] += a * V[q][hd * dk + c];
      }
    }
  }
  const auto out = project(attn, "out");
  Tensor<double> y({d, h, w});
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t o = 0; o < d; ++o) y[o * n + p] = out[p][o];
  return y;
}

struct Matches {
  std::vector<std::size_t> forward, backward;
  std::vector<bool> mutual;
};

/// Exhaustive argmax in both directions over P = softmax_rows(C) * softmax_cols(C),
/// smallest index on ties, and the mutual check.
inline Matches brute_force_matches(const std::vector<double>& cost, std::size_t n1, std::size_t n2) {
  std::vector<double> row(n1 * n2), col(n1 * n2), p(n1 * n2);
  for (std::size_t s = 0; s < n1; ++s) {
    double z = 0;
    for (std::size_t t = 0; t < n2; ++t) z += std::exp(cost[s * n2 + t]);
    for (std::size_t t = 0; t < n2; ++t) row[s * n2 + t] = std::exp(cost[s * n2 + t]) / z;
  }
  for (std::size_t t = 0; t < n2; ++t) {
    double z = 0;
    for (std::size_t s = 0; s < n1; ++s) z += std::exp(cost[s * n2 + t]);
    for (std::size_t s = 0; s < n1; ++s) col[s * n2 + t] = std::exp(cost[s * n2 + t]) / z;
  }
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = row[i] * col[i];
  Matches m{std::vector<std::size_t>(n1), std::vector<std::size_t>(n2), std::vector<bool>(n1)};
  for (std::size_t s = 0; s < n1; ++s) {
    std::size_t best = 0;
    for (std::size_t t = 1; t < n2; ++t)
      if (p[s * n2 + t] > p[s * n2 + best]) best = t;
    m.forward[s] = best;
  }
  for (std::size_t t = 0; t < n2; ++t) {
    std::size_t best = 0;
    for (std::size_t s = 1; s < n1; ++s)
      if (p[s * n2 + t] > p[best * n2 + t]) best = s;
    m.backward[t] = best;
  }
  for (std::size_t s = 0; s < n1; ++s) m.mutual[s] = m.backward[m.forward[s]] == s;
  return m;
}

}  // namespace gmflow::oracle
