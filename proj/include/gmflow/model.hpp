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

#include <cmath>
#include <optional>
#include <vector>

#include "gmflow/features.hpp"
#include "gmflow/matcher.hpp"
#include "gmflow/refiner.hpp"

namespace gmflow {

/// How the refiner is initialised: from the mutual-match coarse flow or from zero.
enum class FlowInit { coarse, zero };

struct ModelConfig {
  PolaConfig features;
  RefinerConfig refiner;
  FlowInit init = FlowInit::coarse;
  double temperature = 1.0;  // dual-softmax temperature

  void validate() const {
    features.validate();
    if (refiner.hidden == 0 || refiner.motion == 0) throw Error("refiner widths must be positive");
    (void)refiner.lookup.offsets();
    if (!(temperature > 0)) throw Error("dual-softmax temperature must be positive");
  }
};

template <class T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamStore<T> store;
  features::add_params(store, cfg.features, rng);
  refiner::add_params(store, cfg.refiner, cfg.features.dim, rng);
  return store;
}

/// Everything one forward pass produces. Vars refer to the graph passed in.
template <class T>
struct ForwardPass {
  Var features1, features2;
  Var cost;
  Var log_confidence;
  MatchResult matches;
  FlowField<T> coarse;             // mutual-match flow, 1/8 resolution
  FlowField<T> initial;            // refiner start: coarse or zero
  std::vector<Var> flows;          // f^1..f^T at 1/8 resolution
  std::vector<Var> flows_full;     // the same, upsampled
};

template <class T>
ForwardPass<T> forward(Graph<T>& g, const Tensor<T>& image1, const Tensor<T>& image2, const ParamStore<T>& store,
                       const ModelConfig& cfg, std::optional<std::size_t> iters = std::nullopt) {
  require_same_shape(image1.shape(), image2.shape(), "image pair");
  ForwardPass<T> out;
  out.features1 = features::extract_context(g, g.constant(image1), store, cfg.features);
  out.features2 = features::extract_context(g, g.constant(image2), store, cfg.features);
  out.cost = ad::cost_volume(g, out.features1, out.features2);
  out.log_confidence = ad::log_dual_softmax(g, out.cost, static_cast<T>(cfg.temperature));

  const auto& logp = g.value(out.log_confidence);
  out.matches = select_matches(map(logp, [](T v) { return std::exp(v); }));
  if (auto* slot = g.branch_slot(out.matches.forward.size() + out.matches.backward.size())) {
    auto& m = out.matches;
    const std::size_t nf = m.forward.size();
    for (std::size_t i = 0; i < nf; ++i) m.forward[i] = static_cast<std::size_t>(g.decide(slot, i, static_cast<std::int32_t>(m.forward[i])));
    for (std::size_t j = 0; j < m.backward.size(); ++j)
      m.backward[j] = static_cast<std::size_t>(g.decide(slot, nf + j, static_cast<std::int32_t>(m.backward[j])));
    for (std::size_t i = 0; i < nf; ++i) m.mutual[i] = m.backward[m.forward[i]] == i;
  }
  const auto& f1 = g.value(out.features1);
  out.coarse = coarse_flow<T>(out.matches);
  out.initial = cfg.init == FlowInit::coarse ? out.coarse : FlowField<T>(f1.dim(1), f1.dim(2), FlowScale::eighth);

  out.flows = refiner::refine(g, out.features1, out.cost, g.constant(out.initial.data), iters.value_or(cfg.refiner.iters), store,
                              cfg.refiner);
  for (Var f : out.flows) out.flows_full.push_back(ad::upsample_bilinear(g, f, 8, T(8)));
  return out;
}

template <class T>
struct Prediction {
  FlowField<T> flow;    // final full-resolution flow (upsampled initial flow when T = 0)
  FlowField<T> coarse;  // 1/8 resolution
  MatchResult matches;
  CostVolume<T> cost;
};

template <class T>
Prediction<T> predict(const Tensor<T>& image1, const Tensor<T>& image2, const ParamStore<T>& store,
                      const ModelConfig& cfg) {
  Graph<T> g(false);
  auto fp = forward(g, image1, image2, store, cfg);
  Prediction<T> p;
  p.flow = fp.flows_full.empty() ? upsample_flow(fp.initial) : FlowField<T>(g.value(fp.flows_full.back()), FlowScale::full);
  p.coarse = fp.coarse;
  p.matches = fp.matches;
  p.cost = {g.value(fp.cost)};
  return p;
}

}  // namespace gmflow
