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

// Adam on the total loss L = L_O + lambda L_M with global-norm gradient
// clipping and a linear learning-rate warmup.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "gmflow/dataio/synth.hpp"
#include "gmflow/model.hpp"
#include "gmflow/supervision.hpp"

namespace gmflow {

struct LossConfig {
  double lambda = 1.0;  // matching-loss weight
  double gamma = 0.8;   // sequence decay
  std::size_t iters = 4;

  void validate() const {
    if (!(lambda >= 0)) throw Error("loss: lambda must be >= 0");
    if (!(gamma > 0 && gamma <= 1)) throw Error("loss: gamma must lie in (0, 1]");
    if (iters < 1) throw Error("loss: iteration count must be >= 1");
  }
};

struct TrainConfig {
  double lr = 1e-3;
  std::size_t steps = 200;
  double clip = 1.0;  // global gradient-norm threshold
  std::uint64_t seed = 0;
  std::size_t batch = 2;
  std::size_t warmup = 50;  // linear ramp from lr / warmup to lr
  std::size_t log_every = 10;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  void validate() const {
    if (!(lr > 0)) throw Error("train: learning rate must be positive");
    if (steps == 0) throw Error("train: step count must be positive");
    if (!(clip > 0)) throw Error("train: clip threshold must be positive");
    if (batch == 0) throw Error("train: batch size must be positive");
    if (log_every == 0) throw Error("train: log interval must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0))
      throw Error("train: invalid Adam moments");
  }
};

struct TraceRow {
  std::size_t step = 0;  // 1-based
  double total = 0, flow = 0, matching = 0, aepe = 0;
};

inline void write_trace_header(std::ostream& os) { os << "step\ttotal\tL_O\tL_M\tAEPE\n"; }

inline void write_trace_row(std::ostream& os, const TraceRow& r) {
  os << r.step << '\t' << r.total << '\t' << r.flow << '\t' << r.matching << '\t' << r.aepe << '\n';
}

/// Per-sample losses and gradients. Gradients are added to `store` scaled by `grad_scale`.
struct SampleLoss {
  double total = 0, flow = 0, matching = 0, aepe = 0;
};

template <class T>
SampleLoss accumulate_sample(const FlowSample<T>& s, const GtMatchSet& gt, ParamStore<T>& store, const ModelConfig& cfg,
                             const LossConfig& loss, T grad_scale) {
  Graph<T> g(true);
  auto fp = forward(g, s.image1, s.image2, store, cfg, loss.iters);
  Var lo = ad::sequence_loss(g, fp.flows_full, s.flow.data, static_cast<T>(loss.gamma));
  Var lm = ad::matching_nll(g, fp.log_confidence, gt);
  Var total = ad::total_loss(g, lo, lm, static_cast<T>(loss.lambda));
  SampleLoss out{g.value(total)[0], g.value(lo)[0], g.value(lm)[0], 0};
  if (std::isfinite(out.total)) {
    g.backward(total);
    g.accumulate_into(store, grad_scale);
  }
  const auto& pred = g.value(fp.flows_full.back());
  double e = 0;
  const std::size_t n = s.flow.height() * s.flow.width();
  for (std::size_t p = 0; p < n; ++p)
    e += std::hypot(static_cast<double>(pred[p] - s.flow.data[p]), static_cast<double>(pred[n + p] - s.flow.data[n + p]));
  out.aepe = e / static_cast<double>(n);
  return out;
}

class Adam {
 public:
  explicit Adam(const TrainConfig& cfg) : cfg_(cfg) {}

  /// Clips the global gradient norm, then takes one step at `lr`. Returns the
  /// pre-clip norm.
  template <class T>
  double step(ParamStore<T>& store, double lr) {
    double sq = 0;
    for (auto& [name, e] : store.entries())
      for (T g : e.grad.values()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    const double scale = norm > cfg_.clip ? cfg_.clip / norm : 1.0;
    ++t_;
    const double bc1 = 1 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, e] : store.entries()) {
      auto& st = state_[name];
      if (st.m.empty()) {
        st.m.assign(e.value.size(), 0.0);
        st.v.assign(e.value.size(), 0.0);
      }
      for (std::size_t i = 0; i < e.value.size(); ++i) {
        const double g = static_cast<double>(e.grad[i]) * scale;
        st.m[i] = cfg_.beta1 * st.m[i] + (1 - cfg_.beta1) * g;
        st.v[i] = cfg_.beta2 * st.v[i] + (1 - cfg_.beta2) * g * g;
        const double upd = lr * (st.m[i] / bc1) / (std::sqrt(st.v[i] / bc2) + cfg_.adam_eps);
        e.value[i] = static_cast<T>(static_cast<double>(e.value[i]) - upd);
      }
    }
    return norm;
  }

 private:
  struct State {
    std::vector<double> m, v;
  };
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, State> state_;
};

inline double warmup_lr(const TrainConfig& cfg, std::size_t step) {
  if (cfg.warmup == 0 || step >= cfg.warmup) return cfg.lr;
  return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup);
}

/// Trains `store` in place. Every `log_every` steps (and on the last step) a
/// row averaging the losses of the steps since the previous row is appended to
/// the returned trace and, if given, written to `trace`.
template <class T>
std::vector<TraceRow> train(ParamStore<T>& store, const std::vector<FlowSample<T>>& data, const ModelConfig& cfg,
                            const TrainConfig& tc, const LossConfig& lc, std::ostream* trace = nullptr) {
  cfg.validate();
  tc.validate();
  lc.validate();
  if (data.empty()) throw Error("train: empty dataset");
  std::vector<GtMatchSet> gts;
  for (const auto& s : data) gts.push_back(gt_match_set(s.flow, s.occlusion));

  Rng rng(tc.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const std::size_t batch = std::min(tc.batch, data.size());

  Adam adam(tc);
  std::vector<TraceRow> rows;
  TraceRow acc;
  std::size_t acc_n = 0;
  if (trace) write_trace_header(*trace);
  for (std::size_t step = 0; step < tc.steps; ++step) {
    store.zero_grad();
    SampleLoss sum;
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        cursor = 0;
      }
      const std::size_t k = order[cursor++];
      const auto l = accumulate_sample(data[k], gts[k], store, cfg, lc, T(1) / static_cast<T>(batch));
      if (!std::isfinite(l.total)) throw Error("train: non-finite loss at step " + std::to_string(step + 1));
      sum.total += l.total / static_cast<double>(batch);
      sum.flow += l.flow / static_cast<double>(batch);
      sum.matching += l.matching / static_cast<double>(batch);
      sum.aepe += l.aepe / static_cast<double>(batch);
    }
    adam.step(store, warmup_lr(tc, step));
    if (!store.all_finite()) throw Error("train: non-finite parameters after step " + std::to_string(step + 1));
    acc.total += sum.total;
    acc.flow += sum.flow;
    acc.matching += sum.matching;
    acc.aepe += sum.aepe;
    ++acc_n;
    if ((step + 1) % tc.log_every == 0 || step + 1 == tc.steps) {
      const double n = static_cast<double>(acc_n);
      TraceRow row{step + 1, acc.total / n, acc.flow / n, acc.matching / n, acc.aepe / n};
      rows.push_back(row);
      if (trace) write_trace_row(*trace, row);
      acc = {};
      acc_n = 0;
    }
  }
  return rows;
}

/// Mean full-resolution AEPE of the model's final prediction over a dataset.
template <class T>
double dataset_aepe(const std::vector<FlowSample<T>>& data, const ParamStore<T>& store, const ModelConfig& cfg) {
  double s = 0;
  for (const auto& d : data) {
    const auto p = predict(d.image1, d.image2, store, cfg);
    double e = 0;
    for (std::size_t y = 0; y < d.flow.height(); ++y)
      for (std::size_t x = 0; x < d.flow.width(); ++x)
        e += std::hypot(static_cast<double>(p.flow.u(y, x) - d.flow.u(y, x)),
                        static_cast<double>(p.flow.v(y, x) - d.flow.v(y, x)));
    s += e / static_cast<double>(d.flow.height() * d.flow.width());
  }
  return s / static_cast<double>(data.size());
}

}  // namespace gmflow
