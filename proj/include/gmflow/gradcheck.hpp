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

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "gmflow/graph.hpp"

namespace gmflow {

struct GradCheckOptions {
  double eps = 1e-4;
  double tol = 1e-4;
  /// Denominator floor of the relative error, so entries whose true gradient
  /// is ~0 are judged on absolute error instead.
  double floor = 1e-6;
  /// The loss is piecewise smooth (relu, |x|, bilinear cells, argmax). With
  /// this set, the branch taken at every such point is recorded on the
  /// analytic pass and replayed on the perturbed passes, so the difference
  /// quotient measures the piece the analytic gradient belongs to.
  bool freeze_branches = true;
  /// Multiplies the analytic gradient before comparison. Anything other than
  /// 1 corrupts the check on purpose; used to prove the checker can fail.
  double analytic_scale = 1.0;
};

struct ParamGradError {
  std::string name;
  double max_rel_error = 0;
  std::size_t worst_index = 0;
  double analytic = 0;  // at worst_index
  double numeric = 0;
  bool pass = true;
};

struct GradCheckReport {
  double eps = 0;
  double tol = 0;
  std::vector<ParamGradError> params;

  bool pass() const {
    return std::all_of(params.begin(), params.end(), [](const auto& p) { return p.pass; });
  }
  double worst() const {
    double w = 0;
    for (const auto& p : params) w = std::max(w, p.max_rel_error);
    return w;
  }
};

/// Builds the scalar loss on the given graph from the given parameters.
using LossBuilder = std::function<Var(Graph<double>&, const ParamStore<double>&)>;

/// Compares reverse-mode gradients against central differences
/// (f(p + eps) - f(p - eps)) / 2 eps for every scalar of every parameter.
/// Relative error per entry is |a - n| / max(|a|, |n|, floor).
inline GradCheckReport grad_check(const LossBuilder& build, ParamStore<double>& params,
                                  const GradCheckOptions& opts = {}) {
  params.zero_grad();
  auto branches = opts.freeze_branches ? std::make_shared<BranchLog>() : nullptr;
  {
    Graph<double> g(true);
    if (branches) g.set_branch_mode(BranchMode::record, branches);
    Var loss = build(g, params);
    if (!std::isfinite(g.value(loss)[0])) throw Error("grad_check: non-finite loss at the unperturbed point");
    g.backward(loss);
    g.accumulate_into(params);
  }
  auto evaluate = [&](const std::string& name) {
    Graph<double> g(false);
    if (branches) g.set_branch_mode(BranchMode::replay, branches);
    const double v = g.value(build(g, params))[0];
    if (!std::isfinite(v)) throw Error("grad_check: non-finite loss while perturbing '" + name + "'");
    return v;
  };

  GradCheckReport report{opts.eps, opts.tol, {}};
  for (auto& [name, entry] : params.entries()) {
    ParamGradError err;
    err.name = name;
    for (std::size_t i = 0; i < entry.value.size(); ++i) {
      const double saved = entry.value[i];
      entry.value[i] = saved + opts.eps;
      const double up = evaluate(name);
      entry.value[i] = saved - opts.eps;
      const double down = evaluate(name);
      entry.value[i] = saved;
      const double numeric = (up - down) / (2 * opts.eps);
      const double analytic = entry.grad[i] * opts.analytic_scale;
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), opts.floor});
      if (i == 0 || rel > err.max_rel_error) {
        err.max_rel_error = rel;
        err.worst_index = i;
        err.analytic = analytic;
        err.numeric = numeric;
      }
    }
    err.pass = err.max_rel_error < opts.tol;
    report.params.push_back(err);
  }
  return report;
}

}  // namespace gmflow
