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

// The `gmflow` workbench. run_cli returns the process exit status: 0 on
// success, 2 on a usage error, 1 on a runtime failure.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "gmflow/config.hpp"
#include "gmflow/dataio/color.hpp"
#include "gmflow/dataio/costvis.hpp"
#include "gmflow/dataio/dataset.hpp"
#include "gmflow/dataio/metrics.hpp"
#include "gmflow/gradcheck.hpp"
#include "gmflow/train.hpp"

namespace gmflow {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

namespace cli {

struct Options {
  std::string config, out, data, ckpt, i1, i2, bin = "s40+";
  std::vector<std::string> overrides;
  std::size_t radius = kDefaultCostVisRadius;
  bool corrupt_gradient = false;
};

inline RunConfig resolve_config(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : config::load(o.config);
  for (const auto& s : o.overrides) config::assign(cfg, s);
  cfg.validate();
  return cfg;
}

struct Checkpoint {
  RunConfig cfg;
  ParamStore<float> params;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  auto loaded = load_params(path);
  Checkpoint c{config::parse(loaded.meta, path + " (embedded config)"), std::move(loaded.params)};
  const auto expected = init_params<float>(c.cfg.model, 0);
  for (const auto& [name, e] : expected.entries()) {
    if (!c.params.contains(name)) throw Error(path + ": missing parameter '" + name + "'");
    if (c.params.value(name).shape() != e.value.shape())
      throw Error(path + ": parameter '" + name + "' has shape " + shape_str(c.params.value(name).shape()) +
                  ", expected " + shape_str(e.value.shape()));
  }
  if (c.params.size() != expected.size()) throw Error(path + ": unexpected extra parameters");
  return c;
}

inline int synth(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  std::filesystem::create_directories(o.out);
  for (std::size_t i = 0; i < cfg.data_count; ++i) {
    SynthSpec spec = cfg.data;
    spec.seed = cfg.data.seed + i;
    write_sample(o.out, i, synth_pair<float>(spec));
  }
  std::ofstream(std::filesystem::path(o.out) / "synth.cfg") << config::to_text(cfg);
  out << "wrote " << cfg.data_count << " pairs to " << o.out << '\n';
  return kExitOk;
}

inline int train(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  std::vector<FlowSample<float>> data;
  for (auto& ns : load_dataset(o.data)) data.push_back(std::move(ns.sample));
  auto params = init_params<float>(cfg.model, cfg.train.seed);
  std::filesystem::create_directories(o.out);
  const auto dir = std::filesystem::path(o.out);
  std::ofstream trace(dir / "trace.tsv");
  if (!trace) throw Error("cannot write '" + (dir / "trace.tsv").string() + "'");
  const auto rows = gmflow::train(params, data, cfg.model, cfg.train, cfg.loss_config(), &trace);
  save_params((dir / "model.ckpt").string(), params, config::to_text(cfg));
  out << "trained " << cfg.train.steps << " steps on " << data.size() << " pairs; final loss " << rows.back().total
      << ", train AEPE " << rows.back().aepe << '\n';
  return kExitOk;
}

inline int eval(const Options& o, std::ostream& out) {
  const auto ck = load_checkpoint(o.ckpt);
  std::vector<EpeReport> reports;
  for (const auto& ns : load_dataset(o.data)) {
    const auto p = predict(ns.sample.image1, ns.sample.image2, ck.params, ck.cfg.model);
    reports.push_back(epe_metrics(p.flow, ns.sample.flow));
  }
  out << format_report(merge_reports(reports));
  return kExitOk;
}

inline int flow(const Options& o, std::ostream& out) {
  const auto ck = load_checkpoint(o.ckpt);
  const auto img1 = to_tensor<float>(read_png(o.i1));
  const auto img2 = to_tensor<float>(read_png(o.i2));
  if (img1.shape() != img2.shape())
    throw Error("frames differ in size: " + shape_str(img1.shape()) + " vs " + shape_str(img2.shape()));
  const auto p = predict(img1, img2, ck.params, ck.cfg.model);
  write_flo(p.flow, o.out + ".flo");
  write_png(flow_to_color(p.flow), o.out + ".png");
  out << "wrote " << o.out << ".flo and " << o.out << ".png\n";
  return kExitOk;
}

inline int matchstats(const Options& o, std::ostream& out) {
  const auto ck = load_checkpoint(o.ckpt);
  out << std::fixed << std::setprecision(4) << "pair\tcoverage\tmatch_accuracy\tcoarse_AEPE\n";
  double cov = 0, acc = 0, aepe = 0;
  const auto data = load_dataset(o.data);
  for (const auto& ns : data) {
    const auto& s = ns.sample;
    const auto p = predict(s.image1, s.image2, ck.params, ck.cfg.model);
    const auto gt = gt_match_set(s.flow, s.occlusion);
    std::size_t hit = 0, n = 0;
    for (std::size_t i = 0; i < gt.matched.size(); ++i)
      if (gt.matched[i] && p.matches.mutual[i]) {
        ++n;
        hit += p.matches.forward[i] == gt.target[i];
      }
    const double a = n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
    const double e = epe_metrics(upsample_flow(p.coarse), s.flow).aepe();
    out << ns.name << '\t' << p.matches.coverage() << '\t' << a << '\t' << e << '\n';
    cov += p.matches.coverage();
    acc += a;
    aepe += e;
  }
  const double n = static_cast<double>(data.size());
  out << "mean\t" << cov / n << '\t' << acc / n << '\t' << aepe / n << '\n';
  return kExitOk;
}

inline int costvis(const Options& o, std::ostream& out) {
  const auto ck = load_checkpoint(o.ckpt);
  const auto& bin = find_bin(o.bin);
  if (o.radius < 1) throw Error("costvis: --radius must be >= 1");
  CostVisResult acc;
  for (const auto& ns : load_dataset(o.data)) {
    const auto p = predict(ns.sample.image1, ns.sample.image2, ck.params, ck.cfg.model);
    accumulate_costvis(p.cost, eighth_flow(ns.sample.flow), bin, o.radius, acc);
  }
  const auto r = finish_costvis(std::move(acc), bin, o.radius);
  write_png(render_heatmap(r.matrix), o.out);
  out << "bin " << bin.label << ": " << r.points << " points (" << r.skipped << " skipped), center mass "
      << r.matrix[o.radius * 2 * o.radius + o.radius] << "; wrote " << o.out << '\n';
  return kExitOk;
}

/// Full-model check in double precision on one synthetic pair.
inline int gradcheck(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  SynthSpec spec = cfg.data;
  spec.height = spec.width = cfg.gradcheck_size;
  spec.max_disp = std::min(spec.max_disp, static_cast<double>(cfg.gradcheck_size) / 4);
  spec.min_disp = std::min(spec.min_disp, spec.max_disp);
  const auto sample = synth_pair<double>(spec);
  const auto gt = gt_match_set(sample.flow, sample.occlusion);
  auto params = init_params<double>(cfg.model, cfg.train.seed);
  Rng rng(cfg.train.seed + 1);
  for (auto& [name, e] : params.entries())
    for (auto& v : e.value.values()) v += rng.uniform(-cfg.gradcheck_perturb, cfg.gradcheck_perturb);
  const auto lc = cfg.loss_config();
  auto build = [&](Graph<double>& g, const ParamStore<double>& p) {
    auto fp = forward(g, sample.image1, sample.image2, p, cfg.model, lc.iters);
    Var lo = ad::sequence_loss(g, fp.flows_full, sample.flow.data, lc.gamma);
    Var lm = ad::matching_nll(g, fp.log_confidence, gt);
    return ad::total_loss(g, lo, lm, lc.lambda);
  };
  GradCheckOptions opts = cfg.gradcheck;
  if (o.corrupt_gradient) opts.analytic_scale = 2.0;
  const auto rep = grad_check(build, params, opts);
  out << "parameter\tmax_rel_error\tstatus\n";
  for (const auto& p : rep.params)
    out << p.name << '\t' << std::scientific << std::setprecision(3) << p.max_rel_error << '\t'
        << (p.pass ? "ok" : "FAIL") << '\n';
  out << (rep.pass() ? "PASS" : "FAIL") << ": worst relative error " << rep.worst() << " (eps " << rep.eps << ", tol "
      << rep.tol << ", " << params.scalar_count() << " scalars)\n";
  return rep.pass() ? kExitOk : kExitFailure;
}

}  // namespace cli

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"gmflow: global matching optical flow workbench", "gmflow"};
  app.require_subcommand(1);
  cli::Options o;
  auto add_config = [&](CLI::App* sub, const char* flag) {
    sub->add_option(flag, o.config, "run configuration (key = value)")->check(CLI::ExistingFile);
    sub->add_option("--set", o.overrides, "override one key, e.g. --set train.steps=100 (wins over the file)");
  };
  auto* synth = app.add_subcommand("synth", "write synthetic pairs, ground truth and occlusion masks");
  add_config(synth, "--spec");
  synth->add_option("--out", o.out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train a model; writes model.ckpt and trace.tsv");
  add_config(train, "--config");
  train->add_option("--data", o.data, "dataset directory")->required();
  train->add_option("--out", o.out, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "print end-point-error table by displacement bin");
  eval->add_option("--ckpt", o.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", o.data, "dataset directory")->required();

  auto* flow = app.add_subcommand("flow", "estimate flow for one pair; writes <out>.flo and <out>.png");
  flow->add_option("--ckpt", o.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  flow->add_option("--i1", o.i1, "first frame (PNG)")->required()->check(CLI::ExistingFile);
  flow->add_option("--i2", o.i2, "second frame (PNG)")->required()->check(CLI::ExistingFile);
  flow->add_option("--out", o.out, "output prefix")->required();

  auto* matchstats = app.add_subcommand("matchstats", "mutual-match coverage and coarse-flow error");
  matchstats->add_option("--ckpt", o.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  matchstats->add_option("--data", o.data, "dataset directory")->required();

  auto* costvis = app.add_subcommand("costvis", "averaged local matching matrix as a heatmap");
  costvis->add_option("--ckpt", o.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  costvis->add_option("--data", o.data, "dataset directory")->required();
  costvis->add_option("--bin", o.bin, "displacement bin: s0-10, s10-40 or s40+")
      ->check(CLI::IsMember({"s0-10", "s10-40", "s40+"}));
  costvis->add_option("--radius", o.radius, "window half-width w at 1/8 resolution");
  costvis->add_option("--out", o.out, "output PNG")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "full-model finite-difference gradient check");
  add_config(gradcheck, "--config");
  gradcheck->add_flag("--corrupt-gradient", o.corrupt_gradient, "test hook: double the analytic gradient");

  if (argc > 1 && argv[1][0] != '-') {
    const std::string name = argv[1];
    const auto subs = app.get_subcommands([](const CLI::App*) { return true; });
    if (std::none_of(subs.begin(), subs.end(), [&](const CLI::App* s) { return s->get_name() == name; })) {
      err << "gmflow: unknown subcommand '" << name << "'\n\n" << app.help();
      return kExitUsage;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "gmflow: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (synth->parsed()) return cli::synth(o, out);
    if (train->parsed()) return cli::train(o, out);
    if (eval->parsed()) return cli::eval(o, out);
    if (flow->parsed()) return cli::flow(o, out);
    if (matchstats->parsed()) return cli::matchstats(o, out);
    if (costvis->parsed()) return cli::costvis(o, out);
    if (gradcheck->parsed()) return cli::gradcheck(o, out);
  } catch (const std::exception& e) {
    err << "gmflow: " << e.what() << '\n';
    return kExitFailure;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace gmflow
