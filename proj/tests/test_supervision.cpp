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

#include <cmath>

#include "gmflow/train.hpp"
#include "support.hpp"

namespace gmflow {
namespace {

using testing::random_tensor;

FlowField<double> constant_flow(std::size_t h, std::size_t w, double u, double v) {
  FlowField<double> f(h, w, FlowScale::full);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      f.u(y, x) = u;
      f.v(y, x) = v;
    }
  return f;
}

TEST(GtMatchSet, ZeroFlowMatchesEveryCellToItself) {
  const auto s = gt_match_set(constant_flow(24, 32, 0, 0), Mask({24, 32}));
  ASSERT_EQ(s.h, 3u);
  ASSERT_EQ(s.w, 4u);
  EXPECT_EQ(s.count(), 12u);
  for (std::size_t c = 0; c < 12; ++c) EXPECT_EQ(s.target[c], c);
}

TEST(GtMatchSet, FullyOccludedFrameIsEmpty) {
  const auto s = gt_match_set(constant_flow(16, 16, 0, 0), Mask({16, 16}, 1));
  EXPECT_EQ(s.count(), 0u);
}

TEST(GtMatchSet, OcclusionAtTheAnchorUnmatchesTheCell) {
  Mask occ({16, 16});
  occ[4 * 16 + 11] = 1;  // a central pixel of cell (0, 1)
  occ[0] = 1;            // a corner pixel of cell (0, 0), away from its anchor
  const auto s = gt_match_set(constant_flow(16, 16, 0, 0), occ);
  EXPECT_EQ(s.matched, (std::vector<std::uint8_t>{1, 0, 1, 1}));
}

TEST(GtMatchSet, IntegerTranslationKeepsExactlyInBoundsTargets) {
  const auto s = gt_match_set(constant_flow(32, 40, 16, -8), Mask({32, 40}));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      const bool inside = i >= 1 && j + 2 < 5;
      EXPECT_EQ(s.matched[i * 5 + j] != 0, inside) << i << "," << j;
      if (inside) {
        EXPECT_EQ(s.target[i * 5 + j], (i - 1) * 5 + j + 2);
      }
    }
}

TEST(GtMatchSet, RoundsTheOneEighthFlow) {
  const auto s = gt_match_set(constant_flow(16, 16, 4.5, 3.9), Mask({16, 16}));
  // 4.5 / 8 = 0.5625 -> 1, 3.9 / 8 = 0.4875 -> 0
  EXPECT_EQ(s.matched, (std::vector<std::uint8_t>{1, 0, 1, 0}));
  EXPECT_EQ(s.target[0], 1u);
  EXPECT_EQ(s.target[2], 3u);
}

TEST(EighthFlow, AveragesTheCentralPixels) {
  FlowField<double> f(8, 8, FlowScale::full);
  f.u(3, 3) = 8;
  f.u(4, 4) = 24;
  f.v(3, 4) = -32;
  f.u(0, 0) = 1000;
  const auto e = eighth_flow(f);
  EXPECT_DOUBLE_EQ(e.u(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(e.v(0, 0), -1.0);
  EXPECT_THROW(eighth_flow(FlowField<double>(12, 8, FlowScale::full)), Error);
}

GtMatchSet diagonal_set(std::size_t n) {
  GtMatchSet s{1, n, std::vector<std::uint8_t>(n, 1), {}};
  for (std::size_t i = 0; i < n; ++i) s.target.push_back(i);
  return s;
}

TEST(MatchingLoss, IsZeroWhenGtPairsHaveUnitConfidence) {
  Tensor<double> p({1, 3, 1, 3});
  for (std::size_t i = 0; i < 3; ++i) p[i * 3 + i] = 1.0;
  const auto l = matching_loss(p, diagonal_set(3));
  EXPECT_FALSE(l.empty);
  EXPECT_DOUBLE_EQ(l.value, 0.0);
}

TEST(MatchingLoss, IsOneAtConfidenceOneOverE) {
  Tensor<double> p({1, 3, 1, 3}, 0.1);
  for (std::size_t i = 0; i < 3; ++i) p[i * 3 + i] = std::exp(-1.0);
  EXPECT_NEAR(matching_loss(p, diagonal_set(3)).value, 1.0, 1e-12);
}

TEST(MatchingLoss, EmptyGtSetIsFlaggedZero) {
  GtMatchSet s = diagonal_set(3);
  s.matched.assign(3, 0);
  const auto l = matching_loss(Tensor<double>({1, 3, 1, 3}, 0.5), s);
  EXPECT_TRUE(l.empty);
  EXPECT_EQ(l.value, 0.0);
}

TEST(MatchingLoss, ClampsZeroConfidence) {
  const auto l = matching_loss(Tensor<double>({1, 2, 1, 2}), diagonal_set(2));
  EXPECT_NEAR(l.value, -std::log(1e-12), 1e-9);
  EXPECT_GE(l.value, 0.0);
}

TEST(MatchingLoss, GraphFormAgreesWithDirectForm) {
  Rng rng(51);
  CostVolume<double> c{random_tensor({2, 2, 2, 2}, rng, -3, 3)};
  auto gt = diagonal_set(4);
  gt.h = 2;
  gt.w = 2;
  gt.matched[2] = 0;
  gt.target[1] = 3;
  const auto direct = matching_loss(match_confidence(c).values, gt);
  Graph<double> g(false);
  const double viagraph = g.value(ad::matching_nll(g, ad::log_dual_softmax(g, g.constant(c.values)), gt))[0];
  EXPECT_NEAR(viagraph, direct.value, 1e-12);
}

std::vector<FlowField<double>> offset_preds(const FlowField<double>& gt, const std::vector<double>& errors) {
  std::vector<FlowField<double>> out;
  for (double e : errors) {
    auto f = gt;
    for (auto& v : f.data.values()) v += e;
    out.push_back(f);
  }
  return out;
}

TEST(SequenceLoss, DecaysEarlierIterates) {
  const auto gt = constant_flow(8, 8, 1.5, -2);
  EXPECT_NEAR(sequence_loss(offset_preds(gt, {1, 1}), gt, 0.8, 2), 1.8, 1e-12);
  EXPECT_NEAR(sequence_loss(offset_preds(gt, {-0.25}), gt, 0.8, 1), 0.25, 1e-12);
  EXPECT_EQ(sequence_loss(offset_preds(gt, {0, 0, 0}), gt, 0.8, 3), 0.0);
}

TEST(SequenceLoss, RejectsLengthMismatch) {
  const auto gt = constant_flow(8, 8, 0, 0);
  EXPECT_THROW(sequence_loss(offset_preds(gt, {1, 1}), gt, 0.8, 3), Error);
}

TEST(SequenceLoss, IsMonotoneInEachEntry) {
  Rng rng(52);
  const auto gt = constant_flow(8, 8, 0.5, 0.5);
  auto preds = offset_preds(gt, {0.3, -0.2, 0.1});
  for (auto& p : preds)
    for (auto& v : p.data.values()) v += rng.uniform(-1, 1);
  double prev = sequence_loss(preds, gt, 0.8, 3);
  for (int k = 0; k < 50; ++k) {
    auto& p = preds[static_cast<std::size_t>(rng.integer(0, 2))];
    const std::size_t idx = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(p.data.size()) - 1));
    const double d = p.data[idx] - gt.data[idx];
    p.data[idx] += d >= 0 ? 0.1 : -0.1;
    const double next = sequence_loss(preds, gt, 0.8, 3);
    EXPECT_GE(next, prev);
    prev = next;
  }
}

TEST(SequenceLoss, GraphFormAgreesWithDirectForm) {
  Rng rng(53);
  const auto gt = constant_flow(8, 8, 0.5, 0.5);
  std::vector<FlowField<double>> preds;
  Graph<double> g(false);
  std::vector<Var> vars;
  for (int i = 0; i < 3; ++i) {
    preds.emplace_back(random_tensor({2, 8, 8}, rng), FlowScale::full);
    vars.push_back(g.constant(preds.back().data));
  }
  EXPECT_NEAR(g.value(ad::sequence_loss(g, vars, gt.data, 0.8))[0], sequence_loss(preds, gt, 0.8, 3), 1e-12);
}

TEST(TotalLoss, WeightsTheMatchingTerm) {
  EXPECT_EQ(total_loss(2.0, 3.0, 0.0), 2.0);
  EXPECT_EQ(total_loss(2.0, 3.0, 1.0), 5.0);
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.features.dim = 8;
  m.features.heads = 2;
  m.features.patch = 2;
  m.features.blocks = 1;
  m.features.stem1 = 4;
  m.features.stem2 = 6;
  m.features.mlp_ratio = 2;
  m.refiner.hidden = 4;
  m.refiner.motion = 4;
  m.refiner.iters = 2;
  m.refiner.lookup = {2, LookupBall::l1};
  return m;
}

struct TinyModelFixture : ::testing::Test {
  ModelConfig cfg = tiny_model();
  FlowSample<double> sample;
  GtMatchSet gt;
  ParamStore<double> params;

  void SetUp() override {
    SynthSpec spec;
    spec.height = spec.width = 16;
    spec.max_disp = 4;
    spec.warp = WarpFamily::affine;
    spec.seed = 5;
    sample = synth_pair<double>(spec);
    gt = gt_match_set(sample.flow, sample.occlusion);
    params = init_params<double>(cfg, 3);
    Rng rng(4);
    for (auto& [name, e] : params.entries())
      for (auto& v : e.value.values()) v += rng.uniform(-0.05, 0.05);
  }

  Var flow_term(Graph<double>& g, const ForwardPass<double>& fp) const {
    return ad::sequence_loss(g, fp.flows_full, sample.flow.data, 0.8);
  }
};

TEST_F(TinyModelFixture, TotalGradientIsLinearInTheTerms) {
  const double lambda = 0.7;
  auto grads = [&](int which) {
    Graph<double> g(true);
    auto fp = forward(g, sample.image1, sample.image2, params, cfg);
    Var lo = flow_term(g, fp);
    Var lm = ad::matching_nll(g, fp.log_confidence, gt);
    Var l = which == 0 ? lo : which == 1 ? lm : ad::total_loss(g, lo, lm, lambda);
    g.backward(l);
    auto p = params;
    p.zero_grad();
    g.accumulate_into(p);
    return p;
  };
  const auto go = grads(0), gm = grads(1), gt_ = grads(2);
  for (const auto& [name, e] : gt_.entries())
    for (std::size_t i = 0; i < e.grad.size(); ++i)
      EXPECT_NEAR(e.grad[i], go.grad(name)[i] + lambda * gm.grad(name)[i], 1e-10) << name << "[" << i << "]";
}

TEST_F(TinyModelFixture, TotalLossPassesGradientCheck) {
  const auto rep = grad_check(
      [&](Graph<double>& g, const ParamStore<double>& p) {
        auto fp = forward(g, sample.image1, sample.image2, p, cfg);
        return ad::total_loss(g, flow_term(g, fp), ad::matching_nll(g, fp.log_confidence, gt), 0.7);
      },
      params);
  testing::expect_gradcheck_pass(rep);
}

TEST_F(TinyModelFixture, BranchReplayReproducesTheRecordedPass) {
  auto log = std::make_shared<BranchLog>();
  double recorded = 0;
  {
    Graph<double> g(true);
    g.set_branch_mode(BranchMode::record, log);
    auto fp = forward(g, sample.image1, sample.image2, params, cfg);
    recorded = g.value(flow_term(g, fp))[0];
  }
  EXPECT_FALSE(log->slots.empty());
  Graph<double> g(false);
  g.set_branch_mode(BranchMode::replay, log);
  auto fp = forward(g, sample.image1, sample.image2, params, cfg);
  EXPECT_EQ(g.value(flow_term(g, fp))[0], recorded);

  Graph<double> short_pass(false);
  short_pass.set_branch_mode(BranchMode::replay, std::make_shared<BranchLog>());
  EXPECT_THROW(forward(short_pass, sample.image1, sample.image2, params, cfg), Error);
}

ModelConfig train_model() {
  ModelConfig m;
  m.features.dim = 16;
  m.features.heads = 2;
  m.features.patch = 2;
  m.features.blocks = 1;
  m.features.stem1 = 8;
  m.features.stem2 = 16;
  m.features.mlp_ratio = 2;
  m.refiner.hidden = 16;
  m.refiner.motion = 8;
  m.refiner.iters = 2;
  return m;
}

std::vector<FlowSample<float>> train_pairs(std::size_t n) {
  std::vector<FlowSample<float>> out;
  for (std::size_t i = 0; i < n; ++i) {
    SynthSpec s;
    s.max_disp = 12;
    s.seed = 100 + i;
    s.warp = i % 2 ? WarpFamily::affine : WarpFamily::translation;
    out.push_back(synth_pair<float>(s));
  }
  return out;
}

TEST(Train, LossDecreasesOnASmallDataset) {
  const auto cfg = train_model();
  const auto data = train_pairs(4);
  auto store = init_params<float>(cfg, 0);
  TrainConfig tc;
  tc.steps = 200;
  tc.batch = 4;
  tc.warmup = 20;
  tc.log_every = 1;
  LossConfig lc;
  lc.iters = cfg.refiner.iters;
  const auto rows = train(store, data, cfg, tc, lc);
  ASSERT_EQ(rows.size(), 200u);
  EXPECT_LT(rows.back().total, rows.front().total);
  EXPECT_TRUE(store.all_finite());
  for (const auto& r : rows) EXPECT_TRUE(std::isfinite(r.total)) << r.step;
}

TEST(Train, IdenticalSeedsGiveIdenticalTraces) {
  const auto cfg = train_model();
  const auto data = train_pairs(3);
  TrainConfig tc;
  tc.steps = 6;
  tc.log_every = 2;
  tc.seed = 9;
  LossConfig lc;
  lc.iters = cfg.refiner.iters;
  auto a = init_params<float>(cfg, 1), b = init_params<float>(cfg, 1);
  std::ostringstream ta, tb;
  train(a, data, cfg, tc, lc, &ta);
  train(b, data, cfg, tc, lc, &tb);
  EXPECT_EQ(ta.str(), tb.str());
  EXPECT_EQ(ta.str().substr(0, ta.str().find('\n')), "step\ttotal\tL_O\tL_M\tAEPE");
  for (const auto& [name, e] : a.entries()) EXPECT_EQ(e.value, b.value(name)) << name;
}

TEST(Train, RejectsEmptyDataAndBadConfig) {
  const auto cfg = train_model();
  auto store = init_params<float>(cfg, 0);
  LossConfig lc;
  EXPECT_THROW(train(store, std::vector<FlowSample<float>>{}, cfg, TrainConfig{}, lc), Error);
  TrainConfig bad;
  bad.lr = 0;
  EXPECT_THROW(train(store, train_pairs(1), cfg, bad, lc), Error);
}

TEST(Train, WarmupRampsLinearly) {
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.warmup = 4;
  EXPECT_DOUBLE_EQ(warmup_lr(tc, 0), 2.5e-4);
  EXPECT_DOUBLE_EQ(warmup_lr(tc, 3), 1e-3);
  EXPECT_DOUBLE_EQ(warmup_lr(tc, 100), 1e-3);
}

TEST(Adam, ClipsTheGlobalGradientNorm) {
  TrainConfig tc;
  tc.clip = 1.0;
  ParamStore<double> a, b;
  a.add("w", Tensor<double>({2}, std::vector<double>{0, 0}));
  b = a;
  a.grad("w")[0] = 30;
  a.grad("w")[1] = 40;
  b.grad("w")[0] = 0.6;
  b.grad("w")[1] = 0.8;
  Adam oa(tc), ob(tc);
  EXPECT_DOUBLE_EQ(oa.step(a, 0.1), 50.0);
  ob.step(b, 0.1);
  EXPECT_EQ(a.value("w"), b.value("w"));
  EXPECT_NEAR(a.value("w")[0], -0.1, 1e-6);
}

}  // namespace
}  // namespace gmflow
