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

#include "gmflow/refiner.hpp"
#include "support.hpp"

namespace gmflow {
namespace {

using testing::random_tensor;

TEST(Lookup, L1BallHasCentredDiamondCardinality) {
  for (int r = 1; r <= 4; ++r) {
    LookupConfig cfg{r, LookupBall::l1};
    EXPECT_EQ(cfg.channels(), static_cast<std::size_t>(2 * r * r - 2 * r + 1)) << "r=" << r;
    for (auto [dr, dc] : cfg.offsets()) EXPECT_LT(std::abs(dr) + std::abs(dc), r);
  }
  LookupConfig sq{3, LookupBall::linf};
  EXPECT_EQ(sq.channels(), 25u);
  EXPECT_THROW((LookupConfig{0, LookupBall::l1}.offsets()), Error);
}

TEST(Lookup, ZeroFlowReadsIntegerNeighbours) {
  Rng rng(41);
  CostVolume<double> c{random_tensor({3, 4, 3, 4}, rng)};
  const LookupConfig cfg{2, LookupBall::l1};
  const auto out = lookup(c, FlowField<double>(3, 4, FlowScale::eighth), cfg);
  const auto offs = cfg.offsets();
  ASSERT_EQ(out.shape(), (Shape{offs.size(), 3, 4}));
  for (std::size_t k = 0; k < offs.size(); ++k)
    for (long i = 0; i < 3; ++i)
      for (long j = 0; j < 4; ++j) {
        const long u = i + offs[k].first, v = j + offs[k].second;
        const double want = (u < 0 || v < 0 || u >= 3 || v >= 4)
                                ? 0.0
                                : c(static_cast<std::size_t>(i), static_cast<std::size_t>(j), static_cast<std::size_t>(u),
                                    static_cast<std::size_t>(v));
        EXPECT_EQ(out(k, static_cast<std::size_t>(i), static_cast<std::size_t>(j)), want);
      }
}

TEST(Lookup, FractionalFlowInterpolatesBilinearly) {
  Rng rng(42);
  CostVolume<double> c{random_tensor({2, 2, 4, 4}, rng)};
  FlowField<double> f(2, 2, FlowScale::eighth);
  f.u(1, 0) = 1.25;  // column
  f.v(1, 0) = 0.5;   // row
  const auto out = lookup(c, f, LookupConfig{1, LookupBall::l1});
  const double want = 0.5 * 0.75 * c(1, 0, 1, 1) + 0.5 * 0.25 * c(1, 0, 1, 2) + 0.5 * 0.75 * c(1, 0, 2, 1) +
                      0.5 * 0.25 * c(1, 0, 2, 2);
  EXPECT_NEAR(out(0, 1, 0), want, 1e-12);
}

TEST(Lookup, RequiresOneEighthFlow) {
  CostVolume<double> c{Tensor<double>({2, 2, 2, 2})};
  EXPECT_THROW(lookup(c, FlowField<double>(2, 2, FlowScale::full), LookupConfig{}), Error);
}

TEST(Lookup, GradientsMatchCentralDifferences) {
  Rng rng(43);
  ParamStore<double> p;
  p.add("cost", random_tensor({3, 3, 4, 4}, rng));
  p.add("flow", random_tensor({2, 3, 3}, rng, -1.3, 1.3));
  const auto offs = LookupConfig{2, LookupBall::l1}.offsets();
  const auto rep = grad_check(
      [&](Graph<double>& g, const ParamStore<double>& s) {
        return testing::probe_loss(g, ad::lookup(g, g.param(s, "cost"), g.param(s, "flow"), offs));
      },
      p);
  testing::expect_gradcheck_pass(rep);
}

TEST(Upsample, ConstantFlowIsScaledByEight) {
  FlowField<double> f(2, 3, FlowScale::eighth);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 3; ++x) {
      f.u(y, x) = 1.5;
      f.v(y, x) = -0.25;
    }
  const auto up = upsample_flow(f);
  EXPECT_EQ(up.scale, FlowScale::full);
  ASSERT_EQ(up.data.shape(), (Shape{2, 16, 24}));
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 24; ++x) {
      EXPECT_DOUBLE_EQ(up.u(y, x), 12.0);
      EXPECT_DOUBLE_EQ(up.v(y, x), -2.0);
    }
}

TEST(Upsample, UsesHalfPixelCentresWithEdgeClamping) {
  FlowField<double> f(1, 2, FlowScale::eighth);
  f.u(0, 0) = 0;
  f.u(0, 1) = 1;
  const auto up = upsample_flow(f);
  // Output column o samples source column (o + 0.5) / 8 - 0.5, clamped to [0, 1].
  for (std::size_t o = 0; o < 16; ++o) {
    const double s = std::clamp((static_cast<double>(o) + 0.5) / 8.0 - 0.5, 0.0, 1.0);
    EXPECT_NEAR(up.u(0, o), 8.0 * s, 1e-12) << o;
  }
  EXPECT_THROW(upsample_flow(up), Error);
}

TEST(Upsample, GradientsMatchCentralDifferences) {
  Rng rng(44);
  ParamStore<double> p;
  p.add("f", random_tensor({2, 3, 2}, rng));
  const auto rep = grad_check(
      [](Graph<double>& g, const ParamStore<double>& s) {
        return testing::probe_loss(g, ad::upsample_bilinear(g, g.param(s, "f"), 8, 8.0));
      },
      p);
  testing::expect_gradcheck_pass(rep);
}

struct RefinerFixture : ::testing::Test {
  RefinerConfig cfg;
  ParamStore<double> params;
  Tensor<double> context;
  CostVolume<double> cost;

  void SetUp() override {
    Rng rng(45);
    cfg.hidden = 4;
    cfg.motion = 3;
    cfg.iters = 3;
    cfg.lookup = {2, LookupBall::l1};
    refiner::add_params(params, cfg, 5, rng);
    for (auto& [name, e] : params.entries())
      for (auto& v : e.value.values()) v += rng.uniform(-0.2, 0.2);
    context = random_tensor({5, 3, 4}, rng);
    cost = {random_tensor({3, 4, 3, 4}, rng)};
  }
};

TEST_F(RefinerFixture, ProducesOneIteratePerStep) {
  FlowField<double> init(3, 4, FlowScale::eighth);
  const auto seq = refiner::refine(context, cost, init, 3, params, cfg);
  ASSERT_EQ(seq.size(), 3u);
  for (const auto& f : seq) {
    EXPECT_EQ(f.scale, FlowScale::eighth);
    EXPECT_EQ(f.data.shape(), (Shape{2, 3, 4}));
    EXPECT_TRUE(f.data.all_finite());
  }
  EXPECT_TRUE(refiner::refine(context, cost, init, 0, params, cfg).empty());
}

TEST_F(RefinerFixture, WeightsAreSharedAcrossIterations) {
  const auto before = params.scalar_count();
  FlowField<double> init(3, 4, FlowScale::eighth);
  Graph<double> g(true);
  const auto seq = refiner::refine(g, g.constant(context), g.constant(cost.values), g.constant(init.data), 5, params, cfg);
  g.backward(ad::sum(g, seq.back()));
  EXPECT_EQ(params.scalar_count(), before);
  const auto head = g.param(params, "refiner.head.weight");
  EXPECT_TRUE(g.has_grad(head));
}

TEST_F(RefinerFixture, FirstIterateIsInitialFlowPlusHeadOutput) {
  Rng rng(46);
  FlowField<double> init(3, 4, FlowScale::eighth);
  for (auto& v : init.data.values()) v = rng.uniform(-1, 1);
  const auto one = refiner::refine(context, cost, init, 1, params, cfg);
  auto zero_head = params;
  for (auto* n : {"refiner.head.weight", "refiner.head.bias"}) zero_head.value(n).fill(0.0);
  const auto still = refiner::refine(context, cost, init, 1, zero_head, cfg);
  EXPECT_EQ(still[0].data, init.data);
  EXPECT_GT(max_abs_diff(one[0].data, init.data), 0.0);
}

TEST_F(RefinerFixture, GradientsMatchCentralDifferences) {
  Rng rng(47);
  params.add("context", context);
  params.add("cost", cost.values);
  params.add("init", random_tensor({2, 3, 4}, rng, -1.5, 1.5));
  const auto rep = grad_check(
      [&](Graph<double>& g, const ParamStore<double>& s) {
        const auto seq = refiner::refine(g, g.param(s, "context"), g.param(s, "cost"), g.param(s, "init"), 3, s, cfg);
        return testing::probe_loss(g, seq.back());
      },
      params);
  testing::expect_gradcheck_pass(rep);
}

TEST_F(RefinerFixture, RequiresOneEighthInitialFlow) {
  EXPECT_THROW(refiner::refine(context, cost, FlowField<double>(3, 4, FlowScale::full), 1, params, cfg), Error);
}

}  // namespace
}  // namespace gmflow
