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

#include "gmflow/features.hpp"
#include "oracles.hpp"
#include "support.hpp"

namespace gmflow {
namespace {

using testing::random_tensor;

ParamStore<double> random_attention_params(const PolaConfig& cfg, Rng& rng, const std::string& prefix) {
  ParamStore<double> p;
  features::add_attention_params(p, prefix, cfg, rng);
  for (auto& [name, e] : p.entries())
    for (auto& v : e.value.values()) v = rng.uniform(-0.6, 0.6);
  return p;
}

TEST(Pola, MatchesDenseMaskedAttention) {
  Rng rng(21);
  for (std::size_t m : {1, 2, 3, 4})
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{7, 5}, {8, 8}, {3, 11}, {12, 9}}) {
      PolaConfig cfg;
      cfg.dim = 8;
      cfg.heads = 2;
      cfg.patch = m;
      const auto p = random_attention_params(cfg, rng, "a.");
      const auto x = random_tensor({8, h, w}, rng);
      Graph<double> g(false);
      const auto got = g.value(features::pola(g, g.constant(x), p, "a.", cfg));
      const auto want = oracle::dense_pola(x, p, "a.", 2, m);
      EXPECT_LT(max_abs_diff(got, want), 1e-10) << "M=" << m << " map " << h << "x" << w;
    }
}

TEST(Pola, WindowCoversNeighbourPatchesClippedToTheMap) {
  const auto corner = PatchWindow::of(0, 0, 10, 10, 4);
  EXPECT_EQ(corner.row0, 0u);
  EXPECT_EQ(corner.row1, 8u);
  EXPECT_EQ(corner.size(), 64u);
  const auto inner = PatchWindow::of(5, 5, 12, 12, 4);
  EXPECT_EQ(inner.row0, 0u);
  EXPECT_EQ(inner.row1, 12u);
  EXPECT_EQ(inner.size(), 144u);
  const auto edge = PatchWindow::of(9, 1, 10, 10, 4);
  EXPECT_EQ(edge.row0, 4u);
  EXPECT_EQ(edge.row1, 10u);
  EXPECT_EQ(edge.col1, 8u);
}

TEST(Pola, AttentionWeightsAreADistributionOverTheWindow) {
  Rng rng(22);
  const std::size_t m = 3, heads = 2;
  const auto q = random_tensor({4, 9, 7}, rng), k = random_tensor({4, 9, 7}, rng);
  const auto table = random_tensor({heads, 4 * m - 1, 4 * m - 1}, rng);
  for (auto [y, x] : {std::pair<std::size_t, std::size_t>{0, 0}, {4, 3}, {8, 6}}) {
    const auto wts = patch_attention_weights(q, k, table, heads, m, y, x, 1);
    ASSERT_EQ(wts.size(), 9 * m * m);
    double s = 0;
    for (double v : wts) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  // The window of pixel (0, 0) starts one patch above and left of the map: those
  // rows and columns hold no mass.
  const auto wts = patch_attention_weights(q, k, table, heads, m, 0, 0, 0);
  for (std::size_t r = 0; r < 3 * m; ++r)
    for (std::size_t c = 0; c < 3 * m; ++c)
      if (r < m || c < m) {
        EXPECT_EQ(wts[r * 3 * m + c], 0.0);
      }
}

TEST(Pola, BiasTableHasOneEntryPerRelativeOffset) {
  PolaConfig cfg;
  cfg.patch = 7;
  EXPECT_EQ(cfg.bias_extent(), 27u);
  ParamStore<double> p;
  Rng rng(23);
  features::add_attention_params(p, "b.", cfg, rng);
  EXPECT_EQ(p.value("b.rel_bias").shape(), (Shape{cfg.heads, 27, 27}));
  for (double v : p.value("b.rel_bias").values()) EXPECT_EQ(v, 0.0);
}

TEST(Pola, GradientsMatchCentralDifferences) {
  Rng rng(24);
  PolaConfig cfg;
  cfg.dim = 4;
  cfg.heads = 2;
  cfg.patch = 2;
  auto p = random_attention_params(cfg, rng, "a.");
  p.add("x", random_tensor({4, 5, 6}, rng));
  const auto rep = grad_check(
      [&](Graph<double>& g, const ParamStore<double>& s) {
        return testing::probe_loss(g, features::pola(g, g.param(s, "x"), s, "a.", cfg));
      },
      p);
  testing::expect_gradcheck_pass(rep);
}

TEST(TransformerBlock, GradientsMatchCentralDifferences) {
  Rng rng(25);
  PolaConfig cfg;
  cfg.dim = 4;
  cfg.heads = 2;
  cfg.patch = 2;
  cfg.blocks = 1;
  cfg.mlp_ratio = 2;
  ParamStore<double> p;
  features::add_params(p, cfg, rng);
  for (auto& [name, e] : p.entries())
    if (name.find("block") != std::string::npos)
      for (auto& v : e.value.values()) v += rng.uniform(-0.3, 0.3);
  p.add("x", random_tensor({4, 4, 5}, rng));
  const auto rep = grad_check(
      [&](Graph<double>& g, const ParamStore<double>& s) {
        return testing::probe_loss(g, features::transformer_block(g, g.param(s, "x"), s, 0, cfg));
      },
      p);
  testing::expect_gradcheck_pass(rep);
}

TEST(FeatureExtractor, ProducesOneEighthResolutionMaps) {
  Rng rng(26);
  PolaConfig cfg;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.patch = 2;
  cfg.blocks = 2;
  cfg.stem1 = 4;
  cfg.stem2 = 8;
  ParamStore<double> p;
  features::add_params(p, cfg, rng);
  EXPECT_EQ(p.value("features.conv1.weight").shape(), (Shape{4, 3, 7, 7}));
  EXPECT_EQ(p.value("features.conv2.weight").shape(), (Shape{8, 4, 3, 3}));
  EXPECT_EQ(p.value("features.conv3.weight").shape(), (Shape{8, 8, 3, 3}));
  const auto f = features::extract_context(random_tensor({3, 40, 24}, rng, 0, 1), p, cfg);
  EXPECT_EQ(f.shape(), (Shape{8, 5, 3}));
  EXPECT_TRUE(f.all_finite());
}

TEST(FeatureExtractor, RejectsExtentsNotDivisibleByEight) {
  Rng rng(27);
  PolaConfig cfg;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.stem1 = 4;
  cfg.stem2 = 4;
  ParamStore<double> p;
  features::add_params(p, cfg, rng);
  EXPECT_THROW(features::extract_context(random_tensor({3, 20, 16}, rng), p, cfg), Error);
  EXPECT_THROW(features::extract_context(random_tensor({1, 16, 16}, rng), p, cfg), Error);
}

TEST(PolaConfig, ValidatesDivisibility) {
  PolaConfig cfg;
  cfg.dim = 10;
  cfg.heads = 4;
  EXPECT_THROW(cfg.validate(), Error);
  cfg.heads = 5;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_NO_THROW(PolaConfig::full_size().validate());
}

}  // namespace
}  // namespace gmflow
