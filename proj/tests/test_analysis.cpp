// Copyright 2026 The LAPX Authors. All Rights Reserved.
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

#include <gtest/gtest.h>

#include <random>

#include "lapx/analysis.hpp"
#include "lapx/errors.hpp"

namespace lapx {
namespace {

ModelConfig small_config(int stages, int channels) {
  ModelConfig c;
  c.num_stages = stages;
  c.channels = channels;
  c.num_keypoints = 3;
  c.input_h = 64;
  c.input_w = 64;
  c.num_pool_levels = 2;
  return c;
}

const LayerRow& row(const EfficiencyReport& r, const std::string& name) {
  for (const LayerRow& x : r.rows) {
    if (x.name == name) return x;
  }
  throw std::runtime_error("no row " + name);
}

TEST(CountParams, PointwiseWithBias) {
  ModelConfig c = small_config(1, 2);
  c.nonlocal_stages = std::vector<int>{};
  Model m = build_model(c, 0);
  EXPECT_EQ(row(count_params(m), "stage1.head").params, 2 * 3 + 3);
}

TEST(CountParams, DepthwiseSeparableWithBiases) {
  std::mt19937 rng(0);
  ConvParams dw = ConvParams::create("dw", 8, 8, 3, {1, 1, 8}, true, rng);
  ConvParams pw = ConvParams::create("pw", 8, 16, 1, {}, true, rng);
  const int64_t n = dw.weight.numel() + dw.bias.numel() + pw.weight.numel() + pw.bias.numel();
  EXPECT_EQ(n, 8 * 9 + 8 + 8 * 16 + 16);
  EXPECT_EQ(n, 224);
}

TEST(CountParams, TotalEqualsRegistryEnumeration) {
  for (const std::string& name : preset_names()) {
    Model m = build_model(preset(name), 0);
    EfficiencyReport r = count_params(m);
    int64_t exhaustive = 0;
    for (const ParamTensor* p : m.parameters()) {
      int64_t n = 1;
      for (int d : p->dims) n *= d;
      exhaustive += n;
    }
    EXPECT_EQ(r.total_params, exhaustive) << name;
    int64_t rows = 0;
    for (const LayerRow& x : r.rows) rows += x.params;
    EXPECT_EQ(rows, r.total_params);
  }
}

TEST(CountParams, TablePresetsOrderedAndCalibrated) {
  const char* names[] = {"lapx-2s256", "lapx-3s208", "lapx-4s190", "lapx-5s160"};
  const double target[] = {2.30e6, 2.26e6, 2.25e6, 2.23e6};
  int64_t prev = INT64_MAX;
  for (int i = 0; i < 4; ++i) {
    const int64_t p = count_params(build_model(preset(names[i]), 0)).total_params;
    EXPECT_NEAR(static_cast<double>(p) / target[i], 1.0, 0.15) << names[i];
    EXPECT_LT(p, prev) << names[i];
    prev = p;
  }
}

TEST(CountFlops, ClosedFormConvolutions) {
  EXPECT_EQ(conv_macs(8, 8, 3, 1, 16, 16), 147456);
  EXPECT_EQ(conv_macs(8, 8, 3, 8, 16, 16), 18432);
  // The stem depthwise conv of a 16-channel model at 64x64 is that same layer.
  Model m = build_model(small_config(1, 16), 0);
  EXPECT_EQ(row(count_flops(m, 64, 64), "stem.dw.conv").macs, 18432);
}

TEST(CountFlops, FullModelNearReportedBudget) {
  ModelConfig c = preset("lapx-3s208");
  c.num_keypoints = 17;
  c.input_h = 256;
  c.input_w = 192;
  EfficiencyReport r = count_flops(build_model(c, 0), 256, 192);
  EXPECT_NEAR(static_cast<double>(r.total_macs) / 2.59e9, 1.0, 0.20) << r.total_macs;
  EXPECT_EQ(r.flops(), 2 * r.total_macs);
}

TEST(CountFlops, MatchesMacsIssuedByForward) {
  for (int stages : {1, 3}) {
    Model m = build_model(small_config(stages, 16), 1);
    std::mt19937 rng(2);
    Tensor x = rand_uniform(Shape{1, 3, 64, 64}, rng, 0, 1);
    MacCounter counter;
    NoGradGuard ng;
    m.forward(x, BnMode::kEval);
    EXPECT_EQ(counter.total(), count_flops(m, 64, 64).total_macs) << stages;
  }
}

TEST(CountFlops, ConvolutionMacsScaleWithArea) {
  Model m = build_model(small_config(2, 16), 0);
  EfficiencyReport a = count_flops(m, 64, 64);
  EfficiencyReport b = count_flops(m, 128, 128);
  for (size_t i = 0; i < a.rows.size(); ++i) {
    if (a.rows[i].kind == std::string("conv") || a.rows[i].kind == std::string("residual_block")) {
      EXPECT_EQ(b.rows[i].macs, 4 * a.rows[i].macs) << a.rows[i].name;
    }
    if (a.rows[i].kind == std::string("eca_nonlocal")) {
      // Projections scale with n, the two affinity products with n^2.
      const int64_t c = 16, ci = 2, ka = 2 * c * kEcaKernel;
      const int64_t n_a = 4 * 4, n_b = 8 * 8;
      EXPECT_EQ(a.rows[i].macs, ka + 4 * ci * c * n_a + 2 * n_a * n_a * ci);
      EXPECT_EQ(b.rows[i].macs, ka + 4 * ci * c * n_b + 2 * n_b * n_b * ci);
    }
  }
  EXPECT_THROW(count_flops(m, 64, 60), ShapeError);
}

TEST(Footprint, SingleConvLayer) {
  const int64_t in = 3 * 8 * 8 * 4, out = 4 * 8 * 8 * 4;
  EXPECT_EQ(peak_live_bytes(in, {{{-1}, out, true}}), in + out);
}

TEST(Footprint, SequentialConvsReleaseProgressively) {
  const int64_t a = 1000, b = 800, c = 600, d = 400;
  std::vector<LivenessNode> nodes{{{-1}, b}, {{0}, c}, {{1}, d, true}};
  const int64_t peak = peak_live_bytes(a, nodes);
  EXPECT_EQ(peak, std::max({a + b, b + c, c + d}));
  EXPECT_LT(peak, a + b + c + d);
}

TEST(Footprint, MultiStageBelowThreeTimesSingleStage) {
  const int64_t one = activation_footprint(build_model(small_config(1, 32), 0), 64, 64);
  const int64_t three = activation_footprint(build_model(small_config(3, 32), 0), 64, 64);
  EXPECT_LT(three, 3 * one);
  EXPECT_GT(three, one);
}

TEST(Footprint, InvariantToSwappingIndependentNeighbours) {
  Model m = build_model(small_config(2, 16), 0);
  const auto& layers = m.layers();
  const int64_t base = activation_footprint(m, 64, 64);
  int swaps = 0;
  for (size_t i = 0; i + 1 < layers.size(); ++i) {
    const auto& next = layers[i + 1].inputs;
    if (std::find(next.begin(), next.end(), static_cast<int>(i)) != next.end()) continue;
    std::vector<int> order(layers.size());
    std::iota(order.begin(), order.end(), 0);
    std::swap(order[i], order[i + 1]);
    EXPECT_EQ(activation_footprint(m, 64, 64, 1, order), base) << layers[i].name;
    ++swaps;
  }
  EXPECT_GT(swaps, 0);
}

TEST(Footprint, RejectsOrderThatBreaksDependencies) {
  Model m = build_model(small_config(1, 16), 0);
  std::vector<int> order(m.layers().size());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[0], order[1]);
  EXPECT_THROW(activation_footprint(m, 64, 64, 1, order), Error);
}

TEST(Bench, ReportStructure) {
  Model m = build_model(small_config(1, 8), 0);
  BenchOptions opt;
  opt.warmup = 1;
  opt.iters = 5;
  BenchReport r = bench_latency(m, 64, 64, opt);
  EXPECT_EQ(r.iter_ms.size(), 5u);
  EXPECT_GE(r.p95_ms, r.p50_ms);
  EXPECT_EQ(r.fps_tta, r.fps / 2.0);
  EXPECT_EQ(r.threads, 1);
  EXPECT_GT(r.peak_activation_bytes, 0);
  EXPECT_EQ(r.to_json()["timed_iters"], 5);
  opt.iters = 0;
  EXPECT_THROW(bench_latency(m, 64, 64, opt), ConfigError);
}

TEST(Bench, ConcurrentRunsRejected) {
  BenchLock held;
  Model m = build_model(small_config(1, 8), 0);
  EXPECT_THROW(bench_latency(m, 64, 64, {}), Error);
}

TEST(Bench, NearestRankPercentiles) {
  std::vector<double> v{5, 1, 4, 2, 3};
  EXPECT_EQ(percentile(v, 50), 3);
  EXPECT_EQ(percentile(v, 95), 5);
  EXPECT_EQ(percentile(v, 0), 1);
  BenchReport r = make_bench_report({10, 10, 10, 30}, 0);
  EXPECT_EQ(r.mean_ms, 15);
  EXPECT_EQ(r.p50_ms, 10);
  EXPECT_EQ(r.p95_ms, 30);
  EXPECT_EQ(r.fps_tta, r.fps / 2.0);
}

TEST(Report, TextAndJsonCarryTotals) {
  Model m = build_model(small_config(1, 16), 0);
  EfficiencyReport r = count_flops(m, 64, 64);
  EXPECT_NE(r.to_text().find("totals: params " + std::to_string(r.total_params)),
            std::string::npos);
  EXPECT_EQ(r.to_json()["totals"]["macs"], r.total_macs);
  EXPECT_EQ(r.to_json()["rows"].size(), m.layers().size());
}

}  // namespace
}  // namespace lapx
