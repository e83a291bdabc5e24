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

#include <cmath>
#include <filesystem>
#include <random>

#include "lapx/codec.hpp"
#include "lapx/errors.hpp"
#include "lapx/tensor_file.hpp"
#include "reference.hpp"

namespace lapx {
namespace {

PoseAnnotation one_joint(double x, double y, double v = 1.0, double norm = 1.0) {
  PoseAnnotation p;
  p.joints.push_back({x, y, v});
  p.norm = norm;
  return p;
}

TEST(Encode, PeakAndNeighbourValues) {
  EncodedHeatmaps e = encode_heatmaps(one_joint(4, 4), 16, 16, 2.0);
  EXPECT_TRUE(e.visible[0]);
  EXPECT_EQ(e.maps.at(0, 0, 4, 4), 1.0f);
  // Two pixels right of the peak: exp(-4 / (2 * 2^2)) = exp(-0.5).
  EXPECT_NEAR(e.maps.at(0, 0, 4, 6), 0.6065, 1e-4);
  EXPECT_FLOAT_EQ(e.maps.at(0, 0, 4, 6), static_cast<float>(std::exp(-0.5)));
}

TEST(Encode, OutOfBoundAndInvisibleJointsAreZero) {
  for (const PoseAnnotation& p :
       {one_joint(-3, 5), one_joint(5, 16.6), one_joint(5, 5, 0.0)}) {
    EncodedHeatmaps e = encode_heatmaps(p, 16, 16, 2.0);
    EXPECT_FALSE(e.visible[0]);
    for (float v : e.maps.values()) EXPECT_EQ(v, 0.0f);
  }
  EXPECT_THROW(encode_heatmaps(one_joint(1, 1), 8, 8, 0.0), ConfigError);
}

TEST(Encode, MatchesPerJointLoopOracle) {
  std::mt19937 rng(1);
  std::uniform_real_distribution<double> pos(-4.0, 20.0), coin(0, 1);
  PoseAnnotation p;
  for (int j = 0; j < 100; ++j) p.joints.push_back({pos(rng), pos(rng), coin(rng) < 0.8 ? 1.0 : 0.0});
  const double sigma = 1.5;
  EncodedHeatmaps e = encode_heatmaps(p, 16, 16, sigma);
  double sum = 0, ref_sum = 0;
  for (int j = 0; j < 100; ++j)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        const double ref = testing::ref_encode_pixel(p.joints[j], 16, 16, sigma, x, y);
        EXPECT_NEAR(e.maps.at(0, j, y, x), ref, 1e-7);
        sum += e.maps.at(0, j, y, x);
        ref_sum += ref;
      }
  EXPECT_NEAR(sum, ref_sum, 1e-4);
}

Tensor single_map(int h, int w) { return Tensor(Shape{1, 1, h, w}); }

TEST(Decode, QuarterOffsetTowardLargerNeighbour) {
  Tensor m = single_map(11, 11);
  m.at(0, 0, 5, 5) = 1.0f;
  m.at(0, 0, 5, 6) = 0.5f;
  m.at(0, 0, 5, 4) = 0.2f;
  m.at(0, 0, 4, 5) = 0.3f;
  m.at(0, 0, 6, 5) = 0.3f;
  auto d = decode_heatmaps(m, true)[0][0];
  EXPECT_EQ(d.x, 5.25);
  EXPECT_EQ(d.y, 5.0);
  EXPECT_EQ(d.score, 1.0);
  auto plain = decode_heatmaps(m, false)[0][0];
  EXPECT_EQ(plain.x, 5.0);
}

TEST(Decode, SymmetricPeakAndBoundaryDoNotShift) {
  Tensor m = single_map(7, 7);
  m.at(0, 0, 3, 3) = 1.0f;
  auto d = decode_heatmaps(m, true)[0][0];
  EXPECT_EQ(d.x, 3.0);
  EXPECT_EQ(d.y, 3.0);
  Tensor edge = single_map(7, 7);
  edge.at(0, 0, 0, 6) = 1.0f;
  edge.at(0, 0, 0, 5) = 0.9f;
  edge.at(0, 0, 1, 6) = 0.9f;
  d = decode_heatmaps(edge, true)[0][0];
  EXPECT_EQ(d.x, 6.0);
  EXPECT_EQ(d.y, 0.0);
}

TEST(Decode, TiesTakeFirstOccurrence) {
  Tensor m = single_map(4, 4);
  m.at(0, 0, 1, 2) = 0.7f;
  m.at(0, 0, 3, 0) = 0.7f;
  auto d = decode_heatmaps(m, false)[0][0];
  EXPECT_EQ(d.x, 2.0);
  EXPECT_EQ(d.y, 1.0);
  EXPECT_THROW(decode_heatmaps(single_map(2, 5), true), ShapeError);
}

TEST(Decode, RoundTripWithinHalfPixel) {
  std::mt19937 rng(2);
  std::uniform_real_distribution<double> px(0.0, 15.0), py(0.0, 11.0);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const double x = px(rng), y = py(rng);
    EncodedHeatmaps e = encode_heatmaps(one_joint(x, y), 12, 16, 2.0);
    auto d = decode_heatmaps(e.maps, true)[0][0];
    worst = std::max({worst, std::fabs(d.x - x), std::fabs(d.y - y)});
  }
  EXPECT_LE(worst, 0.5);
}

TEST(Decode, TranslationEquivariant) {
  std::mt19937 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor m = rand_uniform(Shape{1, 1, 12, 12}, rng, 0, 0.5f);
    Tensor base = single_map(20, 20);
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 12; ++x) base.at(0, 0, y + 2, x + 2) = m.at(0, 0, y, x);
    const int dx = trial % 5, dy = trial % 3;
    Tensor moved = single_map(20, 20);
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 12; ++x) moved.at(0, 0, y + 2 + dy, x + 2 + dx) = m.at(0, 0, y, x);
    auto a = decode_heatmaps(base, true)[0][0];
    auto b = decode_heatmaps(moved, true)[0][0];
    EXPECT_EQ(b.x - a.x, dx);
    EXPECT_EQ(b.y - a.y, dy);
  }
}

TEST(FlipMerge, MirrorSelfConsistencyIsExact) {
  std::mt19937 rng(4);
  Tensor hm = rand_uniform(Shape{2, 4, 5, 6}, rng, 0, 1);
  FlipPairs pairs{{0, 1}, {2, 3}};
  // The network's output on the mirrored image, with left/right channels swapped.
  Tensor swapped(hm.shape());
  const int64_t plane = 30;
  const int src[4] = {1, 0, 3, 2};
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 4; ++c)
      std::copy(hm.data() + (n * 4 + src[c]) * plane, hm.data() + (n * 4 + src[c] + 1) * plane,
                swapped.data() + (n * 4 + c) * plane);
  Tensor flipped = mirror_width(swapped);
  EXPECT_EQ(max_abs_diff(flip_merge(hm, flipped, pairs, 0), hm), 0.0f);
}

TEST(FlipMerge, FixedPointOnMirrorSymmetricInput) {
  std::mt19937 rng(5);
  Tensor half = rand_uniform(Shape{1, 3, 4, 3}, rng, 0, 1);
  Tensor sym(Shape{1, 3, 4, 6});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 3; ++x) sym.at(0, c, y, x) = sym.at(0, c, y, 5 - x) = half.at(0, c, y, x);
  EXPECT_EQ(max_abs_diff(flip_merge(sym, sym, {}, 0), sym), 0.0f);
}

TEST(FlipMerge, ShiftSplitsDeltaPeak) {
  Tensor hm = single_map(3, 8);
  hm.at(0, 0, 1, 3) = 1.0f;
  Tensor flipped = mirror_width(hm);
  Tensor out = flip_merge(hm, flipped, {}, 1);
  EXPECT_EQ(out.at(0, 0, 1, 3), 0.5f);
  EXPECT_EQ(out.at(0, 0, 1, 4), 0.5f);
  float rest = 0;
  for (float v : out.values()) rest += v;
  EXPECT_EQ(rest, 1.0f);
}

TEST(FlipMerge, ZeroFlippedHalvesAndEdgeReplicates) {
  std::mt19937 rng(6);
  Tensor hm = rand_uniform(Shape{1, 2, 3, 4}, rng, 0, 1);
  Tensor out = flip_merge(hm, Tensor(hm.shape()), {{0, 1}}, 2);
  for (int64_t i = 0; i < hm.numel(); ++i) EXPECT_EQ(out[i], 0.5f * hm[i]);
  Tensor col(Shape{1, 1, 1, 4}, std::vector<float>{0, 0, 0, 8});  // mirrored: 8 at column 0
  Tensor shifted = flip_merge(Tensor(col.shape()), col, {}, 2);
  EXPECT_EQ(shifted[0], 4.0f);
  EXPECT_EQ(shifted[1], 4.0f);
  EXPECT_EQ(shifted[2], 4.0f);
  EXPECT_EQ(shifted[3], 0.0f);
  EXPECT_THROW(flip_merge(hm, Tensor(Shape{1, 2, 3, 5}), {}, 0), ShapeError);
}

TEST(Pckh, PerfectPredictions) {
  std::mt19937 rng(7);
  std::vector<PoseAnnotation> gts;
  for (int i = 0; i < 10; ++i) gts.push_back(testing::random_pose(rng, 6));
  PckhReport r = pckh(gts, gts, 0.5, {{"a", {0, 1, 2}}, {"b", {3, 4, 5}}});
  EXPECT_EQ(r.total, 100.0);
  for (const auto& [name, v] : r.groups) EXPECT_EQ(v, 100.0) << name;
}

TEST(Pckh, ThresholdStraddle) {
  PoseAnnotation gt = one_joint(10, 10, 1, 10);
  EXPECT_EQ(pckh({one_joint(16, 10)}, {gt}).total, 0.0);
  EXPECT_EQ(pckh({one_joint(14, 10)}, {gt}).total, 100.0);
  EXPECT_EQ(pckh({one_joint(15, 10)}, {gt}).total, 0.0);  // strictly below
  EXPECT_THROW(pckh({one_joint(1, 1)}, {gt, gt}), ShapeError);
}

TEST(Pckh, MatchesNaiveLoopAndWeightsByFrequency) {
  std::mt19937 rng(8);
  std::vector<PoseAnnotation> gts, preds;
  for (int i = 0; i < 50; ++i) {
    gts.push_back(testing::random_pose(rng, 8, 0.3));
    preds.push_back(testing::jitter_pose(gts.back(), rng, 8.0));
  }
  PckhReport r = pckh(preds, gts, 0.5, {{"all", {0, 1, 2, 3, 4, 5, 6, 7}}});
  testing::RefPck ref = testing::ref_pckh(preds, gts, 0.5);
  EXPECT_EQ(r.correct, ref.correct);
  EXPECT_EQ(r.annotated, ref.annotated);
  EXPECT_NEAR(r.total, 100.0 * ref.correct / ref.annotated, 1e-9);
  EXPECT_NEAR(r.groups[0].second, r.total, 1e-9);
}

TEST(Oks, ClosedForms) {
  const std::vector<double> k{0.5, 0.5};
  PoseAnnotation gt;
  gt.joints = {{10, 10, 1}, {20, 20, 1}};
  gt.norm = 4;
  EXPECT_EQ(oks(gt, gt, k), 1.0);
  PoseAnnotation one = one_joint(10, 10, 1, 4);
  // d^2 = 2 s^2 k^2 = 8.
  PoseAnnotation off = one_joint(10 + std::sqrt(8.0), 10);
  EXPECT_NEAR(oks(off, one, {0.5}), std::exp(-1.0), 1e-12);
  EXPECT_NEAR(std::exp(-1.0), 0.3679, 1e-4);
  PoseAnnotation hidden = gt;
  hidden.joints[1].v = 0;
  PoseAnnotation pred = gt;
  pred.joints[1].x += 100;
  EXPECT_EQ(oks(pred, hidden, k), 1.0);
  hidden.joints[0].v = 0;
  EXPECT_THROW(oks(pred, hidden, k), Error);
}

TEST(Oks, SymmetricUnderJointPermutation) {
  std::mt19937 rng(9);
  const std::vector<double> k = coco_oks_constants();
  ASSERT_EQ(k.size(), 17u);
  for (int trial = 0; trial < 20; ++trial) {
    PoseAnnotation g = testing::random_pose(rng, 17);
    g.joints[0].v = 1;
    PoseAnnotation p = testing::jitter_pose(g, rng, 3.0);
    std::vector<int> perm(17);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    PoseAnnotation gp = g, pp = p;
    std::vector<double> kp(17);
    for (int i = 0; i < 17; ++i) {
      gp.joints[i] = g.joints[perm[i]];
      pp.joints[i] = p.joints[perm[i]];
      kp[i] = k[perm[i]];
    }
    EXPECT_NEAR(oks(pp, gp, kp), oks(p, g, k), 1e-12);
    EXPECT_NEAR(oks(p, g, k), testing::ref_oks(p, g, k), 1e-12);
  }
}

TEST(Ap, PerfectPredictions) {
  std::mt19937 rng(10);
  std::vector<ImagePoses> images(5);
  for (auto& im : images) {
    for (int i = 0; i < 3; ++i) im.gts.push_back(testing::random_pose(rng, 17));
    im.preds = im.gts;
  }
  ApReport r = ap_over_oks(images, coco_oks_constants());
  EXPECT_EQ(r.ap, 1.0);
  EXPECT_EQ(r.ar, 1.0);
  ASSERT_EQ(r.thresholds.size(), 10u);
  EXPECT_EQ(r.thresholds.front(), 0.5);
  EXPECT_EQ(r.thresholds.back(), 0.95);
}

TEST(Ap, SingleMatchCountsUpToItsOks) {
  const std::vector<double> k{0.5};
  PoseAnnotation gt = one_joint(0, 0, 1, 2);
  // OKS just above 0.7: d^2 = -2 s^2 k^2 ln(0.70000001).
  const double d = std::sqrt(-2 * 4 * 0.25 * std::log(0.70000001));
  PoseAnnotation pred = one_joint(d, 0);
  ASSERT_NEAR(oks(pred, gt, k), 0.7, 1e-7);
  ApReport r = ap_over_oks({{{gt}, {pred}}}, k);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(r.ap_at[i], i <= 4 ? 1.0 : 0.0) << r.thresholds[i];
  EXPECT_DOUBLE_EQ(r.ap, 0.5);
  EXPECT_DOUBLE_EQ(r.ar, 0.5);
}

TEST(Ap, IgnoresUnannotatedGroundTruth) {
  const std::vector<double> k{0.5};
  PoseAnnotation empty = one_joint(5, 5, 0, 2);
  PoseAnnotation gt = one_joint(0, 0, 1, 2);
  ApReport r = ap_over_oks({{{gt, empty}, {gt}}}, k);
  EXPECT_EQ(r.ap, 1.0);
}

TEST(Ap, MatchesExhaustiveReference) {
  std::mt19937 rng(11);
  const std::vector<double> k = coco_oks_constants();
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ImagePoses> images(5);
    std::uniform_int_distribution<int> count(0, 4);
    std::uniform_real_distribution<double> j(0.5, 6.0);
    for (auto& im : images) {
      const int g = count(rng);
      for (int i = 0; i < g; ++i) im.gts.push_back(testing::random_pose(rng, 17, 0.3));
      for (int i = 0; i < g; ++i) im.preds.push_back(testing::jitter_pose(im.gts[i], rng, j(rng)));
      if (g > 0 && count(rng) == 0) im.preds.push_back(testing::jitter_pose(im.gts[0], rng, 2));
    }
    ApReport r = ap_over_oks(images, k);
    auto [ap, ar] = testing::ref_ap(images, k);
    EXPECT_NEAR(r.ap, ap, 1e-9);
    EXPECT_NEAR(r.ar, ar, 1e-9);
  }
}

TEST(Files, AnnotationRoundTripAndErrors) {
  std::mt19937 rng(12);
  AnnotationSet s;
  s.flip_pairs = {{0, 1}};
  s.joint_names = {"l", "r", "c"};
  for (int i = 0; i < 3; ++i) s.images.push_back({"img" + std::to_string(i), {testing::random_pose(rng, 3)}});
  const std::string path =
      (std::filesystem::temp_directory_path() / ("lapx_ann_" + std::to_string(::getpid()) + ".json")).string();
  s.save(path);
  AnnotationSet back = AnnotationSet::load(path);
  EXPECT_EQ(back.to_json(), s.to_json());
  EXPECT_THROW(AnnotationSet::from_json(nlohmann::json{{"images", {{{"name", "x"}}}}}), FormatError);
  nlohmann::json bad = s.to_json();
  bad["images"][0]["poses"][0]["joints"][0] = {1, 2};
  EXPECT_THROW(AnnotationSet::from_json(bad), FormatError);
}

TEST(Files, HeatmapDumpNames) {
  const std::string path =
      (std::filesystem::temp_directory_path() / ("lapx_hm_" + std::to_string(::getpid()) + ".lapx")).string();
  dump_heatmaps(path, {{"a", {Tensor(Shape{1, 2, 3, 3}), Tensor(Shape{1, 2, 3, 3}, 1.0f)}}});
  auto t = read_tensor_file(path);
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t[0].name, "heatmap/a/1");
  EXPECT_EQ(t[1].name, "heatmap/a/2");
  EXPECT_EQ(t[1].value[5], 1.0f);
}

}  // namespace
}  // namespace lapx
