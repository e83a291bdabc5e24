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

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "lapx/errors.hpp"
#include "lapx/train.hpp"

namespace lapx {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

struct Vec2 {
  double x = 0, y = 0;
};

Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }

Vec2 rotate(Vec2 p, double rad) {
  const double c = std::cos(rad), s = std::sin(rad);
  return {c * p.x - s * p.y, s * p.x + c * p.y};
}

// Unit vector at `deg` from straight down, positive turning toward +x.
Vec2 limb_dir(double deg) { return {std::sin(deg * kDeg), std::cos(deg * kDeg)}; }

double dist_to_segment(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a, ap = p - a;
  const double len2 = ab.x * ab.x + ab.y * ab.y;
  double t = len2 > 0 ? (ap.x * ab.x + ap.y * ab.y) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const Vec2 q = a + t * ab;
  return std::hypot(p.x - q.x, p.y - q.y);
}

bool in_frame(double x, double y, int h, int w) {
  return x >= 0 && y >= 0 && x <= w - 1 && y <= h - 1;
}

float sample_bilinear(const Tensor& img, int c, double y, double x) {
  const Shape s = img.shape();
  x = std::clamp(x, 0.0, static_cast<double>(s.w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(s.h - 1));
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, s.w - 1), y1 = std::min(y0 + 1, s.h - 1);
  const double fx = x - x0, fy = y - y0;
  const double top = (1 - fx) * img.at(0, c, y0, x0) + fx * img.at(0, c, y0, x1);
  const double bot = (1 - fx) * img.at(0, c, y1, x0) + fx * img.at(0, c, y1, x1);
  return static_cast<float>((1 - fy) * top + fy * bot);
}

enum : int {
  kRAnkle = 0, kRKnee, kRHip, kLHip, kLKnee, kLAnkle, kPelvis, kThorax,
  kUpperNeck, kHeadTop, kRWrist, kRElbow, kRShoulder, kLShoulder, kLElbow, kLWrist,
};

}  // namespace

// ------------------------------------------------------------------ augment

AugmentDraw draw_augment(const AugmentOptions& opt, std::mt19937& rng) {
  std::uniform_real_distribution<double> scale(opt.scale_min, opt.scale_max);
  std::uniform_real_distribution<double> rot(-opt.max_rotation_deg, opt.max_rotation_deg);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  AugmentDraw d;
  d.scale = scale(rng);
  d.rotation_deg = rot(rng);
  d.flip = coin(rng) < opt.flip_prob;
  return d;
}

TrainSample apply_augment(const TrainSample& s, const AugmentDraw& d, const FlipPairs& pairs) {
  const Shape sh = s.image.shape();
  if (sh.n != 1) throw ShapeError("augment expects a single (1,C,H,W) image");
  const Vec2 c{(sh.w - 1) / 2.0, (sh.h - 1) / 2.0};
  const double rad = d.rotation_deg * kDeg;
  auto forward = [&](Vec2 p) {
    Vec2 q = c + d.scale * rotate(p - c, rad);
    if (d.flip) q.x = sh.w - 1 - q.x;
    return q;
  };

  TrainSample out;
  out.image = Tensor(sh);
  for (int y = 0; y < sh.h; ++y) {
    for (int x = 0; x < sh.w; ++x) {
      Vec2 q{static_cast<double>(x), static_cast<double>(y)};
      if (d.flip) q.x = sh.w - 1 - q.x;
      const Vec2 p = c + (1.0 / d.scale) * rotate(q - c, -rad);
      for (int ch = 0; ch < sh.c; ++ch) out.image.at(0, ch, y, x) = sample_bilinear(s.image, ch, p.y, p.x);
    }
  }

  out.annotation = s.annotation;
  out.annotation.norm = s.annotation.norm * d.scale;
  auto& js = out.annotation.joints;
  for (Joint& j : js) {
    const Vec2 q = forward({j.x, j.y});
    j.x = q.x;
    j.y = q.y;
    if (!in_frame(j.x, j.y, sh.h, sh.w)) j.v = 0;
  }
  if (d.flip) {
    for (const auto& [a, b] : pairs) {
      if (a < 0 || b < 0 || a >= static_cast<int>(js.size()) || b >= static_cast<int>(js.size())) {
        throw ShapeError("flip pair out of range");
      }
      std::swap(js[a], js[b]);
    }
  }
  return out;
}

TrainSample augment(const TrainSample& s, const AugmentOptions& opt, const FlipPairs& pairs,
                    std::mt19937& rng) {
  return apply_augment(s, draw_augment(opt, rng), pairs);
}

// ---------------------------------------------------------------- synthetic

const std::vector<std::string>& mpii_joint_names() {
  static const std::vector<std::string> names{
      "r_ankle", "r_knee",     "r_hip",    "l_hip",   "l_knee",     "l_ankle",
      "pelvis",  "thorax",     "upper_neck", "head_top", "r_wrist", "r_elbow",
      "r_shoulder", "l_shoulder", "l_elbow", "l_wrist"};
  return names;
}

const std::vector<int>& synth_joint_priority() {
  static const std::vector<int> order{kHeadTop, kUpperNeck, kRWrist,    kLWrist,
                                      kRAnkle,  kLAnkle,    kRElbow,    kLElbow,
                                      kRKnee,   kLKnee,     kRShoulder, kLShoulder,
                                      kRHip,    kLHip,      kPelvis,    kThorax};
  return order;
}

namespace {

std::vector<int> kept_joints(int k) {
  if (k < 4 || k > 16) throw ConfigError("synthetic figures need 4..16 keypoints, got " + std::to_string(k));
  const auto& pr = synth_joint_priority();
  return {pr.begin(), pr.begin() + k};
}

FlipPairs flip_pairs_for(const std::vector<int>& kept) {
  const std::vector<std::pair<int, int>> lr{{kRAnkle, kLAnkle}, {kRKnee, kLKnee}, {kRHip, kLHip},
                                            {kRWrist, kLWrist}, {kRElbow, kLElbow},
                                            {kRShoulder, kLShoulder}};
  FlipPairs out;
  auto pos = [&](int j) {
    auto it = std::find(kept.begin(), kept.end(), j);
    return it == kept.end() ? -1 : static_cast<int>(it - kept.begin());
  };
  for (auto [r, l] : lr) {
    const int a = pos(r), b = pos(l);
    if (a >= 0 && b >= 0) out.emplace_back(a, b);
  }
  return out;
}

std::vector<JointGroup> groups_for(const std::vector<int>& kept) {
  const std::vector<std::pair<std::string, std::vector<int>>> group_members{
      {"head", {kHeadTop, kUpperNeck}},   {"shoulder", {kRShoulder, kLShoulder}},
      {"elbow", {kRElbow, kLElbow}},      {"wrist", {kRWrist, kLWrist}},
      {"hip", {kRHip, kLHip, kPelvis}},   {"knee", {kRKnee, kLKnee}},
      {"ankle", {kRAnkle, kLAnkle}},      {"torso", {kThorax}}};
  std::vector<JointGroup> out;
  for (const auto& [name, members] : group_members) {
    JointGroup g{name, {}};
    for (int j : members) {
      auto it = std::find(kept.begin(), kept.end(), j);
      if (it != kept.end()) g.joints.push_back(static_cast<int>(it - kept.begin()));
    }
    if (!g.joints.empty()) out.push_back(std::move(g));
  }
  return out;
}

struct Stroke {
  Vec2 a, b;
  double radius;
};

}  // namespace

RenderedFigure render_stick_figure(int h, int w, int k, std::mt19937& rng) {
  const std::vector<int> kept = kept_joints(k);
  if (h < 16 || w < 16) throw ConfigError("synthetic figures need at least 16x16 pixels");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

  // Body frame: pelvis at the origin, y down, the figure faces the viewer so
  // its right side is on the image left.
  const double unit = std::min(h, w) / 64.0;
  const double s = uni(0.78, 0.98) * unit;
  std::array<Vec2, 16> p{};
  p[kPelvis] = {0, 0};
  p[kThorax] = {0, -14};
  p[kUpperNeck] = {0, -17.5};
  p[kHeadTop] = {0, -29};
  p[kRShoulder] = {-6, -14};
  p[kLShoulder] = {6, -14};
  p[kRHip] = {-4, 0};
  p[kLHip] = {4, 0};
  for (int side : {-1, 1}) {
    const bool right = side < 0;
    const double a1 = uni(-10, 120), a2 = std::min(a1 + uni(-40, 100), 165.0);
    const Vec2 sh = p[right ? kRShoulder : kLShoulder];
    Vec2 d1 = limb_dir(a1), d2 = limb_dir(a2);
    d1.x *= side;
    d2.x *= side;
    const Vec2 elbow = sh + 9.0 * d1;
    p[right ? kRElbow : kLElbow] = elbow;
    p[right ? kRWrist : kLWrist] = elbow + 8.0 * d2;

    const double l1 = uni(-10, 40), l2 = l1 + uni(-35, 35);
    Vec2 e1 = limb_dir(l1), e2 = limb_dir(l2);
    e1.x *= side;
    e2.x *= side;
    const Vec2 hip = p[right ? kRHip : kLHip];
    const Vec2 knee = hip + 11.0 * e1;
    p[right ? kRKnee : kLKnee] = knee;
    p[right ? kRAnkle : kLAnkle] = knee + 11.0 * e2;
  }
  const double tilt = uni(-15, 15) * kDeg;
  const Vec2 centre{(w - 1) / 2.0 + uni(-4, 4) * unit, (h - 1) / 2.0 + (3.5 + uni(-3, 3)) * unit};
  for (Vec2& q : p) q = centre + s * rotate(q, tilt);

  // Background: two-tone gradient with a few sinusoidal ripples and noise.
  const bool dark_bg = u(rng) < 0.5;
  std::array<double, 3> bg{}, fg{};
  for (int c = 0; c < 3; ++c) {
    bg[c] = dark_bg ? uni(0.05, 0.4) : uni(0.6, 0.95);
    fg[c] = dark_bg ? uni(0.65, 1.0) : uni(0.0, 0.35);
  }
  struct Ripple {
    double fx, fy, phase, amp;
  };
  std::array<Ripple, 3> ripples{};
  for (Ripple& r : ripples) r = {uni(-0.3, 0.3), uni(-0.3, 0.3), uni(0, 6.283), uni(0.02, 0.08)};
  std::normal_distribution<double> noise(0.0, 0.03);

  const double limb_r = 1.1 * s, torso_r = 1.6 * s;
  std::vector<Stroke> strokes{
      {p[kPelvis], p[kThorax], torso_r},       {p[kThorax], p[kUpperNeck], limb_r},
      {p[kRShoulder], p[kLShoulder], limb_r},  {p[kRHip], p[kLHip], limb_r},
      {p[kRShoulder], p[kRElbow], limb_r},     {p[kRElbow], p[kRWrist], limb_r},
      {p[kLShoulder], p[kLElbow], limb_r},     {p[kLElbow], p[kLWrist], limb_r},
      {p[kRHip], p[kRKnee], limb_r},           {p[kRKnee], p[kRAnkle], limb_r},
      {p[kLHip], p[kLKnee], limb_r},           {p[kLKnee], p[kLAnkle], limb_r},
      {p[kRWrist], p[kRWrist], 1.8 * s},       {p[kLWrist], p[kLWrist], 1.8 * s},
      {p[kRAnkle], p[kRAnkle], 1.6 * s},       {p[kLAnkle], p[kLAnkle], 1.6 * s},
  };
  const Vec2 head_c = 0.5 * (p[kUpperNeck] + p[kHeadTop]);
  const double head_r = 0.5 * std::hypot(p[kHeadTop].x - p[kUpperNeck].x,
                                         p[kHeadTop].y - p[kUpperNeck].y);
  strokes.push_back({head_c, head_c, head_r});

  RenderedFigure out;
  out.sample.image = Tensor(Shape{1, 3, h, w});
  out.foreground = Tensor(Shape{1, 1, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Vec2 q{static_cast<double>(x), static_cast<double>(y)};
      double cov = 0;
      for (const Stroke& st : strokes) {
        cov = std::max(cov, std::clamp(st.radius + 0.5 - dist_to_segment(q, st.a, st.b), 0.0, 1.0));
      }
      double tex = 0;
      for (const Ripple& r : ripples) tex += r.amp * std::sin(r.fx * x + r.fy * y + r.phase);
      const double n = noise(rng);
      for (int c = 0; c < 3; ++c) {
        const double back = bg[c] + tex + n;
        const double v = (1 - cov) * back + cov * (fg[c] + 0.5 * n);
        out.sample.image.at(0, c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
      out.foreground.at(0, 0, y, x) = static_cast<float>(cov);
    }
  }

  PoseAnnotation& ann = out.sample.annotation;
  ann.norm = std::hypot(p[kHeadTop].x - p[kUpperNeck].x, p[kHeadTop].y - p[kUpperNeck].y);
  for (int j : kept) {
    ann.joints.push_back({p[j].x, p[j].y, in_frame(p[j].x, p[j].y, h, w) ? 1.0 : 0.0});
  }
  return out;
}

Dataset synth_dataset(int n, int h, int w, int k, uint64_t seed, double occlusion) {
  if (n < 0) throw ConfigError("dataset size must be >= 0");
  if (occlusion < 0 || occlusion > 1) throw ConfigError("occlusion rate must be in [0,1]");
  Dataset d;
  const std::vector<int> kept = kept_joints(k);
  d.flip_pairs = flip_pairs_for(kept);
  for (int j : kept) d.joint_names.push_back(mpii_joint_names()[j]);
  d.groups = groups_for(kept);
  d.samples.reserve(n);
  for (int i = 0; i < n; ++i) {
    std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                      static_cast<uint32_t>(i)};
    std::mt19937 rng(seq);
    RenderedFigure f = render_stick_figure(h, w, k, rng);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (Joint& j : f.sample.annotation.joints) {
      if (u(rng) < occlusion) j.v = 0;
    }
    d.samples.push_back(std::move(f.sample));
  }
  return d;
}

}  // namespace lapx
