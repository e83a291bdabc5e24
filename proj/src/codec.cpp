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

#include "lapx/codec.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "lapx/errors.hpp"
#include "lapx/tensor_file.hpp"

namespace lapx {

using nlohmann::json;

EncodedHeatmaps encode_heatmaps(const PoseAnnotation& ann, int h, int w, double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("heatmap sigma must be positive");
  const int k = static_cast<int>(ann.joints.size());
  EncodedHeatmaps out{Tensor(Shape{1, k, h, w}), std::vector<bool>(k, false)};
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (int j = 0; j < k; ++j) {
    const Joint& jt = ann.joints[j];
    if (!(jt.v > 0) || !std::isfinite(jt.x) || !std::isfinite(jt.y)) continue;
    const double cx = std::round(jt.x);
    const double cy = std::round(jt.y);
    if (cx < 0 || cy < 0 || cx > w - 1 || cy > h - 1) continue;
    out.visible[j] = true;
    float* m = out.maps.data() + static_cast<int64_t>(j) * h * w;
    for (int y = 0; y < h; ++y) {
      const double dy = y - cy;
      for (int x = 0; x < w; ++x) {
        const double dx = x - cx;
        m[y * w + x] = static_cast<float>(std::exp(-(dx * dx + dy * dy) * inv));
      }
    }
  }
  return out;
}

PoseAnnotation scale_pose(const PoseAnnotation& ann, double factor) {
  PoseAnnotation out = ann;
  for (Joint& j : out.joints) {
    j.x *= factor;
    j.y *= factor;
  }
  out.norm *= factor;
  return out;
}

std::vector<std::vector<DecodedJoint>> decode_heatmaps(const Tensor& maps, bool quarter_offset) {
  const Shape s = maps.shape();
  if (quarter_offset && (s.h < 3 || s.w < 3)) {
    throw ShapeError("quarter offset needs maps of at least 3x3, got " + s.str());
  }
  std::vector<std::vector<DecodedJoint>> out(s.n, std::vector<DecodedJoint>(s.c));
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const float* m = maps.data() + (static_cast<int64_t>(n) * s.c + c) * s.plane();
      int best = 0;
      for (int i = 1; i < s.h * s.w; ++i) {
        if (m[i] > m[best]) best = i;
      }
      const int by = best / s.w;
      const int bx = best % s.w;
      DecodedJoint d{static_cast<double>(bx), static_cast<double>(by), m[best]};
      if (quarter_offset) {
        if (bx > 0 && bx < s.w - 1) {
          const float l = m[best - 1], r = m[best + 1];
          if (r > l) d.x += 0.25;
          if (l > r) d.x -= 0.25;
        }
        if (by > 0 && by < s.h - 1) {
          const float u = m[best - s.w], dn = m[best + s.w];
          if (dn > u) d.y += 0.25;
          if (u > dn) d.y -= 0.25;
        }
      }
      out[n][c] = d;
    }
  }
  return out;
}

Tensor mirror_width(const Tensor& t) {
  const Shape s = t.shape();
  Tensor out(s);
  const int64_t rows = static_cast<int64_t>(s.n) * s.c * s.h;
  for (int64_t r = 0; r < rows; ++r) {
    const float* src = t.data() + r * s.w;
    float* dst = out.data() + r * s.w;
    for (int x = 0; x < s.w; ++x) dst[x] = src[s.w - 1 - x];
  }
  return out;
}

Tensor flip_merge(const Tensor& maps, const Tensor& flipped_maps, const FlipPairs& pairs,
                  int shift_px) {
  const Shape s = maps.shape();
  if (flipped_maps.shape() != s) {
    throw ShapeError("flip_merge: " + s.str() + " vs " + flipped_maps.shape().str());
  }
  if (shift_px < 0) throw ConfigError("flip_merge: shift_px must be >= 0");
  std::vector<int> source(s.c);
  std::iota(source.begin(), source.end(), 0);
  for (const auto& [a, b] : pairs) {
    if (a < 0 || b < 0 || a >= s.c || b >= s.c) {
      throw ConfigError("flip pair index outside 0.." + std::to_string(s.c - 1));
    }
    source[a] = b;
    source[b] = a;
  }
  const Tensor un = mirror_width(flipped_maps);
  Tensor out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const float* a = maps.data() + (static_cast<int64_t>(n) * s.c + c) * s.plane();
      const float* b = un.data() + (static_cast<int64_t>(n) * s.c + source[c]) * s.plane();
      float* o = out.data() + (static_cast<int64_t>(n) * s.c + c) * s.plane();
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
          const int sx = std::max(x - shift_px, 0);
          o[y * s.w + x] = 0.5f * (a[y * s.w + x] + b[y * s.w + sx]);
        }
      }
    }
  }
  return out;
}

PckhReport pckh(const std::vector<PoseAnnotation>& preds, const std::vector<PoseAnnotation>& gts,
                double threshold, const std::vector<JointGroup>& groups) {
  if (preds.size() != gts.size()) {
    throw ShapeError("pckh: " + std::to_string(preds.size()) + " predictions for " +
                     std::to_string(gts.size()) + " ground truths");
  }
  const size_t k = gts.empty() ? 0 : gts[0].joints.size();
  std::vector<int64_t> correct(k, 0), annotated(k, 0);
  for (size_t i = 0; i < gts.size(); ++i) {
    if (gts[i].joints.size() != k || preds[i].joints.size() != k) {
      throw ShapeError("pckh: keypoint count mismatch at pose " + std::to_string(i));
    }
    for (size_t j = 0; j < k; ++j) {
      const Joint& g = gts[i].joints[j];
      if (!(g.v > 0)) continue;
      ++annotated[j];
      const Joint& p = preds[i].joints[j];
      const double d = std::hypot(p.x - g.x, p.y - g.y);
      if (d < threshold * gts[i].norm) ++correct[j];
    }
  }
  auto pct = [](int64_t c, int64_t a) {
    return a == 0 ? std::numeric_limits<double>::quiet_NaN() : 100.0 * c / a;
  };
  PckhReport r;
  for (size_t j = 0; j < k; ++j) {
    r.per_joint.push_back(pct(correct[j], annotated[j]));
    r.correct += correct[j];
    r.annotated += annotated[j];
  }
  for (const JointGroup& g : groups) {
    int64_t c = 0, a = 0;
    for (int j : g.joints) {
      if (j < 0 || static_cast<size_t>(j) >= k) throw ConfigError("joint group index out of range");
      c += correct[j];
      a += annotated[j];
    }
    r.groups.emplace_back(g.name, pct(c, a));
  }
  r.total = r.annotated == 0 ? 0.0 : 100.0 * r.correct / r.annotated;
  return r;
}

json PckhReport::to_json() const {
  auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  json pj = json::array();
  for (double v : per_joint) pj.push_back(num(v));
  json gj = json::object();
  for (const auto& [name, v] : groups) gj[name] = num(v);
  return {{"per_joint", pj}, {"groups", gj}, {"total", total},
          {"correct", correct}, {"annotated", annotated}};
}

std::string PckhReport::to_text() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  for (const auto& [name, v] : groups) os << std::left << std::setw(12) << name << v << "\n";
  os << std::left << std::setw(12) << "total" << total << "  (" << correct << "/" << annotated
     << ")\n";
  return os.str();
}

std::vector<double> coco_oks_constants() {
  const double sigmas[17] = {.26, .25, .25, .35, .35, .79, .79, .72, .72,
                             .62, .62, 1.07, 1.07, .87, .87, .89, .89};
  std::vector<double> k;
  for (double s : sigmas) k.push_back(2.0 * s / 10.0);
  return k;
}

double oks(const PoseAnnotation& pred, const PoseAnnotation& gt, const std::vector<double>& k) {
  if (pred.joints.size() != gt.joints.size() || k.size() != gt.joints.size()) {
    throw ShapeError("oks: keypoint count mismatch");
  }
  const double s2 = gt.norm * gt.norm;
  double acc = 0.0;
  int n = 0;
  for (size_t i = 0; i < gt.joints.size(); ++i) {
    if (!(gt.joints[i].v > 0)) continue;
    const double dx = pred.joints[i].x - gt.joints[i].x;
    const double dy = pred.joints[i].y - gt.joints[i].y;
    acc += std::exp(-(dx * dx + dy * dy) / (2.0 * s2 * k[i] * k[i]));
    ++n;
  }
  if (n == 0) throw Error("oks undefined: ground truth has no annotated joints");
  return acc / n;
}

namespace {

bool has_annotation(const PoseAnnotation& p) {
  return std::any_of(p.joints.begin(), p.joints.end(), [](const Joint& j) { return j.v > 0; });
}

}  // namespace

ApReport ap_over_oks(const std::vector<ImagePoses>& images, const std::vector<double>& k) {
  ApReport r;
  for (int i = 0; i < 10; ++i) r.thresholds.push_back((50 + 5 * i) / 100.0);

  // OKS table per image: rows are predictions in score order, columns gts.
  struct Det {
    double score;
    size_t image;
    size_t rank;  // position within the image's score order
  };
  std::vector<std::vector<size_t>> order(images.size());
  std::vector<std::vector<size_t>> valid_gts(images.size());
  std::vector<std::vector<std::vector<double>>> table(images.size());
  std::vector<Det> dets;
  int64_t npos = 0;
  for (size_t im = 0; im < images.size(); ++im) {
    const ImagePoses& ip = images[im];
    for (size_t g = 0; g < ip.gts.size(); ++g) {
      if (has_annotation(ip.gts[g])) valid_gts[im].push_back(g);
    }
    npos += static_cast<int64_t>(valid_gts[im].size());
    order[im].resize(ip.preds.size());
    std::iota(order[im].begin(), order[im].end(), 0);
    std::stable_sort(order[im].begin(), order[im].end(), [&](size_t a, size_t b) {
      return ip.preds[a].score > ip.preds[b].score;
    });
    for (size_t rnk = 0; rnk < order[im].size(); ++rnk) {
      const PoseAnnotation& p = ip.preds[order[im][rnk]];
      std::vector<double> row;
      for (size_t g : valid_gts[im]) row.push_back(oks(p, ip.gts[g], k));
      table[im].push_back(std::move(row));
      dets.push_back({p.score, im, rnk});
    }
  }
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Det& a, const Det& b) { return a.score > b.score; });

  for (double t : r.thresholds) {
    // Greedy matching inside each image, in score order.
    std::vector<std::vector<bool>> tp(images.size());
    for (size_t im = 0; im < images.size(); ++im) {
      std::vector<bool> used(valid_gts[im].size(), false);
      tp[im].assign(table[im].size(), false);
      for (size_t rnk = 0; rnk < table[im].size(); ++rnk) {
        int best = -1;
        double best_oks = -1.0;
        for (size_t g = 0; g < used.size(); ++g) {
          const double o = table[im][rnk][g];
          if (used[g] || o < t) continue;
          if (o > best_oks) {
            best_oks = o;
            best = static_cast<int>(g);
          }
        }
        if (best >= 0) {
          used[best] = true;
          tp[im][rnk] = true;
        }
      }
    }
    std::vector<double> precision, recall;
    int64_t ntp = 0, nfp = 0;
    for (const Det& d : dets) {
      if (tp[d.image][d.rank]) {
        ++ntp;
      } else {
        ++nfp;
      }
      precision.push_back(static_cast<double>(ntp) / (ntp + nfp));
      recall.push_back(npos == 0 ? 0.0 : static_cast<double>(ntp) / npos);
    }
    for (size_t i = precision.size(); i-- > 1;) {
      precision[i - 1] = std::max(precision[i - 1], precision[i]);
    }
    double ap = 0.0;
    for (int i = 0; i <= 100; ++i) {
      const double rt = i / 100.0;
      auto it = std::lower_bound(recall.begin(), recall.end(), rt);
      if (it != recall.end()) ap += precision[it - recall.begin()];
    }
    r.ap_at.push_back(npos == 0 ? 0.0 : ap / 101.0);
    r.ar_at.push_back(recall.empty() ? 0.0 : recall.back());
  }
  r.ap = std::accumulate(r.ap_at.begin(), r.ap_at.end(), 0.0) / r.ap_at.size();
  r.ar = std::accumulate(r.ar_at.begin(), r.ar_at.end(), 0.0) / r.ar_at.size();
  return r;
}

json ApReport::to_json() const {
  return {{"thresholds", thresholds}, {"ap_at", ap_at}, {"ar_at", ar_at}, {"ap", ap}, {"ar", ar}};
}

// ---------------------------------------------------------------- files

namespace {

json pose_to_json(const PoseAnnotation& p) {
  json joints = json::array();
  for (const Joint& j : p.joints) joints.push_back({j.x, j.y, j.v});
  return {{"joints", joints}, {"norm", p.norm}, {"score", p.score}};
}

PoseAnnotation pose_from_json(const json& j) {
  PoseAnnotation p;
  for (const json& jt : j.at("joints")) {
    if (!jt.is_array() || jt.size() != 3) throw FormatError("joint must be [x, y, v]");
    p.joints.push_back({jt[0].get<double>(), jt[1].get<double>(), jt[2].get<double>()});
  }
  p.norm = j.at("norm").get<double>();
  if (!(p.norm > 0)) throw FormatError("pose norm must be positive");
  if (j.contains("score")) p.score = j.at("score").get<double>();
  return p;
}

}  // namespace

json AnnotationSet::to_json() const {
  json imgs = json::array();
  for (const Image& im : images) {
    json poses = json::array();
    for (const PoseAnnotation& p : im.poses) poses.push_back(pose_to_json(p));
    imgs.push_back({{"name", im.name}, {"poses", poses}});
  }
  json pairs = json::array();
  for (const auto& [a, b] : flip_pairs) pairs.push_back({a, b});
  return {{"joint_names", joint_names}, {"flip_pairs", pairs}, {"images", imgs}};
}

AnnotationSet AnnotationSet::from_json(const json& j) {
  AnnotationSet s;
  try {
    if (j.contains("joint_names")) s.joint_names = j.at("joint_names").get<std::vector<std::string>>();
    if (j.contains("flip_pairs")) {
      for (const json& p : j.at("flip_pairs")) s.flip_pairs.emplace_back(p.at(0), p.at(1));
    }
    for (const json& im : j.at("images")) {
      Image img;
      img.name = im.at("name").get<std::string>();
      for (const json& p : im.at("poses")) img.poses.push_back(pose_from_json(p));
      s.images.push_back(std::move(img));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("annotation file: ") + e.what());
  }
  return s;
}

AnnotationSet AnnotationSet::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open annotation file " + path);
  try {
    return from_json(json::parse(f));
  } catch (const json::parse_error& e) {
    throw FormatError("malformed annotation file " + path + ": " + e.what());
  }
}

void AnnotationSet::save(const std::string& path) const {
  write_file_atomic(path, to_json().dump(1) + "\n");
}

void dump_heatmaps(const std::string& path,
                   const std::vector<std::pair<std::string, std::vector<Tensor>>>& maps) {
  std::vector<NamedTensor> out;
  for (const auto& [image, stages] : maps) {
    for (size_t s = 0; s < stages.size(); ++s) {
      const Shape sh = stages[s].shape();
      out.push_back({"heatmap/" + image + "/" + std::to_string(s + 1),
                     {sh.n, sh.c, sh.h, sh.w},
                     stages[s]});
    }
  }
  write_tensor_file(path, out);
}

}  // namespace lapx
