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

#pragma once

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lapx/tensor.hpp"

namespace lapx {

struct Joint {
  double x = 0;
  double y = 0;
  double v = 0;  // > 0 means annotated
};

struct PoseAnnotation {
  std::vector<Joint> joints;
  double norm = 1.0;   // head-segment length or sqrt(area)
  double score = 1.0;  // confidence, used to rank predictions
};

using FlipPairs = std::vector<std::pair<int, int>>;

struct EncodedHeatmaps {
  Tensor maps;  // (1,K,h,w)
  std::vector<bool> visible;
};

// Coordinates are in heatmap pixels. Each visible joint whose nearest integer
// pixel lies inside the map gets an unnormalised Gaussian centred on that
// pixel (peak exactly 1); other joints get an all-zero map.
EncodedHeatmaps encode_heatmaps(const PoseAnnotation& ann, int h, int w, double sigma);

// Multiplies coordinates and norm by `factor`; visibility is unchanged.
PoseAnnotation scale_pose(const PoseAnnotation& ann, double factor);

struct DecodedJoint {
  double x = 0;
  double y = 0;
  double score = 0;
};

// Per sample, per keypoint argmax of (N,K,h,w) maps with first-occurrence
// ties. With quarter_offset the peak moves 0.25 px per axis toward the
// strictly larger neighbour; boundary peaks and ties do not move.
std::vector<std::vector<DecodedJoint>> decode_heatmaps(const Tensor& maps, bool quarter_offset);

// Mean of `maps` and the un-mirrored, pair-swapped `flipped_maps` shifted
// shift_px columns to the right with the first column replicated.
Tensor flip_merge(const Tensor& maps, const Tensor& flipped_maps, const FlipPairs& pairs,
                  int shift_px);

// Mirrors an (N,C,H,W) tensor along W.
Tensor mirror_width(const Tensor& t);

struct JointGroup {
  std::string name;
  std::vector<int> joints;
};

struct PckhReport {
  std::vector<double> per_joint;  // percentage, NaN when never annotated
  std::vector<std::pair<std::string, double>> groups;
  double total = 0;
  int64_t correct = 0;
  int64_t annotated = 0;

  nlohmann::json to_json() const;
  std::string to_text() const;
};

// Joint i is correct iff gt v>0 and ||pred - gt|| < threshold * gt.norm.
// Percentages are over annotated joints; total is weighted by frequency.
PckhReport pckh(const std::vector<PoseAnnotation>& preds, const std::vector<PoseAnnotation>& gts,
                double threshold = 0.5, const std::vector<JointGroup>& groups = {});

// Falloff constants k_i = 2 * sigma_i of the 17-keypoint COCO table.
std::vector<double> coco_oks_constants();

// Throws Error when gt has no annotated joints.
double oks(const PoseAnnotation& pred, const PoseAnnotation& gt, const std::vector<double>& k);

struct ImagePoses {
  std::vector<PoseAnnotation> gts;
  std::vector<PoseAnnotation> preds;
};

struct ApReport {
  std::vector<double> thresholds;
  std::vector<double> ap_at;
  std::vector<double> ar_at;
  double ap = 0;
  double ar = 0;

  nlohmann::json to_json() const;
};

// OKS thresholds 0.50:0.05:0.95, score-ordered greedy matching per image,
// 101-point interpolated precision. Ground truths without annotated joints
// are ignored.
ApReport ap_over_oks(const std::vector<ImagePoses>& images, const std::vector<double>& k);

struct AnnotationSet {
  struct Image {
    std::string name;
    std::vector<PoseAnnotation> poses;
  };
  std::vector<Image> images;
  FlipPairs flip_pairs;
  std::vector<std::string> joint_names;

  nlohmann::json to_json() const;
  // Throws FormatError on schema violations.
  static AnnotationSet from_json(const nlohmann::json& j);
  static AnnotationSet load(const std::string& path);
  void save(const std::string& path) const;
};

// Writes per-image, per-stage heatmaps as "heatmap/<image>/<stage>".
void dump_heatmaps(const std::string& path,
                   const std::vector<std::pair<std::string, std::vector<Tensor>>>& maps);

}  // namespace lapx
