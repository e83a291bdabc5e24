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

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lapx/autograd.hpp"
#include "lapx/codec.hpp"
#include "lapx/model.hpp"
#include "lapx/tensor_file.hpp"

namespace lapx {

// (1/(2K)) * batch mean of sum_k vis[n*K+k] * ||pred - gt||^2 over each map.
// vis holds one flag per (sample, joint).
Var heatmap_mse_loss(const Var& pred, const Tensor& gt, const std::vector<uint8_t>& vis);

struct MultistageLoss {
  Var total;                      // mean of the stage losses
  std::vector<double> per_stage;
};

// The same targets and mask supervise every stage.
MultistageLoss multistage_loss(const std::vector<Var>& stage_preds, const Tensor& gt,
                               const std::vector<uint8_t>& vis);

struct LrSchedule {
  double base_lr = 3e-4;
  std::vector<int> milestones;
  double factor = 0.5;

  static LrSchedule mpii();
  static LrSchedule coco();
  void validate() const;
  nlohmann::json to_json() const;
  static LrSchedule from_json(const nlohmann::json& j);
};

// base_lr * factor^(milestones <= epoch)
double lr_at_epoch(const LrSchedule& s, int epoch);

struct GammaSchedule {
  int freeze_epochs = 10;
  int ramp_epochs = 50;
  double ramp_target = 0.2;
  // Also hold theta/phi/g/wz fixed until gamma becomes trainable.
  bool freeze_projections = false;

  void validate() const;
  nlohmann::json to_json() const;
  static GammaSchedule from_json(const nlohmann::json& j);
};

struct GammaPhase {
  double value = 0;   // scheduled value; ramp_target once trainable
  bool trainable = false;
};

GammaPhase gamma_at_epoch(const GammaSchedule& s, int epoch);

// Called at epoch start. While scheduled, overwrites every gamma and freezes
// it; afterwards unfreezes and leaves the learned values alone.
void apply_gamma_schedule(Model& m, const GammaSchedule& s, int epoch);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamOptions opt = {});

  // Updates every parameter that requires grad; a missing gradient counts as
  // zero. Frozen and non-trainable tensors are skipped entirely.
  void step(std::span<ParamTensor* const> params, double lr);

  int64_t steps() const { return step_; }
  const AdamOptions& options() const { return opt_; }

  // "adam/step", "adam/m/<param>", "adam/v/<param>" for params with state.
  std::vector<NamedTensor> state_tensors(std::span<ParamTensor* const> params) const;
  // Restores state written by state_tensors; unknown params are errors.
  void load_state(const std::vector<NamedTensor>& tensors, std::span<ParamTensor* const> params);

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  AdamOptions opt_;
  int64_t step_ = 0;
  std::vector<std::pair<const ParamTensor*, Moments>> state_;
  Moments& moments_for(const ParamTensor* p);
  const Moments* find(const ParamTensor* p) const;
};

struct TrainSample {
  Tensor image;  // (1,3,H,W), values in [0,1]
  PoseAnnotation annotation;  // image pixel coordinates
};

struct Dataset {
  std::vector<TrainSample> samples;
  FlipPairs flip_pairs;
  std::vector<std::string> joint_names;
  std::vector<JointGroup> groups;
};

struct AugmentOptions {
  bool enabled = true;
  double scale_min = 0.75;
  double scale_max = 1.25;
  double max_rotation_deg = 40.0;
  double flip_prob = 0.5;

  nlohmann::json to_json() const;
  static AugmentOptions from_json(const nlohmann::json& j);
};

struct AugmentDraw {
  double scale = 1.0;
  double rotation_deg = 0.0;
  bool flip = false;
};

AugmentDraw draw_augment(const AugmentOptions& opt, std::mt19937& rng);

// Scales and rotates about the image centre, then mirrors when flip is set
// (x -> W-1-x, left/right joints swapped). Pixels are resampled bilinearly
// with edge replication; joints landing outside the frame get v = 0.
TrainSample apply_augment(const TrainSample& s, const AugmentDraw& d, const FlipPairs& pairs);
TrainSample augment(const TrainSample& s, const AugmentOptions& opt, const FlipPairs& pairs,
                    std::mt19937& rng);

// MPII joint names in index order.
const std::vector<std::string>& mpii_joint_names();
// MPII indices in the order joints are kept when fewer than 16 are requested.
const std::vector<int>& synth_joint_priority();

struct RenderedFigure {
  TrainSample sample;
  Tensor foreground;  // (1,1,H,W) figure coverage in [0,1]
};

// One articulated stick figure on a textured background. Requires k in [4, 16].
RenderedFigure render_stick_figure(int h, int w, int k, std::mt19937& rng);

// n figures; sample i draws from seed_seq{seed, i}, so prefixes are stable.
Dataset synth_dataset(int n, int h, int w, int k, uint64_t seed, double occlusion = 0.1);

struct EvalOptions {
  bool flip_test = false;
  bool heatmap_shift = false;  // one heatmap pixel, only with flip_test
  bool quarter_offset = false;
  int batch_size = 32;
};

// Last-stage predictions in image pixels, eval-mode batch norm, no graph.
// Each pose's score is the mean of its joint maxima.
std::vector<PoseAnnotation> predict(Model& m, const Dataset& data, const EvalOptions& opt);
PckhReport evaluate_pckh(Model& m, const Dataset& data, const EvalOptions& opt, double thr = 0.5);

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  std::vector<double> gammas;  // one per Non-Local module, stage order
  std::vector<double> stage_loss;
  double loss = 0;
  double val_pckh = 0;

  nlohmann::json to_json() const;
};

struct TrainOptions {
  int epochs = 30;
  int batch_size = 16;
  uint64_t seed = 0;
  LrSchedule lr{4e-3, {20, 26}, 0.3};
  // Linear ramp of the learning rate over the first optimizer steps.
  int warmup_steps = 0;
  GammaSchedule gamma{2, 10, 0.2, false};
  AugmentOptions augment;
  AdamOptions adam;
  EvalOptions eval{false, false, true, 32};
  // JSON-lines log; each record is appended and flushed when its epoch ends.
  std::string log_path;
  std::function<void(const EpochRecord&)> on_epoch;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainOptions from_json(const nlohmann::json& j);
};

struct TrainResult {
  Model model;
  Adam adam;
  std::vector<EpochRecord> log;
  double best_val_pckh = 0;
  int best_epoch = -1;
};

// Throws NumericError naming the first non-finite tensor if the loss is not
// finite.
TrainResult train_loop(const ModelConfig& cfg, const Dataset& train, const Dataset& val,
                       const TrainOptions& opt);

// Weights, running statistics and optimizer state in one tensor file.
void save_checkpoint(const std::string& path, const Model& m, const Adam& adam);
void load_checkpoint(const std::string& path, Model& m, Adam* adam);

}  // namespace lapx
