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

#include "lapx/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "lapx/errors.hpp"

namespace lapx {

using detail::Node;

namespace {

float* grad_of(Node* n) {
  return (n != nullptr && n->requires_grad) ? n->grad_buffer().data() : nullptr;
}

void check_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> keys,
                        const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be an object");
  for (const auto& [k, _] : j.items()) {
    if (std::find_if(keys.begin(), keys.end(), [&](const char* s) { return k == s; }) ==
        keys.end()) {
      throw ConfigError(std::string(what) + ": unknown key \"" + k + "\"");
    }
  }
}

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out, const char* what) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string(what) + ": bad value for \"" + key + "\"");
  }
}

}  // namespace

Var heatmap_mse_loss(const Var& pred, const Tensor& gt, const std::vector<uint8_t>& vis) {
  const Shape s = pred.shape();
  if (!(gt.shape() == s)) {
    throw ShapeError("heatmap loss: prediction " + s.str() + " vs target " + gt.shape().str());
  }
  if (static_cast<int64_t>(vis.size()) != static_cast<int64_t>(s.n) * s.c) {
    throw ShapeError("heatmap loss: visibility has " + std::to_string(vis.size()) +
                     " flags, expected " + std::to_string(s.n * s.c));
  }
  const int64_t plane = s.plane();
  const float* p = pred.value().data();
  const float* t = gt.data();
  double acc = 0.0;
  for (int64_t m = 0; m < static_cast<int64_t>(s.n) * s.c; ++m) {
    if (!vis[m]) continue;
    for (int64_t i = m * plane; i < (m + 1) * plane; ++i) {
      const double d = static_cast<double>(p[i]) - t[i];
      acc += d * d;
    }
  }
  const double norm = 1.0 / (2.0 * s.c * s.n);
  Node* pn = pred.node();
  return Var::make(
      "heatmap_mse", Tensor::scalar(static_cast<float>(acc * norm)), {pred},
      [pn, gt, vis, norm, plane](Node& self) {
        float* dp = grad_of(pn);
        if (!dp) return;
        const float k = static_cast<float>(2.0 * norm * self.grad[0]);
        const float* pv = pn->value().data();
        for (size_t m = 0; m < vis.size(); ++m) {
          if (!vis[m]) continue;
          const int64_t b = static_cast<int64_t>(m) * plane;
          for (int64_t i = b; i < b + plane; ++i) dp[i] += k * (pv[i] - gt[i]);
        }
      });
}

MultistageLoss multistage_loss(const std::vector<Var>& stage_preds, const Tensor& gt,
                               const std::vector<uint8_t>& vis) {
  if (stage_preds.empty()) throw ShapeError("multistage loss: no stage predictions");
  MultistageLoss out;
  Var total;
  for (const Var& p : stage_preds) {
    Var l = heatmap_mse_loss(p, gt, vis);
    out.per_stage.push_back(l.value()[0]);
    total = total ? add(total, l) : l;
  }
  out.total = scale(total, 1.0f / static_cast<float>(stage_preds.size()));
  return out;
}

// ---------------------------------------------------------------- schedules

LrSchedule LrSchedule::mpii() { return {3e-4, {105, 150, 175, 190}, 0.5}; }
LrSchedule LrSchedule::coco() { return {2e-4, {120, 160, 190}, 0.4}; }

void LrSchedule::validate() const {
  if (!(base_lr > 0) || !std::isfinite(base_lr)) throw ConfigError("lr: base_lr must be > 0");
  if (!(factor > 0) || !std::isfinite(factor)) throw ConfigError("lr: factor must be > 0");
  for (size_t i = 0; i < milestones.size(); ++i) {
    if (milestones[i] < 0 || (i > 0 && milestones[i] <= milestones[i - 1])) {
      throw ConfigError("lr: milestones must be non-negative and strictly increasing");
    }
  }
}

nlohmann::json LrSchedule::to_json() const {
  return {{"base_lr", base_lr}, {"milestones", milestones}, {"factor", factor}};
}

LrSchedule LrSchedule::from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const std::string name = j.get<std::string>();
    if (name == "mpii") return mpii();
    if (name == "coco") return coco();
    throw ConfigError("lr: unknown schedule preset \"" + name + "\"");
  }
  check_unknown_keys(j, {"base_lr", "milestones", "factor"}, "lr");
  LrSchedule s;
  read_key(j, "base_lr", s.base_lr, "lr");
  read_key(j, "milestones", s.milestones, "lr");
  read_key(j, "factor", s.factor, "lr");
  s.validate();
  return s;
}

double lr_at_epoch(const LrSchedule& s, int epoch) {
  if (epoch < 0) throw ConfigError("lr: negative epoch");
  double lr = s.base_lr;
  for (int m : s.milestones) {
    if (m <= epoch) lr *= s.factor;
  }
  return lr;
}

void GammaSchedule::validate() const {
  if (freeze_epochs < 0 || ramp_epochs < 0) throw ConfigError("gamma: negative epoch count");
  if (!std::isfinite(ramp_target)) throw ConfigError("gamma: ramp_target must be finite");
}

nlohmann::json GammaSchedule::to_json() const {
  return {{"freeze_epochs", freeze_epochs},
          {"ramp_epochs", ramp_epochs},
          {"ramp_target", ramp_target},
          {"freeze_projections", freeze_projections}};
}

GammaSchedule GammaSchedule::from_json(const nlohmann::json& j) {
  check_unknown_keys(j, {"freeze_epochs", "ramp_epochs", "ramp_target", "freeze_projections"},
                     "gamma");
  GammaSchedule s;
  read_key(j, "freeze_epochs", s.freeze_epochs, "gamma");
  read_key(j, "ramp_epochs", s.ramp_epochs, "gamma");
  read_key(j, "ramp_target", s.ramp_target, "gamma");
  read_key(j, "freeze_projections", s.freeze_projections, "gamma");
  s.validate();
  return s;
}

GammaPhase gamma_at_epoch(const GammaSchedule& s, int epoch) {
  if (epoch < 0) throw ConfigError("gamma: negative epoch");
  if (epoch < s.freeze_epochs) return {0.0, false};
  const int into = epoch - s.freeze_epochs;
  if (into < s.ramp_epochs) {
    return {s.ramp_target * static_cast<double>(into) / s.ramp_epochs, false};
  }
  return {s.ramp_target, true};
}

void apply_gamma_schedule(Model& m, const GammaSchedule& s, int epoch) {
  const GammaPhase ph = gamma_at_epoch(s, epoch);
  for (int st = 1; st <= m.config().num_stages; ++st) {
    for (NonLocalParams* nl : m.nonlocal_modules(st)) {
      if (!ph.trainable) nl->gamma.value.fill(static_cast<float>(ph.value));
      nl->gamma.frozen = !ph.trainable;
      const bool hold = s.freeze_projections && !ph.trainable;
      for (ParamTensor* p : {&nl->theta, &nl->phi, &nl->g, &nl->wz}) p->frozen = hold;
    }
  }
}

// --------------------------------------------------------------------- adam

Adam::Adam(AdamOptions opt) : opt_(opt) {}

Adam::Moments& Adam::moments_for(const ParamTensor* p) {
  for (auto& [key, mom] : state_) {
    if (key == p) return mom;
  }
  state_.emplace_back(p, Moments{std::vector<double>(p->numel(), 0.0),
                                 std::vector<double>(p->numel(), 0.0)});
  return state_.back().second;
}

const Adam::Moments* Adam::find(const ParamTensor* p) const {
  for (const auto& [key, mom] : state_) {
    if (key == p) return &mom;
  }
  return nullptr;
}

void Adam::step(std::span<ParamTensor* const> params, double lr) {
  ++step_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
  for (ParamTensor* p : params) {
    if (!p->requires_grad()) continue;
    Moments& mom = moments_for(p);
    const bool has_grad = !p->grad.empty();
    if (has_grad && p->grad.numel() != p->numel()) {
      throw ShapeError("adam: gradient of " + p->name + " has the wrong size");
    }
    float* w = p->value.data();
    for (int64_t i = 0; i < p->numel(); ++i) {
      const double g = has_grad ? p->grad[i] : 0.0;
      mom.m[i] = opt_.beta1 * mom.m[i] + (1.0 - opt_.beta1) * g;
      mom.v[i] = opt_.beta2 * mom.v[i] + (1.0 - opt_.beta2) * g * g;
      const double mh = mom.m[i] / bc1;
      const double vh = mom.v[i] / bc2;
      w[i] = static_cast<float>(w[i] - lr * mh / (std::sqrt(vh) + opt_.eps));
    }
  }
}

std::vector<NamedTensor> Adam::state_tensors(std::span<ParamTensor* const> params) const {
  std::vector<NamedTensor> out;
  out.push_back({"adam/step", {1}, Tensor::scalar(static_cast<float>(step_))});
  for (const ParamTensor* p : params) {
    const Moments* mom = find(p);
    if (!mom) continue;
    Tensor m(p->value.shape()), v(p->value.shape());
    for (int64_t i = 0; i < p->numel(); ++i) {
      m[i] = static_cast<float>(mom->m[i]);
      v[i] = static_cast<float>(mom->v[i]);
    }
    out.push_back({"adam/m/" + p->name, p->dims, std::move(m)});
    out.push_back({"adam/v/" + p->name, p->dims, std::move(v)});
  }
  return out;
}

void Adam::load_state(const std::vector<NamedTensor>& tensors,
                      std::span<ParamTensor* const> params) {
  std::vector<std::pair<const ParamTensor*, Moments>> state;
  int64_t step = -1;
  auto param_named = [&](const std::string& name) -> const ParamTensor* {
    for (const ParamTensor* p : params) {
      if (p->name == name) return p;
    }
    throw MissingTensorError(name);
  };
  auto slot = [&](const ParamTensor* p) -> Moments& {
    for (auto& [key, mom] : state) {
      if (key == p) return mom;
    }
    state.emplace_back(p, Moments{});
    return state.back().second;
  };
  for (const NamedTensor& t : tensors) {
    if (t.name == "adam/step") {
      step = static_cast<int64_t>(t.value[0]);
      continue;
    }
    const bool is_m = t.name.rfind("adam/m/", 0) == 0;
    const bool is_v = t.name.rfind("adam/v/", 0) == 0;
    if (!is_m && !is_v) continue;
    const ParamTensor* p = param_named(t.name.substr(7));
    if (t.dims != p->dims) throw ShapeError("adam state " + t.name + " does not match its parameter");
    std::vector<double>& dst = is_m ? slot(p).m : slot(p).v;
    dst.assign(t.value.values().begin(), t.value.values().end());
  }
  if (step < 0) throw MissingTensorError("adam/step");
  for (auto& [p, mom] : state) {
    if (mom.m.size() != mom.v.size()) throw FormatError("adam state for " + p->name + " is incomplete");
  }
  step_ = step;
  state_ = std::move(state);
}

// ----------------------------------------------------------------- evaluate

namespace {

Tensor stack_images(const Dataset& data, size_t begin, size_t end) {
  const Shape s0 = data.samples[begin].image.shape();
  Tensor out(Shape{static_cast<int>(end - begin), 3, s0.h, s0.w});
  const int64_t per = s0.numel();
  for (size_t i = begin; i < end; ++i) {
    const Tensor& img = data.samples[i].image;
    if (!(img.shape() == s0)) throw ShapeError("dataset images differ in size");
    std::copy(img.data(), img.data() + per, out.data() + static_cast<int64_t>(i - begin) * per);
  }
  return out;
}

void check_dataset(const Dataset& data, const ModelConfig& cfg, const char* what) {
  if (data.samples.empty()) throw ConfigError(std::string(what) + " dataset is empty");
  for (const TrainSample& s : data.samples) {
    if (!(s.image.shape() == Shape{1, 3, cfg.input_h, cfg.input_w})) {
      throw ShapeError(std::string(what) + " image " + s.image.shape().str() +
                       " does not match the model input");
    }
    if (static_cast<int>(s.annotation.joints.size()) != cfg.num_keypoints) {
      throw ShapeError(std::string(what) + " annotation has " +
                       std::to_string(s.annotation.joints.size()) + " joints, model has " +
                       std::to_string(cfg.num_keypoints));
    }
  }
}

}  // namespace

std::vector<PoseAnnotation> predict(Model& m, const Dataset& data, const EvalOptions& opt) {
  const ModelConfig& cfg = m.config();
  check_dataset(data, cfg, "eval");
  const double stride = static_cast<double>(cfg.input_w) / cfg.heatmap_w();
  NoGradGuard guard;
  std::vector<PoseAnnotation> out;
  const size_t bs = static_cast<size_t>(std::max(1, opt.batch_size));
  for (size_t b = 0; b < data.samples.size(); b += bs) {
    const size_t e = std::min(data.samples.size(), b + bs);
    Tensor images = stack_images(data, b, e);
    Tensor maps = m.forward(images, BnMode::kEval).back().value();
    if (opt.flip_test) {
      Tensor flipped = m.forward(mirror_width(images), BnMode::kEval).back().value();
      maps = flip_merge(maps, flipped, data.flip_pairs, opt.heatmap_shift ? 1 : 0);
    }
    for (const auto& joints : decode_heatmaps(maps, opt.quarter_offset)) {
      PoseAnnotation p;
      double score = 0;
      for (const DecodedJoint& d : joints) {
        p.joints.push_back({d.x * stride, d.y * stride, 1.0});
        score += d.score;
      }
      p.score = joints.empty() ? 0.0 : score / static_cast<double>(joints.size());
      out.push_back(std::move(p));
    }
  }
  return out;
}

PckhReport evaluate_pckh(Model& m, const Dataset& data, const EvalOptions& opt, double thr) {
  std::vector<PoseAnnotation> gts;
  for (const TrainSample& s : data.samples) gts.push_back(s.annotation);
  return pckh(predict(m, data, opt), gts, thr, data.groups);
}

// -------------------------------------------------------------------- train

nlohmann::json EpochRecord::to_json() const {
  return {{"epoch", epoch}, {"lr", lr},          {"gamma", gammas}, {"stage_loss", stage_loss},
          {"loss", loss},   {"val_pckh", val_pckh}};
}

void TrainOptions::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2");
  if (warmup_steps < 0) throw ConfigError("train: warmup_steps must be >= 0");
  lr.validate();
  gamma.validate();
  if (augment.scale_min <= 0 || augment.scale_max < augment.scale_min) {
    throw ConfigError("augment: need 0 < scale_min <= scale_max");
  }
  if (augment.flip_prob < 0 || augment.flip_prob > 1) {
    throw ConfigError("augment: flip_prob must be in [0,1]");
  }
}

nlohmann::json AugmentOptions::to_json() const {
  return {{"enabled", enabled},
          {"scale_min", scale_min},
          {"scale_max", scale_max},
          {"max_rotation_deg", max_rotation_deg},
          {"flip_prob", flip_prob}};
}

AugmentOptions AugmentOptions::from_json(const nlohmann::json& j) {
  check_unknown_keys(j, {"enabled", "scale_min", "scale_max", "max_rotation_deg", "flip_prob"},
                     "augment");
  AugmentOptions a;
  read_key(j, "enabled", a.enabled, "augment");
  read_key(j, "scale_min", a.scale_min, "augment");
  read_key(j, "scale_max", a.scale_max, "augment");
  read_key(j, "max_rotation_deg", a.max_rotation_deg, "augment");
  read_key(j, "flip_prob", a.flip_prob, "augment");
  return a;
}

nlohmann::json TrainOptions::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"seed", seed},
          {"warmup_steps", warmup_steps},
          {"lr", lr.to_json()},
          {"gamma", gamma.to_json()},
          {"augment", augment.to_json()},
          {"adam", {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}}}};
}

TrainOptions TrainOptions::from_json(const nlohmann::json& j) {
  check_unknown_keys(j, {"epochs", "batch_size", "seed", "warmup_steps", "lr", "gamma", "augment", "adam"},
                     "train");
  TrainOptions t;
  read_key(j, "epochs", t.epochs, "train");
  read_key(j, "batch_size", t.batch_size, "train");
  read_key(j, "seed", t.seed, "train");
  read_key(j, "warmup_steps", t.warmup_steps, "train");
  if (j.contains("lr")) t.lr = LrSchedule::from_json(j["lr"]);
  if (j.contains("gamma")) t.gamma = GammaSchedule::from_json(j["gamma"]);
  if (j.contains("augment")) t.augment = AugmentOptions::from_json(j["augment"]);
  if (j.contains("adam")) {
    check_unknown_keys(j["adam"], {"beta1", "beta2", "eps"}, "adam");
    read_key(j["adam"], "beta1", t.adam.beta1, "adam");
    read_key(j["adam"], "beta2", t.adam.beta2, "adam");
    read_key(j["adam"], "eps", t.adam.eps, "adam");
  }
  t.validate();
  return t;
}

namespace {

std::string first_non_finite(const Model& m, const std::vector<Var>& preds) {
  for (size_t s = 0; s < preds.size(); ++s) {
    if (!preds[s].value().all_finite()) return "stage" + std::to_string(s + 1) + ".heatmaps";
  }
  for (const ParamTensor* p : m.parameters()) {
    if (!p->value.all_finite()) return p->name;
  }
  for (const ParamTensor* p : m.buffers()) {
    if (!p->value.all_finite()) return p->name;
  }
  return "loss";
}

}  // namespace

TrainResult train_loop(const ModelConfig& cfg, const Dataset& train, const Dataset& val,
                       const TrainOptions& opt) {
  cfg.validate();
  opt.validate();
  check_dataset(train, cfg, "train");
  check_dataset(val, cfg, "val");

  TrainResult r{build_model(cfg, opt.seed), Adam(opt.adam), {}, 0.0, -1};
  Model& m = r.model;
  std::seed_seq seq{static_cast<uint32_t>(opt.seed), static_cast<uint32_t>(opt.seed >> 32),
                    0x74726e5fu};
  std::mt19937 rng(seq);

  std::ofstream log;
  if (!opt.log_path.empty()) {
    log.open(opt.log_path, std::ios::trunc);
    if (!log) throw Error("cannot open log " + opt.log_path);
  }

  const int hh = cfg.heatmap_h(), hw = cfg.heatmap_w();
  const int k = cfg.num_keypoints;
  const double to_heatmap = static_cast<double>(hw) / cfg.input_w;
  std::vector<size_t> order(train.samples.size());
  std::iota(order.begin(), order.end(), size_t{0});

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    const double lr = lr_at_epoch(opt.lr, epoch);
    apply_gamma_schedule(m, opt.gamma, epoch);
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<double> stage_sum(cfg.num_stages, 0.0);
    double seen = 0;
    const size_t bs = static_cast<size_t>(opt.batch_size);
    for (size_t b = 0; b < order.size(); b += bs) {
      const size_t e = std::min(order.size(), b + bs);
      if (e - b < 2) break;  // batch norm needs two samples
      const int n = static_cast<int>(e - b);
      Tensor images(Shape{n, 3, cfg.input_h, cfg.input_w});
      Tensor gt(Shape{n, k, hh, hw});
      std::vector<uint8_t> vis(static_cast<size_t>(n) * k, 0);
      const int64_t per_img = images.numel() / n, per_gt = gt.numel() / n;
      for (int i = 0; i < n; ++i) {
        const TrainSample& src = train.samples[order[b + i]];
        TrainSample s = opt.augment.enabled ? augment(src, opt.augment, train.flip_pairs, rng) : src;
        std::copy(s.image.data(), s.image.data() + per_img, images.data() + i * per_img);
        EncodedHeatmaps enc =
            encode_heatmaps(scale_pose(s.annotation, to_heatmap), hh, hw, cfg.heatmap_sigma);
        std::copy(enc.maps.data(), enc.maps.data() + per_gt, gt.data() + i * per_gt);
        for (int j = 0; j < k; ++j) vis[static_cast<size_t>(i) * k + j] = enc.visible[j] ? 1 : 0;
      }
      m.zero_grad();
      std::vector<Var> preds = m.forward(Var::input(std::move(images), false), BnMode::kTrain);
      MultistageLoss loss = multistage_loss(preds, gt, vis);
      if (!std::isfinite(loss.total.value()[0])) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b / bs) + "; first non-finite tensor: " +
                           first_non_finite(m, preds));
      }
      backward(loss.total);
      for (const ParamTensor* p : m.parameters()) {
        if (!p->grad.empty() && !p->grad.all_finite()) {
          throw NumericError("non-finite gradient at epoch " + std::to_string(epoch) +
                             "; first non-finite tensor: " + p->name + ".grad");
        }
      }
      const double warm = opt.warmup_steps > 0
                              ? std::min(1.0, static_cast<double>(r.adam.steps() + 1) / opt.warmup_steps)
                              : 1.0;
      r.adam.step(m.parameters(), lr * warm);
      for (int s = 0; s < cfg.num_stages; ++s) stage_sum[s] += loss.per_stage[s] * n;
      seen += n;
    }
    m.zero_grad();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    for (const ParamTensor* g : m.gammas()) rec.gammas.push_back(g->value[0]);
    for (double v : stage_sum) rec.stage_loss.push_back(v / seen);
    rec.loss = std::accumulate(rec.stage_loss.begin(), rec.stage_loss.end(), 0.0) /
               static_cast<double>(rec.stage_loss.size());
    rec.val_pckh = evaluate_pckh(m, val, opt.eval).total;
    if (rec.val_pckh > r.best_val_pckh || r.best_epoch < 0) {
      r.best_val_pckh = rec.val_pckh;
      r.best_epoch = epoch;
    }
    if (log.is_open()) {
      log << rec.to_json().dump() << '\n';
      log.flush();
    }
    r.log.push_back(rec);
    if (opt.on_epoch) opt.on_epoch(rec);
  }
  return r;
}

void save_checkpoint(const std::string& path, const Model& m, const Adam& adam) {
  std::vector<NamedTensor> all = weight_tensors(m);
  std::vector<NamedTensor> st = adam.state_tensors(m.parameters());
  all.insert(all.end(), std::make_move_iterator(st.begin()), std::make_move_iterator(st.end()));
  write_tensor_file(path, all);
}

void load_checkpoint(const std::string& path, Model& m, Adam* adam) {
  load_weights(m, path);
  if (adam) adam->load_state(read_tensor_file(path), m.parameters());
}

}  // namespace lapx
