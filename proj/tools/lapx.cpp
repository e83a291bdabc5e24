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

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lapx/analysis.hpp"
#include "lapx/codec.hpp"
#include "lapx/errors.hpp"
#include "lapx/model.hpp"
#include "lapx/tensor_file.hpp"
#include "lapx/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lapx {
namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

struct Common {
  std::string config_path;
  std::string preset_name;
  std::string json_out;
  uint64_t seed = 0;
};

struct UsageError : Error {
  using Error::Error;
};

uint64_t default_seed() {
  const char* env = std::getenv("LAPX_SEED");
  if (env == nullptr || *env == '\0') return 0;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (*end != '\0') throw UsageError(std::string("LAPX_SEED is not an unsigned integer: ") + env);
  return v;
}

ModelConfig resolve_config(const Common& c, const std::string& fallback_preset) {
  if (!c.config_path.empty() && !c.preset_name.empty()) {
    throw UsageError("--config and --preset are mutually exclusive");
  }
  if (!c.config_path.empty()) return ModelConfig::load(c.config_path);
  ModelConfig cfg = preset(c.preset_name.empty() ? fallback_preset : c.preset_name);
  cfg.validate();
  return cfg;
}

std::pair<int, int> parse_hw(const std::string& s, const ModelConfig& cfg) {
  if (s.empty()) return {cfg.input_h, cfg.input_w};
  const auto x = s.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument(s);
    size_t used = 0;
    const int h = std::stoi(s.substr(0, x), &used);
    if (used != x) throw std::invalid_argument(s);
    const int w = std::stoi(s.substr(x + 1), &used);
    if (used != s.size() - x - 1) throw std::invalid_argument(s);
    if (h <= 0 || w <= 0) throw std::invalid_argument(s);
    return {h, w};
  } catch (const std::logic_error&) {
    throw UsageError("--input must look like HxW, got \"" + s + "\"");
  }
}

void echo_config(const ModelConfig& cfg, const json& extra = json()) {
  json j{{"model", cfg.to_json()}};
  if (!extra.is_null()) j.update(extra);
  std::cout << "config " << j.dump() << "\n";
}

void write_text_atomic(const std::string& path, const std::string& text) {
  write_file_atomic(path, text);
}

void maybe_json_out(const Common& c, const json& j) {
  if (!c.json_out.empty()) write_text_atomic(c.json_out, j.dump(2) + "\n");
}

// ---------------------------------------------------------------- commands

int cmd_summary(const Common& c, const std::string& input) {
  const ModelConfig cfg = resolve_config(c, "lapx-3s208");
  const auto [h, w] = parse_hw(input, cfg);
  echo_config(cfg, {{"input_hw", {h, w}}});
  Model m = build_model(cfg, c.seed);
  EfficiencyReport r = count_flops(m, h, w);
  std::cout << r.to_text();
  json j = r.to_json();
  j["activation_footprint_bytes"] = activation_footprint(m, h, w);
  std::cout << "activation footprint (peak live + weights): " << j["activation_footprint_bytes"]
            << " bytes\n";
  maybe_json_out(c, j);
  return kExitOk;
}

struct ToyData {
  int train = 300;
  int val = 100;
  uint64_t data_seed = 1;
};

Dataset make_val(const ModelConfig& cfg, const ToyData& d) {
  return synth_dataset(d.val, cfg.input_h, cfg.input_w, cfg.num_keypoints, d.data_seed + 7919);
}

int cmd_train_toy(const Common& c, const ToyData& data, TrainOptions opt, const std::string& train_cfg,
                  const std::string& out_dir, bool quiet) {
  if (out_dir.empty()) throw UsageError("--out is required");
  const ModelConfig cfg = resolve_config(c, "toy-3s32");
  if (!train_cfg.empty()) {
    std::ifstream in(train_cfg);
    if (!in) throw UsageError("cannot read " + train_cfg);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError(train_cfg + ": " + e.what());
    }
    const int epochs = opt.epochs, batch = opt.batch_size;
    opt = TrainOptions::from_json(j);
    if (!j.contains("epochs")) opt.epochs = epochs;
    if (!j.contains("batch_size")) opt.batch_size = batch;
  }
  opt.seed = c.seed;
  opt.validate();
  if (data.train < 2 || data.val < 1) throw UsageError("need >= 2 training and >= 1 validation samples");
  echo_config(cfg, {{"train", opt.to_json()},
                    {"data", {{"train", data.train}, {"val", data.val}, {"data_seed", data.data_seed}}}});

  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  const std::string log_tmp = (dir / "log.jsonl.tmp").string();
  opt.log_path = log_tmp;
  const auto t0 = std::chrono::steady_clock::now();
  if (!quiet) {
    opt.on_epoch = [&](const EpochRecord& r) {
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("epoch %3d  lr %.2e  loss %.5f  val PCKh@0.5 %6.2f  (%.0fs)\n", r.epoch, r.lr, r.loss,
                  r.val_pckh, s);
      std::fflush(stdout);
    };
  }
  Dataset train = synth_dataset(data.train, cfg.input_h, cfg.input_w, cfg.num_keypoints, data.data_seed);
  Dataset val = make_val(cfg, data);
  TrainResult r;
  try {
    r = train_loop(cfg, train, val, opt);
  } catch (...) {
    std::error_code ec;
    fs::remove(log_tmp, ec);
    throw;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_checkpoint((dir / "checkpoint.lapx").string(), r.model, r.adam);
  write_text_atomic((dir / "config.json").string(), json{{"model", cfg.to_json()}}.dump(2) + "\n");
  fs::rename(log_tmp, dir / "log.jsonl");
  json summary{{"best_val_pckh", r.best_val_pckh},
               {"best_epoch", r.best_epoch},
               {"final_val_pckh", r.log.back().val_pckh},
               {"final_loss", r.log.back().loss},
               {"epochs", opt.epochs},
               {"seconds", secs}};
  std::printf("best val PCKh@0.5 %.2f at epoch %d (final %.2f, %.1fs)\n", r.best_val_pckh, r.best_epoch,
              r.log.back().val_pckh, secs);
  maybe_json_out(c, summary);
  return kExitOk;
}

int cmd_eval(const Common& c, const ToyData& data, const std::string& checkpoint, EvalOptions eo,
             const std::string& dump) {
  if (checkpoint.empty()) throw UsageError("--checkpoint is required");
  const ModelConfig cfg = resolve_config(c, "toy-3s32");
  echo_config(cfg, {{"eval",
                     {{"flip_test", eo.flip_test},
                      {"heatmap_shift", eo.heatmap_shift},
                      {"quarter_offset", eo.quarter_offset}}},
                    {"data", {{"val", data.val}, {"data_seed", data.data_seed}}}});
  if (eo.heatmap_shift && !eo.flip_test) throw UsageError("--heatmap-shift needs --flip-test");
  Model m = build_model(cfg, c.seed);
  try {
    load_weights(m, checkpoint);
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw UsageError(std::string("checkpoint does not match the config: ") + e.what());
  }
  Dataset val = make_val(cfg, data);
  PckhReport rep = evaluate_pckh(m, val, eo);
  std::cout << rep.to_text();
  json j{{"pckh", rep.to_json()}};
  if (!dump.empty()) {
    NoGradGuard guard;
    std::vector<std::pair<std::string, std::vector<Tensor>>> maps;
    for (size_t i = 0; i < val.samples.size(); ++i) {
      std::vector<Tensor> stages;
      for (const Var& v : m.forward(val.samples[i].image, BnMode::kEval)) stages.push_back(v.value());
      maps.emplace_back("val" + std::to_string(i), std::move(stages));
    }
    dump_heatmaps(dump, maps);
  }
  maybe_json_out(c, j);
  return kExitOk;
}

int cmd_bench(const Common& c, const std::string& checkpoint, const std::string& input, BenchOptions bo) {
  const ModelConfig cfg = resolve_config(c, "lapx-3s208");
  const auto [h, w] = parse_hw(input, cfg);
  bo.seed = c.seed;
  echo_config(cfg, {{"bench",
                     {{"input_hw", {h, w}},
                      {"warmup", bo.warmup},
                      {"iters", bo.iters},
                      {"threads", bo.threads},
                      {"batch", bo.batch}}}});
  Model m = build_model(cfg, c.seed);
  if (!checkpoint.empty()) load_weights(m, checkpoint);
  BenchReport r = bench_latency(m, h, w, bo);
  std::cout << r.to_text();
  maybe_json_out(c, r.to_json());
  return kExitOk;
}

int cmd_export(const Common& c, const std::string& checkpoint, const std::string& out) {
  if (checkpoint.empty() || out.empty()) throw UsageError("--checkpoint and --out are required");
  const ModelConfig cfg = resolve_config(c, "toy-3s32");
  echo_config(cfg);
  Model m = build_model(cfg, c.seed);
  load_weights(m, checkpoint);
  save_weights(m, out);
  std::cout << "wrote " << m.parameters().size() + m.buffers().size() << " tensors ("
            << m.num_parameters() << " parameters) to " << out << "\n";
  maybe_json_out(c, {{"out", out}, {"tensors", m.parameters().size() + m.buffers().size()},
                     {"parameters", m.num_parameters()}, {"config_hash", cfg.hash()}});
  return kExitOk;
}

int cmd_metrics(const Common& c, const std::string& pred_path, const std::string& gt_path, double thr) {
  if (pred_path.empty() || gt_path.empty()) throw UsageError("--pred and --gt are required");
  const AnnotationSet pred = AnnotationSet::load(pred_path);
  const AnnotationSet gt = AnnotationSet::load(gt_path);
  std::cout << "config " << json{{"pred", pred_path}, {"gt", gt_path}, {"threshold", thr}}.dump() << "\n";
  if (pred.images.size() != gt.images.size()) throw UsageError("prediction and ground-truth image counts differ");
  std::vector<PoseAnnotation> flat_pred, flat_gt;
  std::vector<ImagePoses> per_image;
  for (size_t i = 0; i < gt.images.size(); ++i) {
    if (pred.images[i].name != gt.images[i].name) {
      throw UsageError("image " + std::to_string(i) + " is \"" + pred.images[i].name + "\" vs \"" +
                       gt.images[i].name + "\"");
    }
    per_image.push_back({gt.images[i].poses, pred.images[i].poses});
    if (pred.images[i].poses.size() == gt.images[i].poses.size()) {
      flat_pred.insert(flat_pred.end(), pred.images[i].poses.begin(), pred.images[i].poses.end());
      flat_gt.insert(flat_gt.end(), gt.images[i].poses.begin(), gt.images[i].poses.end());
    }
  }
  json j;
  if (!flat_gt.empty()) {
    std::vector<JointGroup> groups;
    PckhReport p = pckh(flat_pred, flat_gt, thr, groups);
    std::cout << p.to_text();
    j["pckh"] = p.to_json();
  }
  const size_t k = gt.images.empty() || gt.images[0].poses.empty() ? 0 : gt.images[0].poses[0].joints.size();
  if (k == 17) {
    ApReport ap = ap_over_oks(per_image, coco_oks_constants());
    std::printf("AP %.4f  AR %.4f\n", ap.ap, ap.ar);
    j["oks"] = ap.to_json();
  }
  maybe_json_out(c, j);
  return kExitOk;
}

}  // namespace
}  // namespace lapx

int main(int argc, char** argv) {
  using namespace lapx;
  CLI::App app{"lapx: lightweight hourglass pose estimation toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Common c;
  std::optional<uint64_t> seed;
  app.add_option("--seed", seed, "RNG seed (default: $LAPX_SEED or 0)");
  app.add_option("--json-out", c.json_out, "also write the report as JSON to this path");

  auto model_opts = [&](CLI::App* sub) {
    sub->add_option("--config", c.config_path, "model config JSON");
    sub->add_option("--preset", c.preset_name, "built-in preset name");
  };

  std::string input;
  auto* summary = app.add_subcommand("summary", "per-layer parameters and MACs");
  model_opts(summary);
  summary->add_option("--input", input, "input size HxW (default: config input)");

  ToyData data;
  TrainOptions topt;
  std::string train_cfg, out_dir;
  bool quiet = false;
  auto* train = app.add_subcommand("train-toy", "train on synthetic stick figures");
  model_opts(train);
  train->add_option("--epochs", topt.epochs, "training epochs")->capture_default_str();
  train->add_option("--batch", topt.batch_size, "batch size")->capture_default_str();
  train->add_option("--train-samples", data.train)->capture_default_str();
  train->add_option("--val-samples", data.val)->capture_default_str();
  train->add_option("--data-seed", data.data_seed, "synthetic dataset seed")->capture_default_str();
  train->add_option("--train-config", train_cfg, "training options JSON");
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_flag("--quiet", quiet, "no per-epoch lines");

  std::string checkpoint, dump;
  EvalOptions eo;
  auto* eval = app.add_subcommand("eval", "PCKh of a checkpoint on the synthetic validation set");
  model_opts(eval);
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--val-samples", data.val)->capture_default_str();
  eval->add_option("--data-seed", data.data_seed)->capture_default_str();
  eval->add_flag("--flip-test", eo.flip_test, "average with the mirrored input");
  eval->add_flag("--heatmap-shift", eo.heatmap_shift, "shift the mirrored heatmaps one pixel");
  eval->add_flag("--quarter-offset", eo.quarter_offset, "quarter-pixel refinement toward the larger neighbour");
  eval->add_option("--dump-heatmaps", dump, "write every stage's heatmaps to a tensor file");

  BenchOptions bo;
  std::string bench_input;
  auto* bench = app.add_subcommand("bench", "forward latency");
  model_opts(bench);
  bench->add_option("--checkpoint", checkpoint, "weights (default: random init)");
  bench->add_option("--input", bench_input, "input size HxW (default: config input)");
  bench->add_option("--warmup", bo.warmup)->capture_default_str();
  bench->add_option("--iters", bo.iters)->capture_default_str();
  bench->add_option("--threads", bo.threads)->capture_default_str();
  bench->add_option("--batch", bo.batch)->capture_default_str();

  std::string export_out;
  auto* exp = app.add_subcommand("export", "write weights (without optimizer state)");
  model_opts(exp);
  exp->add_option("--checkpoint", checkpoint)->required();
  exp->add_option("--out", export_out)->required();

  std::string pred_path, gt_path;
  double thr = 0.5;
  auto* metrics = app.add_subcommand("metrics", "PCKh / OKS AP of prediction files");
  metrics->add_option("--pred", pred_path)->required();
  metrics->add_option("--gt", gt_path)->required();
  metrics->add_option("--threshold", thr, "PCKh threshold")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    c.seed = seed ? *seed : default_seed();
    if (summary->parsed()) return cmd_summary(c, input);
    if (train->parsed()) return cmd_train_toy(c, data, topt, train_cfg, out_dir, quiet);
    if (eval->parsed()) return cmd_eval(c, data, checkpoint, eo, dump);
    if (bench->parsed()) return cmd_bench(c, checkpoint, bench_input, bo);
    if (exp->parsed()) return cmd_export(c, checkpoint, export_out);
    if (metrics->parsed()) return cmd_metrics(c, pred_path, gt_path, thr);
  } catch (const NumericError& e) {
    std::cerr << "lapx: numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "lapx: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
