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
#include <deque>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lapx/attention.hpp"
#include "lapx/autograd.hpp"
#include "lapx/ops.hpp"
#include "lapx/tensor_file.hpp"

namespace lapx {

struct ModelConfig {
  std::string name = "custom";
  int num_stages = 3;
  int channels = 208;
  int num_keypoints = 16;
  int input_h = 256;
  int input_w = 256;
  int num_pool_levels = 4;
  int blocks_per_level = 1;       // encoder blocks per resolution
  int skip_blocks_per_level = 1;  // blocks on each skip branch
  int neck_blocks = 1;            // blocks at the lowest resolution
  // 1-based. Unset means {1,3} restricted to the available stages.
  std::optional<std::vector<int>> nonlocal_stages;
  bool use_eca_cbam = true;
  bool use_stem_eca_cbam = true;
  bool use_soft_gate = true;
  bool use_output_projection = true;  // 1x1 conv-BN-ReLU before the head
  double heatmap_sigma = 2.0;         // heatmap pixels

  int heatmap_h() const { return input_h / 4; }
  int heatmap_w() const { return input_w / 4; }
  std::vector<int> resolved_nonlocal_stages() const;
  bool has_nonlocal(int stage) const;

  // Throws ConfigError naming the first violated constraint.
  void validate() const;

  nlohmann::json to_json() const;
  // Unknown keys and wrong types are ConfigErrors; missing keys keep defaults.
  static ModelConfig from_json(const nlohmann::json& j);
  static ModelConfig load(const std::string& path);
  // Stable 16-hex-digit digest of to_json().
  std::string hash() const;
};

std::vector<std::string> preset_names();
// Throws ConfigError for unknown names.
ModelConfig preset(const std::string& name);

struct ConvParams {
  ParamTensor weight;
  ParamTensor bias;  // empty when has_bias is false
  Conv2dOptions opt;
  bool has_bias = false;

  static ConvParams create(const std::string& name, int cin, int cout, int k,
                           Conv2dOptions opt, bool bias, std::mt19937& rng,
                           float std_override = 0.0f);
};

struct BatchNormParams {
  ParamTensor gamma;
  ParamTensor beta;
  ParamTensor running_mean;  // buffer
  ParamTensor running_var;   // buffer

  static BatchNormParams create(const std::string& name, int channels);
};

struct SoftGate {
  ParamTensor alpha;  // (1,C,1,1), starts at 1

  static SoftGate create(const std::string& name, int channels);
};

struct ResidualBlockParams {
  ConvParams dw;
  BatchNormParams bn1;
  ConvParams pw;
  BatchNormParams bn2;
  SoftGate gate;
  bool soft_gate = true;

  static ResidualBlockParams create(const std::string& name, int channels,
                                    bool soft_gate, std::mt19937& rng);
};

Var apply_conv(const Var& x, ConvParams& p);
Var apply_batchnorm(const Var& x, BatchNormParams& p, BnMode mode);
Var soft_gated_residual(const Var& x, const Var& block_output, SoftGate& gate);
Var residual_block(const Var& x, ResidualBlockParams& p, BnMode mode);

enum class LayerKind {
  kConv,
  kBatchNorm,
  kRelu,
  kMaxPool,
  kUpsample,
  kAdd,
  kResidualBlock,
  kEcaCbam,
  kEcaNonLocal,
};

const char* layer_kind_name(LayerKind k);

// One node of the layer graph. Inputs are layer ids; kImage marks the network
// input. `out` is the per-sample output shape (n = 1).
struct Layer {
  static constexpr int kImage = -1;
  std::string name;
  LayerKind kind;
  std::vector<int> inputs;
  int slot = -1;  // index into the store matching `kind`
  Shape out;
  int stage = 0;          // 0 = stem, 1..S = hourglass stages
  Conv2dOptions conv{};   // geometry of kConv layers
  int kernel = 0;         // square kernel extent of kConv layers
};

struct StageInfo {
  int input = Layer::kImage;  // layer whose output feeds this stage
  int begin = 0;              // [begin, end) layer range
  int end = 0;
  int features = -1;          // feature output (next stage input)
  int heatmaps = -1;
};

struct StageOutput {
  Var features;
  Var heatmaps;
};

class Model {
 public:
  Model();
  ~Model();
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;

  const ModelConfig& config() const;
  const std::vector<Layer>& layers() const;
  const std::vector<StageInfo>& stages() const;  // [0] is the stem

  // Learnable tensors in registration order.
  const std::vector<ParamTensor*>& parameters() const;
  // Running statistics: saved with the weights, never counted as parameters.
  const std::vector<ParamTensor*>& buffers() const;
  std::vector<ParamTensor*> layer_parameters(int layer) const;
  std::vector<ParamTensor*> layer_buffers(int layer) const;
  ParamTensor* find(const std::string& name) const;
  int64_t num_parameters() const;

  // Non-Local modules of a 1-based stage (empty when the stage has none).
  std::vector<NonLocalParams*> nonlocal_modules(int stage) const;
  // Every Non-Local gamma, ordered by stage.
  std::vector<ParamTensor*> gammas() const;

  // One heatmap Var per stage, each (N,K,H/4,W/4).
  std::vector<Var> forward(const Var& images, BnMode mode);
  std::vector<Var> forward(const Tensor& images, BnMode mode);
  // Runs 1-based stage `stage` on features f of dims (N,C,H/4,W/4).
  StageOutput hourglass_forward(const Var& f, int stage, BnMode mode);
  Var stem_forward(const Var& images, BnMode mode);

  // Evaluates one layer from its input values.
  Var run_layer(int id, std::span<const Var> in, BnMode mode);

  void zero_grad();

  struct Impl;

 private:
  friend Model build_model(const ModelConfig& cfg, uint64_t seed);
  std::unique_ptr<Impl> impl_;
};

Model build_model(const ModelConfig& cfg, uint64_t seed);

// Parameters and running statistics, in registration order.
std::vector<NamedTensor> weight_tensors(const Model& m);
void save_weights(const Model& m, const std::string& path);
// Validates every tensor before touching the model. Extra tensors in the file
// are ignored so checkpoints with optimizer state load as weights.
void load_weights(Model& m, const std::string& path);

}  // namespace lapx
