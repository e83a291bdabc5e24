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

#include "lapx/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "lapx/errors.hpp"
#include "lapx/tensor_file.hpp"

namespace lapx {

using nlohmann::json;

// ---------------------------------------------------------------- config

std::vector<int> ModelConfig::resolved_nonlocal_stages() const {
  if (nonlocal_stages) {
    std::vector<int> s = *nonlocal_stages;
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    return s;
  }
  std::vector<int> s;
  for (int v : {1, 3}) {
    if (v <= num_stages) s.push_back(v);
  }
  return s;
}

bool ModelConfig::has_nonlocal(int stage) const {
  const auto s = resolved_nonlocal_stages();
  return std::find(s.begin(), s.end(), stage) != s.end();
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (num_stages < 1) fail("num_stages must be >= 1");
  if (channels < 2 || channels % 2 != 0) {
    fail("channels must be a positive even number (the stem halves it), got " +
         std::to_string(channels));
  }
  if (num_keypoints < 1) fail("num_keypoints must be >= 1");
  if (input_h <= 0 || input_w <= 0 || input_h % 4 != 0 || input_w % 4 != 0) {
    fail("input_hw must be positive and divisible by 4, got " + std::to_string(input_h) +
         "x" + std::to_string(input_w));
  }
  if (num_pool_levels < 0 || num_pool_levels > 16) fail("num_pool_levels must be in [0,16]");
  const int div = 1 << num_pool_levels;
  if (heatmap_h() % div != 0 || heatmap_w() % div != 0) {
    fail("input_hw/4 must be divisible by 2^num_pool_levels (" + std::to_string(div) +
         ") so every pooling level halves evenly, got " + std::to_string(heatmap_h()) + "x" +
         std::to_string(heatmap_w()));
  }
  if (blocks_per_level < 0 || skip_blocks_per_level < 0 || neck_blocks < 0) {
    fail("block counts must be >= 0");
  }
  if (nonlocal_stages) {
    for (int s : *nonlocal_stages) {
      if (s < 1 || s > num_stages) {
        fail("nonlocal_stages entry " + std::to_string(s) + " is outside 1.." +
             std::to_string(num_stages));
      }
    }
  }
  if (!resolved_nonlocal_stages().empty() && channels % 8 != 0) {
    fail("channels must be divisible by 8 when Non-Local is enabled (C/8 projection), got " +
         std::to_string(channels));
  }
  if (!(heatmap_sigma > 0.0) || !std::isfinite(heatmap_sigma)) {
    fail("heatmap_sigma must be positive");
  }
}

json ModelConfig::to_json() const {
  json j;
  j["name"] = name;
  j["num_stages"] = num_stages;
  j["channels"] = channels;
  j["num_keypoints"] = num_keypoints;
  j["input_hw"] = {input_h, input_w};
  j["num_pool_levels"] = num_pool_levels;
  j["blocks_per_level"] = blocks_per_level;
  j["skip_blocks_per_level"] = skip_blocks_per_level;
  j["neck_blocks"] = neck_blocks;
  j["nonlocal_stages"] = resolved_nonlocal_stages();
  j["use_eca_cbam"] = use_eca_cbam;
  j["use_stem_eca_cbam"] = use_stem_eca_cbam;
  j["use_soft_gate"] = use_soft_gate;
  j["use_output_projection"] = use_output_projection;
  j["heatmap_sigma"] = heatmap_sigma;
  return j;
}

ModelConfig ModelConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  ModelConfig c;
  if (j.contains("preset")) c = preset(j.at("preset").get<std::string>());
  static const std::set<std::string> known{
      "preset", "name", "num_stages", "channels", "num_keypoints", "input_hw",
      "num_pool_levels", "blocks_per_level", "skip_blocks_per_level", "neck_blocks",
      "nonlocal_stages", "use_eca_cbam", "use_stem_eca_cbam", "use_soft_gate",
      "use_output_projection", "heatmap_sigma"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown model config key '" + key + "'");
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("name", c.name);
    get("num_stages", c.num_stages);
    get("channels", c.channels);
    get("num_keypoints", c.num_keypoints);
    if (j.contains("input_hw")) {
      const auto hw = j.at("input_hw").get<std::vector<int>>();
      if (hw.size() != 2) throw ConfigError("input_hw must be [H, W]");
      c.input_h = hw[0];
      c.input_w = hw[1];
    }
    get("num_pool_levels", c.num_pool_levels);
    get("blocks_per_level", c.blocks_per_level);
    get("skip_blocks_per_level", c.skip_blocks_per_level);
    get("neck_blocks", c.neck_blocks);
    if (j.contains("nonlocal_stages")) {
      c.nonlocal_stages = j.at("nonlocal_stages").get<std::vector<int>>();
    }
    get("use_eca_cbam", c.use_eca_cbam);
    get("use_stem_eca_cbam", c.use_stem_eca_cbam);
    get("use_soft_gate", c.use_soft_gate);
    get("use_output_projection", c.use_output_projection);
    get("heatmap_sigma", c.heatmap_sigma);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

ModelConfig ModelConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError("malformed config file " + path + ": " + e.what());
  }
  return from_json(j.contains("model") ? j.at("model") : j);
}

std::string ModelConfig::hash() const {
  const std::string s = to_json().dump();
  uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

struct PresetRow {
  const char* name;
  int stages, channels, enc, skip, neck;
  std::optional<std::vector<int>> nonlocal;
  int keypoints, hw, levels;
};

const std::vector<PresetRow>& preset_rows() {
  static const std::vector<PresetRow> rows{
      {"lapx-2s256", 2, 256, 2, 1, 3, std::nullopt, 16, 256, 4},
      {"lapx-3s208", 3, 208, 2, 1, 2, std::nullopt, 16, 256, 4},
      {"lapx-4s190", 4, 190, 1, 1, 4, std::vector<int>{}, 16, 256, 4},
      {"lapx-5s160", 5, 160, 2, 1, 1, std::nullopt, 16, 256, 4},
      {"toy-3s32", 3, 32, 1, 1, 1, std::nullopt, 8, 64, 2},
      {"toy-1s56", 1, 56, 1, 1, 2, std::nullopt, 8, 64, 2},
      {"tiny", 1, 8, 1, 1, 1, std::nullopt, 4, 64, 2},
  };
  return rows;
}

}  // namespace

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto& r : preset_rows()) out.emplace_back(r.name);
  return out;
}

ModelConfig preset(const std::string& name) {
  for (const auto& r : preset_rows()) {
    if (name != r.name) continue;
    ModelConfig c;
    c.name = r.name;
    c.num_stages = r.stages;
    c.channels = r.channels;
    c.blocks_per_level = r.enc;
    c.skip_blocks_per_level = r.skip;
    c.neck_blocks = r.neck;
    c.nonlocal_stages = r.nonlocal;
    c.num_keypoints = r.keypoints;
    c.input_h = c.input_w = r.hw;
    c.num_pool_levels = r.levels;
    return c;
  }
  std::string known;
  for (const auto& n : preset_names()) known += " " + n;
  throw ConfigError("unknown preset '" + name + "'; known:" + known);
}

// ---------------------------------------------------------------- blocks

namespace {

ParamTensor make_param(std::string name, Tensor value, std::vector<int> dims,
                       bool trainable = true) {
  ParamTensor p;
  p.name = std::move(name);
  p.value = std::move(value);
  p.dims = std::move(dims);
  p.trainable = trainable;
  return p;
}

Shape channel_shape(int c) { return Shape{1, c, 1, 1}; }

}  // namespace

ConvParams ConvParams::create(const std::string& name, int cin, int cout, int k,
                              Conv2dOptions opt, bool bias, std::mt19937& rng,
                              float std_override) {
  ConvParams p;
  p.opt = opt;
  p.has_bias = bias;
  const int cin_g = cin / opt.groups;
  const float fan_out = static_cast<float>(cout / opt.groups * k * k);
  const float std = std_override > 0.0f ? std_override : std::sqrt(2.0f / fan_out);
  p.weight = make_param(name + ".weight", randn(Shape{cout, cin_g, k, k}, rng, std),
                        {cout, cin_g, k, k});
  if (bias) p.bias = make_param(name + ".bias", Tensor(channel_shape(cout)), {cout});
  return p;
}

BatchNormParams BatchNormParams::create(const std::string& name, int channels) {
  BatchNormParams p;
  p.gamma = make_param(name + ".gamma", Tensor(channel_shape(channels), 1.0f), {channels});
  p.beta = make_param(name + ".beta", Tensor(channel_shape(channels), 0.0f), {channels});
  p.running_mean = make_param(name + ".running_mean", Tensor(channel_shape(channels), 0.0f),
                              {channels}, false);
  p.running_var = make_param(name + ".running_var", Tensor(channel_shape(channels), 1.0f),
                             {channels}, false);
  return p;
}

SoftGate SoftGate::create(const std::string& name, int channels) {
  return SoftGate{make_param(name + ".alpha", Tensor(channel_shape(channels), 1.0f), {channels})};
}

ResidualBlockParams ResidualBlockParams::create(const std::string& name, int channels,
                                                bool soft_gate, std::mt19937& rng) {
  ResidualBlockParams p;
  p.dw = ConvParams::create(name + ".dw", channels, channels, 3, {1, 1, channels}, false, rng);
  p.bn1 = BatchNormParams::create(name + ".bn1", channels);
  p.pw = ConvParams::create(name + ".pw", channels, channels, 1, {}, false, rng);
  p.bn2 = BatchNormParams::create(name + ".bn2", channels);
  p.soft_gate = soft_gate;
  if (soft_gate) p.gate = SoftGate::create(name + ".gate", channels);
  return p;
}

Var apply_conv(const Var& x, ConvParams& p) {
  return conv2d(x, Var::param(p.weight), p.has_bias ? Var::param(p.bias) : Var(), p.opt);
}

Var apply_batchnorm(const Var& x, BatchNormParams& p, BnMode mode) {
  return batchnorm(x, Var::param(p.gamma), Var::param(p.beta), p.running_mean.value,
                   p.running_var.value, {mode, 0.1f, 1e-5f});
}

Var soft_gated_residual(const Var& x, const Var& block_output, SoftGate& gate) {
  if (x.shape() != block_output.shape()) {
    throw ShapeError("soft_gated_residual: " + x.shape().str() + " vs " +
                     block_output.shape().str());
  }
  if (gate.alpha.value.numel() != x.shape().c) {
    throw ShapeError("soft_gated_residual: gate has " +
                     std::to_string(gate.alpha.value.numel()) + " channels, input " +
                     x.shape().str());
  }
  return add(x, mul(block_output, Var::param(gate.alpha)));
}

Var residual_block(const Var& x, ResidualBlockParams& p, BnMode mode) {
  Var f = relu(apply_batchnorm(apply_conv(x, p.dw), p.bn1, mode));
  f = relu(apply_batchnorm(apply_conv(f, p.pw), p.bn2, mode));
  return p.soft_gate ? soft_gated_residual(x, f, p.gate) : add(x, f);
}

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kBatchNorm: return "batchnorm";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kMaxPool: return "maxpool";
    case LayerKind::kUpsample: return "upsample";
    case LayerKind::kAdd: return "add";
    case LayerKind::kResidualBlock: return "residual_block";
    case LayerKind::kEcaCbam: return "eca_cbam";
    case LayerKind::kEcaNonLocal: return "eca_nonlocal";
  }
  return "?";
}

// ---------------------------------------------------------------- model

struct EcaCbamModule {
  EcaParams eca;
  CbamSpatialParams cbam;
};

struct EcaNonLocalModule {
  EcaParams eca;
  NonLocalParams nl;
};

struct Model::Impl {
  ModelConfig cfg;
  std::vector<Layer> layers;
  std::vector<StageInfo> stages;
  std::deque<ConvParams> convs;
  std::deque<BatchNormParams> bns;
  std::deque<ResidualBlockParams> blocks;
  std::deque<EcaCbamModule> eca_cbams;
  std::deque<EcaNonLocalModule> eca_nonlocals;
  std::vector<ParamTensor*> params;
  std::vector<ParamTensor*> buffers;
  std::vector<std::vector<ParamTensor*>> layer_params;
  std::vector<std::vector<ParamTensor*>> layer_buffers;
  std::map<std::string, ParamTensor*> by_name;

  void register_tensor(int layer, ParamTensor& p) {
    if (!by_name.emplace(p.name, &p).second) {
      throw Error("duplicate parameter name " + p.name);
    }
    if (p.trainable) {
      params.push_back(&p);
      layer_params[layer].push_back(&p);
    } else {
      buffers.push_back(&p);
      layer_buffers[layer].push_back(&p);
    }
  }
};

namespace {

class Builder {
 public:
  Builder(Model::Impl& m, std::mt19937& rng) : m_(m), rng_(rng) {}

  Shape shape_of(int id) const {
    const ModelConfig& c = m_.cfg;
    return id == Layer::kImage ? Shape{1, 3, c.input_h, c.input_w} : m_.layers[id].out;
  }

  int add_layer(std::string name, LayerKind kind, std::vector<int> inputs, int slot, Shape out) {
    Layer l;
    l.name = std::move(name);
    l.kind = kind;
    l.inputs = std::move(inputs);
    l.slot = slot;
    l.out = out;
    l.stage = stage_;
    m_.layers.push_back(std::move(l));
    m_.layer_params.emplace_back();
    m_.layer_buffers.emplace_back();
    return static_cast<int>(m_.layers.size()) - 1;
  }

  int conv(const std::string& name, int in, int cout, int k, Conv2dOptions opt, bool bias,
           float std_override = 0.0f) {
    const Shape s = shape_of(in);
    m_.convs.push_back(ConvParams::create(name, s.c, cout, k, opt, bias, rng_, std_override));
    const Shape out{1, cout, conv_out_extent(s.h, k, opt.stride, opt.pad),
                    conv_out_extent(s.w, k, opt.stride, opt.pad)};
    const int id = add_layer(name, LayerKind::kConv, {in},
                             static_cast<int>(m_.convs.size()) - 1, out);
    m_.layers[id].conv = opt;
    m_.layers[id].kernel = k;
    ConvParams& p = m_.convs.back();
    m_.register_tensor(id, p.weight);
    if (bias) m_.register_tensor(id, p.bias);
    return id;
  }

  int bn(const std::string& name, int in) {
    const Shape s = shape_of(in);
    m_.bns.push_back(BatchNormParams::create(name, s.c));
    const int id = add_layer(name, LayerKind::kBatchNorm, {in},
                             static_cast<int>(m_.bns.size()) - 1, s);
    BatchNormParams& p = m_.bns.back();
    m_.register_tensor(id, p.gamma);
    m_.register_tensor(id, p.beta);
    m_.register_tensor(id, p.running_mean);
    m_.register_tensor(id, p.running_var);
    return id;
  }

  int relu(const std::string& name, int in) {
    return add_layer(name, LayerKind::kRelu, {in}, -1, shape_of(in));
  }

  int conv_bn_relu(const std::string& name, int in, int cout, int k, Conv2dOptions opt) {
    int x = conv(name + ".conv", in, cout, k, opt, false);
    x = bn(name + ".bn", x);
    return relu(name + ".relu", x);
  }

  int block(const std::string& name, int in) {
    const Shape s = shape_of(in);
    m_.blocks.push_back(ResidualBlockParams::create(name, s.c, m_.cfg.use_soft_gate, rng_));
    const int id = add_layer(name, LayerKind::kResidualBlock, {in},
                             static_cast<int>(m_.blocks.size()) - 1, s);
    ResidualBlockParams& p = m_.blocks.back();
    for (ParamTensor* t : {&p.dw.weight, &p.bn1.gamma, &p.bn1.beta, &p.bn1.running_mean,
                           &p.bn1.running_var, &p.pw.weight, &p.bn2.gamma, &p.bn2.beta,
                           &p.bn2.running_mean, &p.bn2.running_var}) {
      m_.register_tensor(id, *t);
    }
    if (p.soft_gate) m_.register_tensor(id, p.gate.alpha);
    return id;
  }

  int blocks(const std::string& name, int in, int count) {
    for (int i = 0; i < count; ++i) in = block(name + ".block" + std::to_string(i), in);
    return in;
  }

  int eca_cbam(const std::string& name, int in) {
    m_.eca_cbams.push_back({EcaParams::create(name, rng_), CbamSpatialParams::create(name, rng_)});
    const int id = add_layer(name, LayerKind::kEcaCbam, {in},
                             static_cast<int>(m_.eca_cbams.size()) - 1, shape_of(in));
    m_.register_tensor(id, m_.eca_cbams.back().eca.kernel);
    m_.register_tensor(id, m_.eca_cbams.back().cbam.conv);
    return id;
  }

  int eca_nonlocal(const std::string& name, int in) {
    const Shape s = shape_of(in);
    m_.eca_nonlocals.push_back({EcaParams::create(name, rng_),
                                NonLocalParams::create(name, s.c, rng_)});
    const int id = add_layer(name, LayerKind::kEcaNonLocal, {in},
                             static_cast<int>(m_.eca_nonlocals.size()) - 1, s);
    EcaNonLocalModule& mod = m_.eca_nonlocals.back();
    for (ParamTensor* t : {&mod.eca.kernel, &mod.nl.theta, &mod.nl.phi, &mod.nl.g, &mod.nl.wz,
                           &mod.nl.gamma}) {
      m_.register_tensor(id, *t);
    }
    return id;
  }

  int maxpool(const std::string& name, int in) {
    const Shape s = shape_of(in);
    return add_layer(name, LayerKind::kMaxPool, {in}, -1, Shape{1, s.c, s.h / 2, s.w / 2});
  }

  int upsample(const std::string& name, int in) {
    const Shape s = shape_of(in);
    return add_layer(name, LayerKind::kUpsample, {in}, -1, Shape{1, s.c, s.h * 2, s.w * 2});
  }

  int add(const std::string& name, int a, int b) {
    return add_layer(name, LayerKind::kAdd, {a, b}, -1, shape_of(a));
  }

  void set_stage(int s) { stage_ = s; }

 private:
  Model::Impl& m_;
  std::mt19937& rng_;
  int stage_ = 0;
};

}  // namespace

Model::Model() : impl_(std::make_unique<Impl>()) {}
Model::~Model() = default;
Model::Model(Model&&) noexcept = default;
Model& Model::operator=(Model&&) noexcept = default;

const ModelConfig& Model::config() const { return impl_->cfg; }
const std::vector<Layer>& Model::layers() const { return impl_->layers; }
const std::vector<StageInfo>& Model::stages() const { return impl_->stages; }
const std::vector<ParamTensor*>& Model::parameters() const { return impl_->params; }
const std::vector<ParamTensor*>& Model::buffers() const { return impl_->buffers; }

std::vector<ParamTensor*> Model::layer_parameters(int layer) const {
  return impl_->layer_params.at(layer);
}

std::vector<ParamTensor*> Model::layer_buffers(int layer) const {
  return impl_->layer_buffers.at(layer);
}

ParamTensor* Model::find(const std::string& name) const {
  auto it = impl_->by_name.find(name);
  return it == impl_->by_name.end() ? nullptr : it->second;
}

int64_t Model::num_parameters() const {
  int64_t n = 0;
  for (const ParamTensor* p : impl_->params) n += p->numel();
  return n;
}

std::vector<NonLocalParams*> Model::nonlocal_modules(int stage) const {
  std::vector<NonLocalParams*> out;
  for (const Layer& l : impl_->layers) {
    if (l.kind == LayerKind::kEcaNonLocal && l.stage == stage) {
      out.push_back(&impl_->eca_nonlocals[l.slot].nl);
    }
  }
  return out;
}

std::vector<ParamTensor*> Model::gammas() const {
  std::vector<ParamTensor*> out;
  for (const Layer& l : impl_->layers) {
    if (l.kind == LayerKind::kEcaNonLocal) out.push_back(&impl_->eca_nonlocals[l.slot].nl.gamma);
  }
  return out;
}

void Model::zero_grad() {
  for (ParamTensor* p : impl_->params) p->zero_grad();
}

Var Model::run_layer(int id, std::span<const Var> in, BnMode mode) {
  const Layer& l = impl_->layers.at(id);
  switch (l.kind) {
    case LayerKind::kConv: return apply_conv(in[0], impl_->convs[l.slot]);
    case LayerKind::kBatchNorm: return apply_batchnorm(in[0], impl_->bns[l.slot], mode);
    case LayerKind::kRelu: return relu(in[0]);
    case LayerKind::kMaxPool: return maxpool2x2(in[0]);
    case LayerKind::kUpsample: return upsample_nearest2x(in[0]);
    case LayerKind::kAdd: return add(in[0], in[1]);
    case LayerKind::kResidualBlock: return residual_block(in[0], impl_->blocks[l.slot], mode);
    case LayerKind::kEcaCbam: {
      EcaCbamModule& mod = impl_->eca_cbams[l.slot];
      return lapx::eca_cbam(in[0], mod.eca, mod.cbam);
    }
    case LayerKind::kEcaNonLocal: {
      EcaNonLocalModule& mod = impl_->eca_nonlocals[l.slot];
      return lapx::eca_nonlocal(in[0], mod.eca, mod.nl);
    }
  }
  throw Error("unknown layer kind");
}

namespace {

// Runs layers [begin, end) with `seed_id`'s value given; intermediate values
// are dropped after their last consumer inside the range.
std::vector<Var> run_range(Model& m, int begin, int end, int seed_id, const Var& seed,
                           const std::vector<int>& wanted, BnMode mode) {
  const auto& layers = m.layers();
  std::map<int, Var> live;
  live[seed_id] = seed;
  std::map<int, int> last_use;
  for (int i = begin; i < end; ++i) {
    for (int in : layers[i].inputs) last_use[in] = i;
  }
  for (int w : wanted) last_use[w] = end;
  std::vector<Var> args;
  for (int i = begin; i < end; ++i) {
    args.clear();
    for (int in : layers[i].inputs) {
      auto it = live.find(in);
      if (it == live.end()) {
        throw Error("layer " + layers[i].name + " reads a value outside its stage");
      }
      args.push_back(it->second);
    }
    live[i] = m.run_layer(i, args, mode);
    for (int in : layers[i].inputs) {
      if (last_use[in] == i) live.erase(in);
    }
  }
  std::vector<Var> out;
  for (int w : wanted) out.push_back(live.at(w));
  return out;
}

void check_feature_input(const ModelConfig& c, const Shape& s, const char* what) {
  if (s.c != c.channels || s.h != c.heatmap_h() || s.w != c.heatmap_w()) {
    throw ShapeError(std::string(what) + ": expected (N," + std::to_string(c.channels) + "," +
                     std::to_string(c.heatmap_h()) + "," + std::to_string(c.heatmap_w()) +
                     "), got " + s.str());
  }
}

}  // namespace

Var Model::stem_forward(const Var& images, BnMode mode) {
  const ModelConfig& c = impl_->cfg;
  const Shape s = images.shape();
  if (s.c != 3 || s.h != c.input_h || s.w != c.input_w) {
    throw ShapeError("model_forward: expected images (N,3," + std::to_string(c.input_h) + "," +
                     std::to_string(c.input_w) + "), got " + s.str());
  }
  const StageInfo& st = impl_->stages[0];
  return run_range(*this, st.begin, st.end, Layer::kImage, images, {st.features}, mode)[0];
}

StageOutput Model::hourglass_forward(const Var& f, int stage, BnMode mode) {
  if (stage < 1 || stage > impl_->cfg.num_stages) {
    throw ConfigError("stage index " + std::to_string(stage) + " outside 1.." +
                      std::to_string(impl_->cfg.num_stages));
  }
  check_feature_input(impl_->cfg, f.shape(), "hourglass_forward");
  const StageInfo& st = impl_->stages[stage];
  auto out = run_range(*this, st.begin, st.end, st.input, f, {st.features, st.heatmaps}, mode);
  return {out[0], out[1]};
}

std::vector<Var> Model::forward(const Var& images, BnMode mode) {
  Var f = stem_forward(images, mode);
  std::vector<Var> heatmaps;
  for (int s = 1; s <= impl_->cfg.num_stages; ++s) {
    StageOutput o = hourglass_forward(f, s, mode);
    heatmaps.push_back(o.heatmaps);
    f = o.features;
  }
  return heatmaps;
}

std::vector<Var> Model::forward(const Tensor& images, BnMode mode) {
  return forward(Var::constant(images), mode);
}

Model build_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model model;
  Model::Impl& m = *model.impl_;
  m.cfg = cfg;
  std::mt19937 rng(static_cast<uint32_t>(seed ^ (seed >> 32)));
  Builder b(m, rng);
  const int C = cfg.channels;
  const int K = cfg.num_keypoints;
  const int L = cfg.num_pool_levels;

  StageInfo stem;
  stem.begin = 0;
  int x = b.conv_bn_relu("stem.conv1", Layer::kImage, C / 2, 3, {2, 1, 1});
  x = b.conv(("stem.dw.conv"), x, C / 2, 3, {2, 1, C / 2}, false);
  x = b.relu("stem.dw.relu", b.bn("stem.dw.bn", x));
  x = b.conv_bn_relu("stem.pw", x, C, 1, {});
  if (cfg.use_stem_eca_cbam) x = b.eca_cbam("stem.attn", x);
  stem.end = static_cast<int>(m.layers.size());
  stem.features = x;
  m.stages.push_back(stem);

  for (int s = 1; s <= cfg.num_stages; ++s) {
    b.set_stage(s);
    const std::string p = "stage" + std::to_string(s);
    StageInfo st;
    st.input = x;
    st.begin = static_cast<int>(m.layers.size());
    int h = x;
    std::vector<int> skips;
    for (int l = 0; l < L; ++l) {
      const std::string lp = p + ".down" + std::to_string(l);
      h = b.blocks(lp, h, cfg.blocks_per_level);
      skips.push_back(b.blocks(p + ".skip" + std::to_string(l), h, cfg.skip_blocks_per_level));
      h = b.maxpool(lp + ".pool", h);
    }
    h = b.blocks(p + ".neck", h, cfg.neck_blocks);
    if (cfg.has_nonlocal(s)) h = b.eca_nonlocal(p + ".neck.attn", h);
    for (int l = L - 1; l >= 0; --l) {
      const std::string lp = p + ".up" + std::to_string(l);
      h = b.add(lp + ".add", b.upsample(lp + ".upsample", h), skips[l]);
    }
    if (cfg.use_eca_cbam) h = b.eca_cbam(p + ".top.attn", h);
    if (cfg.use_output_projection) h = b.conv_bn_relu(p + ".proj", h, C, 1, {});
    const int heat = b.conv(p + ".head", h, K, 1, {}, true, 1e-3f);
    st.heatmaps = heat;
    if (s < cfg.num_stages) {
      const int rf = b.conv(p + ".remap_features", h, C, 1, {}, true);
      const int rh = b.conv(p + ".remap_heatmaps", heat, C, 1, {}, true);
      st.features = b.add(p + ".merge_heatmaps", b.add(p + ".merge_features", x, rf), rh);
    } else {
      st.features = h;
    }
    st.end = static_cast<int>(m.layers.size());
    m.stages.push_back(st);
    x = st.features;
  }
  return model;
}

// ---------------------------------------------------------------- weights

std::vector<NamedTensor> weight_tensors(const Model& m) {
  std::vector<NamedTensor> out;
  for (const auto* list : {&m.parameters(), &m.buffers()}) {
    for (const ParamTensor* p : *list) out.push_back({p->name, p->dims, p->value});
  }
  return out;
}

void save_weights(const Model& m, const std::string& path) {
  write_tensor_file(path, weight_tensors(m));
}

void load_weights(Model& m, const std::string& path) {
  std::vector<NamedTensor> file = read_tensor_file(path);
  std::map<std::string, const NamedTensor*> by_name;
  for (const NamedTensor& t : file) {
    if (!by_name.emplace(t.name, &t).second) {
      throw FormatError(path + ": duplicate tensor " + t.name);
    }
  }
  std::vector<std::pair<ParamTensor*, const NamedTensor*>> plan;
  for (const auto* list : {&m.parameters(), &m.buffers()}) {
    for (ParamTensor* p : *list) {
      auto it = by_name.find(p->name);
      if (it == by_name.end()) throw MissingTensorError(p->name);
      if (it->second->dims != p->dims) {
        std::ostringstream os;
        os << "tensor " << p->name << " has dims [";
        for (int d : it->second->dims) os << d << ' ';
        os << "] in file, model expects [";
        for (int d : p->dims) os << d << ' ';
        os << "]";
        throw ShapeError(os.str());
      }
      plan.emplace_back(p, it->second);
    }
  }
  for (auto& [p, t] : plan) {
    std::copy(t->value.data(), t->value.data() + t->value.numel(), p->value.data());
  }
}

}  // namespace lapx
