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

#include "lapx/analysis.hpp"

#include <sys/utsname.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/Core>

#include "lapx/errors.hpp"

namespace lapx {

using nlohmann::json;

std::vector<Shape> layer_shapes(const Model& m, int input_h, int input_w) {
  if (input_h <= 0 || input_w <= 0) throw ShapeError("input dims must be positive");
  const auto& layers = m.layers();
  std::vector<Shape> out(layers.size());
  const Shape image{1, 3, input_h, input_w};
  auto in_shape = [&](int id) { return id == Layer::kImage ? image : out[id]; };
  auto where = [&](const Layer& l) {
    return "input " + std::to_string(input_h) + "x" + std::to_string(input_w) + " at " + l.name;
  };
  for (size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    const Shape s = in_shape(l.inputs[0]);
    switch (l.kind) {
      case LayerKind::kConv: {
        const int k = l.kernel;
        const int pad = l.conv.pad;
        if (s.h + 2 * pad < k || s.w + 2 * pad < k) throw ShapeError(where(l) + " is too small");
        out[i] = Shape{1, l.out.c, conv_out_extent(s.h, k, l.conv.stride, pad),
                       conv_out_extent(s.w, k, l.conv.stride, pad)};
        break;
      }
      case LayerKind::kMaxPool:
        if (s.h % 2 != 0 || s.w % 2 != 0) throw ShapeError(where(l) + " does not pool evenly");
        out[i] = Shape{1, s.c, s.h / 2, s.w / 2};
        break;
      case LayerKind::kUpsample:
        out[i] = Shape{1, s.c, s.h * 2, s.w * 2};
        break;
      case LayerKind::kAdd:
        if (in_shape(l.inputs[1]) != s) throw ShapeError(where(l) + " mismatches operands");
        out[i] = s;
        break;
      default:
        out[i] = s;
    }
  }
  return out;
}

int64_t conv_macs(int cin, int cout, int k, int groups, int hout, int wout) {
  return static_cast<int64_t>(cout) * hout * wout * (cin / groups) * k * k;
}

namespace {

// Multiply-accumulates and element ops of one layer for a single sample.
void layer_costs(const Layer& l, const Shape& in, const Shape& out, bool has_bias,
                 LayerRow& row) {
  const int64_t n_out = out.numel();
  const int64_t hw = static_cast<int64_t>(out.h) * out.w;
  const int64_t c = out.c;
  auto eca = [&] {
    row.macs += 2 * c * kEcaKernel;           // shared 1-D kernel on both descriptors
    row.element_ops += 2 * in.numel() + c + n_out;  // pools, sigmoid, channel gate
  };
  switch (l.kind) {
    case LayerKind::kConv:
      row.macs = conv_macs(in.c, out.c, l.kernel, l.conv.groups, out.h, out.w);
      if (has_bias) row.element_ops = n_out;
      break;
    case LayerKind::kBatchNorm: row.element_ops = 2 * n_out; break;
    case LayerKind::kRelu: row.element_ops = n_out; break;
    case LayerKind::kMaxPool: row.element_ops = in.numel(); break;
    case LayerKind::kUpsample: row.element_ops = n_out; break;
    case LayerKind::kAdd: row.element_ops = n_out; break;
    case LayerKind::kResidualBlock:
      row.macs = c * hw * 9 + c * c * hw;
      row.element_ops = 2 * 2 * n_out + 2 * n_out + 2 * n_out;  // 2 BN, 2 ReLU, gate + add
      break;
    case LayerKind::kEcaCbam:
      eca();
      row.macs += 2 * kCbamKernel * kCbamKernel * hw;
      row.element_ops += 2 * n_out + hw + n_out;  // channel stats, sigmoid, spatial gate
      break;
    case LayerKind::kEcaNonLocal: {
      eca();
      const int64_t ci = c / 8;
      row.macs += 3 * ci * c * hw + c * ci * hw + 2 * hw * hw * ci;
      row.element_ops += 3 * hw * hw + 2 * n_out;  // softmax, gamma scale, residual add
      break;
    }
  }
}

EfficiencyReport base_report(const Model& m, int input_h, int input_w,
                             const std::vector<Shape>& shapes) {
  EfficiencyReport r;
  r.config_name = m.config().name;
  r.config_hash = m.config().hash();
  r.input_h = input_h;
  r.input_w = input_w;
  const auto& layers = m.layers();
  for (size_t i = 0; i < layers.size(); ++i) {
    LayerRow row;
    row.name = layers[i].name;
    row.kind = layer_kind_name(layers[i].kind);
    for (const ParamTensor* p : m.layer_parameters(static_cast<int>(i))) row.params += p->numel();
    row.output = shapes[i];
    row.activation_bytes = shapes[i].numel() * 4;
    r.rows.push_back(std::move(row));
  }
  return r;
}

void total(EfficiencyReport& r) {
  r.total_params = r.total_macs = r.total_element_ops = r.total_activation_bytes = 0;
  for (const LayerRow& row : r.rows) {
    r.total_params += row.params;
    r.total_macs += row.macs;
    r.total_element_ops += row.element_ops;
    r.total_activation_bytes += row.activation_bytes;
  }
}

}  // namespace

EfficiencyReport count_params(const Model& m) {
  std::vector<Shape> shapes;
  for (const Layer& l : m.layers()) shapes.push_back(l.out);
  EfficiencyReport r = base_report(m, m.config().input_h, m.config().input_w, shapes);
  total(r);
  return r;
}

EfficiencyReport count_flops(const Model& m, int input_h, int input_w) {
  const auto shapes = layer_shapes(m, input_h, input_w);
  EfficiencyReport r = base_report(m, input_h, input_w, shapes);
  const auto& layers = m.layers();
  for (size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    const Shape in =
        l.inputs[0] == Layer::kImage ? Shape{1, 3, input_h, input_w} : shapes[l.inputs[0]];
    layer_costs(l, in, shapes[i], m.layer_parameters(static_cast<int>(i)).size() > 1, r.rows[i]);
  }
  total(r);
  return r;
}

json EfficiencyReport::to_json() const {
  json rows_j = json::array();
  for (const LayerRow& r : rows) {
    rows_j.push_back({{"name", r.name},
                      {"kind", r.kind},
                      {"params", r.params},
                      {"macs", r.macs},
                      {"element_ops", r.element_ops},
                      {"output_dims", {r.output.c, r.output.h, r.output.w}},
                      {"activation_bytes", r.activation_bytes}});
  }
  return {{"config", config_name},
          {"config_hash", config_hash},
          {"input_dims", {batch, 3, input_h, input_w}},
          {"rows", rows_j},
          {"totals",
           {{"params", total_params},
            {"macs", total_macs},
            {"flops_2x_macs", flops()},
            {"element_ops", total_element_ops},
            {"activation_bytes", total_activation_bytes}}}};
}

std::string EfficiencyReport::to_text() const {
  size_t name_w = 5;
  for (const LayerRow& r : rows) name_w = std::max(name_w, r.name.size());
  std::ostringstream os;
  os << "config " << config_name << " (" << config_hash << "), input " << batch << "x3x"
     << input_h << "x" << input_w << "\n";
  os << std::left << std::setw(static_cast<int>(name_w) + 2) << "layer" << std::setw(16) << "kind"
     << std::right << std::setw(12) << "params" << std::setw(16) << "macs" << std::setw(14)
     << "elem_ops" << std::setw(18) << "output" << std::setw(14) << "act_bytes" << "\n";
  for (const LayerRow& r : rows) {
    std::ostringstream dims;
    dims << r.output.c << "x" << r.output.h << "x" << r.output.w;
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << r.name << std::setw(16)
       << r.kind << std::right << std::setw(12) << r.params << std::setw(16) << r.macs
       << std::setw(14) << r.element_ops << std::setw(18) << dims.str() << std::setw(14)
       << r.activation_bytes << "\n";
  }
  os << std::fixed << std::setprecision(3);
  os << "totals: params " << total_params << " (" << total_params / 1e6 << "M), MACs "
     << total_macs << " (" << total_macs / 1e9 << "G), FLOPs(2xMAC) " << flops() << " ("
     << flops() / 1e9 << "G), element ops " << total_element_ops << ", activation bytes "
     << total_activation_bytes << "\n";
  return os.str();
}

int64_t peak_live_bytes(int64_t input_bytes, const std::vector<LivenessNode>& nodes,
                        const std::vector<int>& order_in) {
  const int n = static_cast<int>(nodes.size());
  std::vector<int> order = order_in;
  if (order.empty()) {
    order.resize(n);
    std::iota(order.begin(), order.end(), 0);
  }
  if (static_cast<int>(order.size()) != n) throw Error("order must list every node once");
  std::vector<int> pos(n, -1);
  for (int i = 0; i < n; ++i) {
    if (order[i] < 0 || order[i] >= n || pos[order[i]] != -1) {
      throw Error("order must be a permutation of node ids");
    }
    pos[order[i]] = i;
  }
  // Slot n stands for the graph input.
  std::vector<int> last(n + 1, -1);
  auto slot = [n](int id) { return id < 0 ? n : id; };
  for (int id = 0; id < n; ++id) {
    for (int in : nodes[id].inputs) {
      if (in >= 0 && pos[in] >= pos[id]) throw Error("order runs a node before its input");
      last[slot(in)] = std::max(last[slot(in)], pos[id]);
    }
  }
  auto bytes = [&](int s) { return s == n ? input_bytes : nodes[s].bytes; };
  int64_t live = input_bytes;
  int64_t peak = live;
  for (int step = 0; step < n; ++step) {
    const int id = order[step];
    live += nodes[id].bytes;
    peak = std::max(peak, live);
    for (int in : nodes[id].inputs) {
      const int s = slot(in);
      if (last[s] == step && (s == n || !nodes[s].keep)) {
        live -= bytes(s);
        last[s] = -2;  // an input listed twice is freed once
      }
    }
    if (last[id] == -1 && !nodes[id].keep) live -= nodes[id].bytes;
  }
  return peak;
}

int64_t activation_footprint(const Model& m, int input_h, int input_w, int batch,
                             const std::vector<int>& order) {
  const auto shapes = layer_shapes(m, input_h, input_w);
  const auto& layers = m.layers();
  const int64_t elem = 4 * static_cast<int64_t>(batch);
  std::vector<LivenessNode> nodes(layers.size());
  for (size_t i = 0; i < layers.size(); ++i) {
    nodes[i].inputs = layers[i].inputs;
    nodes[i].bytes = shapes[i].numel() * elem;
  }
  // Stage heatmaps are returned to the caller and stay alive.
  for (size_t s = 1; s < m.stages().size(); ++s) nodes[m.stages()[s].heatmaps].keep = true;
  const int64_t peak =
      peak_live_bytes(Shape{1, 3, input_h, input_w}.numel() * elem, nodes, order);
  int64_t weights = 0;
  for (const auto* list : {&m.parameters(), &m.buffers()}) {
    for (const ParamTensor* p : *list) weights += p->numel() * 4;
  }
  return peak + weights;
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw Error("percentile of an empty sample");
  std::sort(v.begin(), v.end());
  const double rank = std::ceil(q / 100.0 * static_cast<double>(v.size()));
  const size_t idx = static_cast<size_t>(std::clamp(rank, 1.0, static_cast<double>(v.size()))) - 1;
  return v[idx];
}

BenchReport make_bench_report(std::vector<double> iter_ms, int warmup) {
  if (iter_ms.empty()) throw ConfigError("bench needs at least one timed iteration");
  BenchReport r;
  r.warmup_iters = warmup;
  r.timed_iters = static_cast<int>(iter_ms.size());
  r.mean_ms = std::accumulate(iter_ms.begin(), iter_ms.end(), 0.0) / iter_ms.size();
  r.p50_ms = percentile(iter_ms, 50);
  r.p95_ms = percentile(iter_ms, 95);
  r.fps = 1000.0 / r.mean_ms;
  r.fps_tta = r.fps / 2.0;
  r.iter_ms = std::move(iter_ms);
  return r;
}

std::string host_descriptor() {
  std::string cpu = "unknown cpu";
  std::ifstream f("/proc/cpuinfo");
  for (std::string line; std::getline(f, line);) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) cpu = line.substr(colon + 2);
      break;
    }
  }
  utsname u{};
  std::string os = "unknown os";
  if (uname(&u) == 0) os = std::string(u.sysname) + " " + u.release + " " + u.machine;
  return cpu + "; " + os;
}

namespace {
std::atomic<bool> g_bench_running{false};
}  // namespace

BenchLock::BenchLock() {
  bool expected = false;
  if (!g_bench_running.compare_exchange_strong(expected, true)) {
    throw Error("another benchmark is already running in this process");
  }
}

BenchLock::~BenchLock() { g_bench_running = false; }

BenchReport bench_latency(Model& m, int input_h, int input_w, const BenchOptions& opt) {
  if (opt.iters < 1) throw ConfigError("bench iters must be >= 1");
  if (opt.warmup < 0) throw ConfigError("bench warmup must be >= 0");
  if (opt.threads < 1) throw ConfigError("bench threads must be >= 1");
  if (opt.batch < 1) throw ConfigError("bench batch must be >= 1");
  BenchLock lock;
  const int prev_threads = Eigen::nbThreads();
  Eigen::setNbThreads(opt.threads);

  layer_shapes(m, input_h, input_w);  // validates the input size
  std::mt19937 rng(static_cast<uint32_t>(opt.seed));
  const Tensor input = rand_uniform(Shape{opt.batch, 3, input_h, input_w}, rng, 0.0f, 1.0f);
  NoGradGuard no_grad;
  auto run = [&] {
    auto out = m.forward(input, BnMode::kEval);
    return out.back().value()[0];
  };
  volatile float sink = 0.0f;
  for (int i = 0; i < opt.warmup; ++i) sink = run();
  std::vector<double> times;
  times.reserve(opt.iters);
  for (int i = 0; i < opt.iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    sink = run();
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  (void)sink;
  Eigen::setNbThreads(prev_threads);

  BenchReport r = make_bench_report(std::move(times), opt.warmup);
  r.threads = opt.threads;
  r.batch = opt.batch;
  r.input_h = input_h;
  r.input_w = input_w;
  r.peak_activation_bytes = activation_footprint(m, input_h, input_w, opt.batch);
  r.host = host_descriptor();
  return r;
}

json BenchReport::to_json() const {
  return {{"warmup_iters", warmup_iters},
          {"timed_iters", timed_iters},
          {"iter_ms", iter_ms},
          {"mean_ms", mean_ms},
          {"p50_ms", p50_ms},
          {"p95_ms", p95_ms},
          {"fps", fps},
          {"fps_tta", fps_tta},
          {"peak_activation_bytes", peak_activation_bytes},
          {"threads", threads},
          {"batch", batch},
          {"input_dims", {batch, 3, input_h, input_w}},
          {"host", host}};
}

std::string BenchReport::to_text() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << "host          " << host << "\n"
     << "input         " << batch << "x3x" << input_h << "x" << input_w << "\n"
     << "threads       " << threads << "\n"
     << "warmup/timed  " << warmup_iters << "/" << timed_iters << "\n"
     << "mean ms       " << mean_ms << "\n"
     << "p50 ms        " << p50_ms << "\n"
     << "p95 ms        " << p95_ms << "\n"
     << "fps           " << fps << "\n"
     << "fps (tta)     " << fps_tta << "\n"
     << "peak bytes    " << peak_activation_bytes << "\n";
  return os.str();
}

}  // namespace lapx
