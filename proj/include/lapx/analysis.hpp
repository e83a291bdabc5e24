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
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lapx/model.hpp"

namespace lapx {

struct LayerRow {
  std::string name;
  std::string kind;
  int64_t params = 0;
  int64_t macs = 0;
  int64_t element_ops = 0;  // normalisation, activation, pooling, gates
  Shape output;
  int64_t activation_bytes = 0;
};

struct EfficiencyReport {
  std::string config_name;
  std::string config_hash;
  int batch = 1;
  int input_h = 0;
  int input_w = 0;
  std::vector<LayerRow> rows;
  int64_t total_params = 0;
  int64_t total_macs = 0;
  int64_t total_element_ops = 0;
  int64_t total_activation_bytes = 0;

  int64_t flops() const { return 2 * total_macs; }
  nlohmann::json to_json() const;
  std::string to_text() const;
};

// Cout * Hout * Wout * (Cin / groups) * k * k.
int64_t conv_macs(int cin, int cout, int k, int groups, int hout, int wout);

// Per-sample output shapes of every layer for an arbitrary input size; throws
// ShapeError when the size does not pool evenly.
std::vector<Shape> layer_shapes(const Model& m, int input_h, int input_w);

EfficiencyReport count_params(const Model& m);
// Parameters plus MACs and element ops for a batch of one at input_h x input_w.
EfficiencyReport count_flops(const Model& m, int input_h, int input_w);

struct LivenessNode {
  std::vector<int> inputs;  // node ids; -1 is the graph input
  int64_t bytes = 0;
  bool keep = false;        // graph output, never freed
};

// Greedy schedule over `nodes` in the given order (empty = index order): a
// node's output is allocated when it runs and freed after its last consumer.
// Returns the peak of the live set including the graph input.
int64_t peak_live_bytes(int64_t input_bytes, const std::vector<LivenessNode>& nodes,
                        const std::vector<int>& order = {});

// Peak live activation bytes (4 bytes per element) under a greedy schedule
// that frees a value after its last consumer, plus parameter and buffer
// bytes. `order` is a dependency-respecting permutation of layer ids; empty
// means construction order.
int64_t activation_footprint(const Model& m, int input_h, int input_w, int batch = 1,
                             const std::vector<int>& order = {});

struct BenchOptions {
  int warmup = 3;
  int iters = 20;
  int threads = 1;
  int batch = 1;
  uint64_t seed = 0;
};

struct BenchReport {
  int warmup_iters = 0;
  int timed_iters = 0;
  std::vector<double> iter_ms;
  double mean_ms = 0;
  double p50_ms = 0;
  double p95_ms = 0;
  double fps = 0;
  double fps_tta = 0;
  int64_t peak_activation_bytes = 0;
  int threads = 1;
  int batch = 1;
  int input_h = 0;
  int input_w = 0;
  std::string host;

  nlohmann::json to_json() const;
  std::string to_text() const;
};

// Process-wide benchmark ownership; a second live lock throws Error.
class BenchLock {
 public:
  BenchLock();
  ~BenchLock();
  BenchLock(const BenchLock&) = delete;
  BenchLock& operator=(const BenchLock&) = delete;
};

// Nearest-rank percentile of an unsorted sample, q in [0,100].
double percentile(std::vector<double> v, double q);

BenchReport make_bench_report(std::vector<double> iter_ms, int warmup);

// Times eval-mode forwards on a fixed random input. Throws ConfigError when
// iters < 1 and Error when another benchmark is running in this process.
BenchReport bench_latency(Model& m, int input_h, int input_w, const BenchOptions& opt);

std::string host_descriptor();

}  // namespace lapx
