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
#include <span>
#include <vector>

#include "lapx/autograd.hpp"

namespace lapx {

struct GradCheckOptions {
  double eps = 1e-3;
  uint32_t seed = 0;
  // Probe at most this many coordinates per tensor (evenly strided); 0 = all.
  int64_t max_coords_per_tensor = 0;
  // Drop coordinates whose one-sided differences disagree by more than
  // kink_tolerance (a relu or max-pool switch inside the probe window).
  bool skip_kinks = true;
  double kink_tolerance = 2e-3;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  int64_t probed = 0;
  int64_t skipped = 0;
};

// Builds the graph from the given input Vars (and any parameters the closure
// binds) and returns its output.
using GraphFn = std::function<Var(std::span<const Var>)>;

// Compares reverse-mode gradients of a random projection of fn's output with
// central differences, over every coordinate of `inputs` and `params`.
// Error per coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
GradCheckResult finite_diff_check(const GraphFn& fn, std::vector<Tensor> inputs,
                                  std::span<ParamTensor* const> params = {},
                                  const GradCheckOptions& opt = {});

}  // namespace lapx
