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

#include "lapx/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "lapx/ops.hpp"

namespace lapx {

namespace {

double projected(const Var& out, const Tensor& weights) {
  double acc = 0.0;
  const Tensor& v = out.value();
  for (int64_t i = 0; i < v.numel(); ++i) {
    acc += static_cast<double>(v[i]) * weights[i];
  }
  return acc;
}

}  // namespace

GradCheckResult finite_diff_check(const GraphFn& fn, std::vector<Tensor> inputs,
                                  std::span<ParamTensor* const> params,
                                  const GradCheckOptions& opt) {
  auto evaluate = [&](const Tensor& weights) {
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const Tensor& t : inputs) vars.push_back(Var::constant(t));
    return projected(fn(vars), weights);
  };

  // Analytic pass.
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(Var::input(t, true));
  for (ParamTensor* p : params) p->zero_grad();
  Var out = fn(vars);
  std::mt19937 rng(opt.seed);
  Tensor weights = rand_uniform(out.shape(), rng, -1.0f, 1.0f);
  Var loss = sum(mul(out, Var::constant(weights)));
  backward(loss);

  std::vector<Tensor*> targets;
  std::vector<Tensor> analytic;
  for (size_t i = 0; i < inputs.size(); ++i) {
    targets.push_back(&inputs[i]);
    const Tensor& g = vars[i].grad();
    analytic.push_back(g.empty() ? Tensor(inputs[i].shape()) : g);
  }
  for (ParamTensor* p : params) {
    targets.push_back(&p->value);
    analytic.push_back(p->grad.empty() ? Tensor(p->value.shape()) : p->grad);
  }

  GradCheckResult result;
  const double f0 = evaluate(weights);
  for (size_t t = 0; t < targets.size(); ++t) {
    Tensor& x = *targets[t];
    const int64_t n = x.numel();
    int64_t stride = 1;
    if (opt.max_coords_per_tensor > 0 && n > opt.max_coords_per_tensor) {
      stride = (n + opt.max_coords_per_tensor - 1) / opt.max_coords_per_tensor;
    }
    for (int64_t i = 0; i < n; i += stride) {
      const float orig = x[i];
      x[i] = static_cast<float>(orig + opt.eps);
      const double fp = evaluate(weights);
      x[i] = static_cast<float>(orig - opt.eps);
      const double fm = evaluate(weights);
      x[i] = orig;
      // Effective step after float rounding of the perturbed value.
      const double hp = static_cast<double>(static_cast<float>(orig + opt.eps)) - orig;
      const double hm = orig - static_cast<double>(static_cast<float>(orig - opt.eps));
      const double numeric = (fp - fm) / (hp + hm);
      if (opt.skip_kinks) {
        const double right = (fp - f0) / hp;
        const double left = (f0 - fm) / hm;
        const double scale = std::max({1.0, std::fabs(right), std::fabs(left)});
        if (std::fabs(right - left) / scale > opt.kink_tolerance) {
          ++result.skipped;
          continue;
        }
      }
      const double a = analytic[t][i];
      const double err = std::fabs(a - numeric) /
                         std::max({1.0, std::fabs(a), std::fabs(numeric)});
      result.max_rel_error = std::max(result.max_rel_error, err);
      ++result.probed;
    }
  }
  return result;
}

}  // namespace lapx
