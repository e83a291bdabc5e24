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

#include <random>
#include <string>

#include "lapx/autograd.hpp"

namespace lapx {

inline constexpr int kEcaKernel = 7;
inline constexpr int kCbamKernel = 7;

// 1-D channel kernel of k taps, stored as (1,1,1,k).
struct EcaParams {
  ParamTensor kernel;

  static EcaParams create(const std::string& prefix, std::mt19937& rng,
                          int k = kEcaKernel);
};

struct CbamSpatialParams {
  ParamTensor conv;  // (1,2,7,7)

  static CbamSpatialParams create(const std::string& prefix, std::mt19937& rng);
};

struct NonLocalParams {
  ParamTensor theta;  // (C/8,C,1,1)
  ParamTensor phi;
  ParamTensor g;
  ParamTensor wz;     // (C,C/8,1,1)
  ParamTensor gamma;  // scalar, starts at 0

  int channels() const { return wz.value.shape().n; }

  // Throws ConfigError unless channels is a positive multiple of 8.
  static NonLocalParams create(const std::string& prefix, int channels,
                               std::mt19937& rng);
};

// Multiplicative maps, exposed for inspection.
Var eca_gate(const Var& x, EcaParams& p);           // (N,C,1,1)
Var cbam_gate(const Var& x, CbamSpatialParams& p);  // (N,1,H,W)

Var eca_channel(const Var& x, EcaParams& p);
Var cbam_spatial(const Var& x, CbamSpatialParams& p);
Var eca_cbam(const Var& x, EcaParams& eca, CbamSpatialParams& sp);

// Row-stochastic (N,1,n,n) affinity of the embedded-Gaussian non-local block.
Var nonlocal_affinity(const Var& x, NonLocalParams& p);
Var nonlocal_spatial(const Var& x, NonLocalParams& p);
Var eca_nonlocal(const Var& x, EcaParams& eca, NonLocalParams& nl);

}  // namespace lapx
