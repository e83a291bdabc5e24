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
#include <vector>

#include "lapx/autograd.hpp"
#include "lapx/tensor.hpp"

namespace lapx {

struct Conv2dOptions {
  int stride = 1;
  int pad = 0;
  int groups = 1;
};

// Output extent of a convolution along one axis.
int conv_out_extent(int in, int kernel, int stride, int pad);

// Cross-correlation. w is (Cout, Cin/groups, kH, kW); bias is optional (Cout
// elements, any rank-4 layout) and may be a null Var.
Var conv2d(const Var& x, const Var& w, const Var& bias, Conv2dOptions opt);

struct MaxPoolResult {
  Tensor out;
  // Flat offset within the input plane of each output element's maximum.
  std::vector<int32_t> argmax;
};
MaxPoolResult maxpool2x2_forward(const Tensor& x);
Var maxpool2x2(const Var& x);

Var upsample_nearest2x(const Var& x);

enum class BnMode { kTrain, kEval };

struct BatchNormOptions {
  BnMode mode = BnMode::kEval;
  float momentum = 0.1f;
  float eps = 1e-5f;
};

// gamma/beta hold C elements. Train mode normalizes by batch statistics and
// updates the running buffers in place.
Var batchnorm(const Var& x, const Var& gamma, const Var& beta,
              Tensor& running_mean, Tensor& running_var,
              BatchNormOptions opt);

enum class Activation { kRelu, kSigmoid };
Var activation(const Var& x, Activation kind);
inline Var relu(const Var& x) { return activation(x, Activation::kRelu); }
inline Var sigmoid(const Var& x) { return activation(x, Activation::kSigmoid); }

// Batched matrix product over the leading axis: a is (N,1,M,K) and b is
// (N,1,K,P) (after the optional transposes); result is (N,1,M,P).
Var matmul(const Var& a, const Var& b, bool trans_a = false,
           bool trans_b = false);

// Softmax along the last axis, stabilized by the row maximum.
Var softmax_rows(const Var& m);

// Element-wise with broadcasting: every extent of either operand is either
// equal to the other's or 1.
Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, float s);

// Sum of all elements as a (1,1,1,1) scalar.
Var sum(const Var& x);

Var global_avg_pool(const Var& x);  // (N,C,1,1)
Var global_max_pool(const Var& x);  // (N,C,1,1)
Var channel_mean(const Var& x);     // (N,1,H,W)
Var channel_max(const Var& x);      // (N,1,H,W)
Var concat_channels(const Var& a, const Var& b);
Var reshape(const Var& x, Shape shape);

// 1-D correlation along the channel axis of a (N,C,1,1) descriptor with a
// k-tap kernel (any layout holding k values), zero padded by (k-1)/2.
Var conv1d_channels(const Var& x, const Var& w);

}  // namespace lapx
