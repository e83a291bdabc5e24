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
#include <memory>
#include <string>
#include <vector>

#include "lapx/tensor.hpp"

namespace lapx {

// A named weight or state tensor owned by a model. `dims` is the logical
// shape (rank 0..4) used for serialization; `value` always stores it as a
// rank-4 Tensor.
struct ParamTensor {
  std::string name;
  Tensor value;
  std::vector<int> dims;
  Tensor grad;
  bool trainable = true;
  bool frozen = false;

  bool requires_grad() const { return trainable && !frozen; }
  int64_t numel() const { return value.numel(); }
  void zero_grad() { grad = Tensor(); }
  Tensor& grad_buffer();
};

namespace detail {

struct Node {
  uint64_t seq = 0;
  const char* op = "";
  Tensor owned;
  const Tensor* external = nullptr;
  ParamTensor* param = nullptr;
  Tensor grad;
  bool requires_grad = false;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads `grad` of this node and accumulates into the inputs' buffers.
  std::function<void(Node&)> backward;

  const Tensor& value() const { return external ? *external : owned; }
  // Zero-initialized on first use; parameter leaves accumulate straight into
  // the ParamTensor gradient.
  Tensor& grad_buffer();
};

}  // namespace detail

// Handle to a value in the reverse-mode graph. Copies share the node.
class Var {
 public:
  Var() = default;

  // Leaf that never receives gradient.
  static Var constant(Tensor t);
  // Leaf whose gradient is kept after backward (see grad()).
  static Var input(Tensor t, bool requires_grad = true);
  // Leaf bound to a parameter; gradient lands in p.grad when p.requires_grad().
  static Var param(ParamTensor& p);

  const Tensor& value() const { return node_->value(); }
  const Shape& shape() const { return node_->value().shape(); }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const char* op() const { return node_->op; }
  explicit operator bool() const { return static_cast<bool>(node_); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& shared() const { return node_; }

  // Records a primitive's output. When no input requires grad the result is
  // a detached constant and `fn` is dropped.
  static Var make(const char* op, Tensor value, std::vector<Var> inputs,
                  std::function<void(detail::Node&)> fn);

 private:
  explicit Var(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
};

// Reverse-mode sweep from a scalar root. Nodes run in reverse creation
// order; intermediate state is released afterwards, so a second call on the
// same graph throws GraphConsumedError.
void backward(const Var& root);

// Disables graph recording on this thread while alive: parameters enter as
// plain values and every result is detached.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// Counts multiply-accumulates issued by conv/matmul primitives on this
// thread while alive.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;
  int64_t total() const { return total_; }

  static void record(int64_t macs);

 private:
  int64_t total_ = 0;
  MacCounter* prev_ = nullptr;
};

}  // namespace lapx
