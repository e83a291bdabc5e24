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

#include "lapx/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_set>

#include "lapx/errors.hpp"

namespace lapx {

namespace {

std::atomic<uint64_t> g_next_seq{1};
thread_local MacCounter* t_mac_counter = nullptr;
thread_local bool t_grad_enabled = true;

std::shared_ptr<detail::Node> new_node(const char* op) {
  auto n = std::make_shared<detail::Node>();
  n->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  n->op = op;
  return n;
}

}  // namespace

Tensor& ParamTensor::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape());
  return grad;
}

namespace detail {

Tensor& Node::grad_buffer() {
  if (param != nullptr) return param->grad_buffer();
  if (grad.empty()) grad = Tensor(value().shape());
  return grad;
}

}  // namespace detail

Var Var::constant(Tensor t) {
  auto n = new_node("constant");
  n->owned = std::move(t);
  return Var(std::move(n));
}

Var Var::input(Tensor t, bool requires_grad) {
  auto n = new_node("input");
  n->owned = std::move(t);
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

Var Var::param(ParamTensor& p) {
  auto n = new_node("param");
  n->external = &p.value;
  n->param = &p;
  n->requires_grad = p.requires_grad() && t_grad_enabled;
  return Var(std::move(n));
}

Var Var::make(const char* op, Tensor value, std::vector<Var> inputs,
              std::function<void(detail::Node&)> fn) {
  auto n = new_node(op);
  n->owned = std::move(value);
  bool any = false;
  for (const Var& v : inputs) any = any || v.requires_grad();
  if (any && t_grad_enabled) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (Var& v : inputs) n->inputs.push_back(std::move(v.node_));
    n->backward = std::move(fn);
  }
  return Var(std::move(n));
}

void backward(const Var& root) {
  detail::Node* r = root.node();
  if (r == nullptr) throw Error("backward on an empty Var");
  if (r->consumed) {
    throw GraphConsumedError("backward called twice on the same graph");
  }
  if (root.value().numel() != 1) {
    throw ShapeError("backward root must be a scalar, got " +
                     root.shape().str());
  }
  if (!r->requires_grad) return;

  std::vector<std::shared_ptr<detail::Node>> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::shared_ptr<detail::Node>> stack{root.shared()};
  while (!stack.empty()) {
    std::shared_ptr<detail::Node> n = std::move(stack.back());
    stack.pop_back();
    if (!seen.insert(n.get()).second) continue;
    if (n->consumed) {
      throw GraphConsumedError(std::string("graph node '") + n->op +
                               "' was already consumed by backward");
    }
    for (const auto& in : n->inputs) {
      if (in->requires_grad) stack.push_back(in);
    }
    order.push_back(std::move(n));
  }
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) {
              return a->seq > b->seq;
            });

  r->grad_buffer().fill(1.0f);
  for (const auto& n : order) {
    if (n->backward) {
      if (!n->grad.empty()) n->backward(*n);
      n->backward = nullptr;
      n->inputs.clear();
      n->grad = Tensor();
      n->consumed = true;
    }
  }
}

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

bool grad_enabled() { return t_grad_enabled; }

MacCounter::MacCounter() : prev_(t_mac_counter) { t_mac_counter = this; }

MacCounter::~MacCounter() { t_mac_counter = prev_; }

void MacCounter::record(int64_t macs) {
  for (MacCounter* c = t_mac_counter; c != nullptr; c = c->prev_) {
    c->total_ += macs;
  }
}

}  // namespace lapx
