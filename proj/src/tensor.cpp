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

#include "lapx/tensor.hpp"

#include <cmath>
#include <sstream>

#include "lapx/errors.hpp"

namespace lapx {

std::string Shape::str() const {
  std::ostringstream os;
  os << "(" << n << "," << c << "," << h << "," << w << ")";
  return os.str();
}

Tensor::Tensor(Shape shape, float fill) : shape_(shape) {
  if (!shape.valid()) throw ShapeError("non-positive extent in " + shape.str());
  data_.assign(static_cast<size_t>(shape.numel()), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : shape_(shape), data_(values.begin(), values.end()) {
  if (!shape.valid()) throw ShapeError("non-positive extent in " + shape.str());
  if (static_cast<int64_t>(data_.size()) != shape.numel()) {
    throw ShapeError("value count " + std::to_string(data_.size()) +
                     " does not match " + shape.str());
  }
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on " + shape_.str());
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape.numel() != numel()) {
    throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
  }
  Tensor out;
  out.shape_ = shape;
  out.data_ = data_;
  return out;
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add_(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw ShapeError("add_ " + other.shape_.str() + " into " + shape_.str());
  }
  for (size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

void Tensor::scale_(float s) {
  for (float& v : data_) v *= s;
}

bool Tensor::all_finite() const {
  for (float v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor randn(Shape shape, std::mt19937& rng, float stddev) {
  std::normal_distribution<float> dist(0.0f, stddev);
  Tensor t(shape);
  for (float& v : t.values()) v = dist(rng);
  return t;
}

Tensor rand_uniform(Shape shape, std::mt19937& rng, float lo, float hi) {
  std::uniform_real_distribution<float> dist(lo, hi);
  Tensor t(shape);
  for (float& v : t.values()) v = dist(rng);
  return t;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("compare " + a.shape().str() + " vs " + b.shape().str());
  }
  float m = 0.0f;
  for (int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::fabs(a[i] - b[i]));
  }
  return m;
}

}  // namespace lapx
