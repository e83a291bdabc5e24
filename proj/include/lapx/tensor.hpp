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

#include <cstddef>
#include <cstdint>
#include <new>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace lapx {

// Cache-line aligned storage. Vectorised kernels peel differently depending on
// the start address, so fixed alignment keeps results bitwise reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

// Extents of a rank-4 (batch, channel, height, width) array.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  constexpr int64_t numel() const {
    return static_cast<int64_t>(n) * c * h * w;
  }
  constexpr int64_t plane() const { return static_cast<int64_t>(h) * w; }
  constexpr bool valid() const { return n > 0 && c > 0 && h > 0 && w > 0; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;
  std::string str() const;
};

// Dense single-precision NCHW array with value semantics. A default
// constructed Tensor is empty and stands for "no value" (e.g. an unallocated
// gradient buffer).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor scalar(float v) { return Tensor(Shape{1, 1, 1, 1}, v); }

  const Shape& shape() const { return shape_; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }

  float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  int64_t index(int n, int c, int h, int w) const {
    return ((static_cast<int64_t>(n) * shape_.c + c) * shape_.h + h) *
               shape_.w +
           w;
  }
  float& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
  float at(int n, int c, int h, int w) const {
    return data_[index(n, c, h, w)];
  }

  // Scalar value of a one-element tensor.
  float item() const;

  // Same data, different extents; numel must match.
  Tensor reshaped(Shape shape) const;

  void fill(float v);
  void add_(const Tensor& other);
  void scale_(float s);
  bool all_finite() const;

 private:
  Shape shape_{};
  FloatBuffer data_;
};

Tensor randn(Shape shape, std::mt19937& rng, float stddev = 1.0f);
Tensor rand_uniform(Shape shape, std::mt19937& rng, float lo, float hi);

// Largest |a-b| over matching elements; throws ShapeError on mismatch.
float max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace lapx
