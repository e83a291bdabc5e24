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

#include "lapx/tensor.hpp"

namespace lapx {

struct NamedTensor {
  std::string name;
  std::vector<int> dims;  // logical rank 0..4
  Tensor value;
};

// Binary container: "LAPX", u32 version, u32 count, then per tensor u16 name
// length, name bytes, u8 dtype (0 = f32), u8 rank, u32 dims[rank] and raw
// little-endian f32 data. Writes go to a temporary file renamed into place.
void write_tensor_file(const std::string& path, const std::vector<NamedTensor>& tensors);

// Parses the whole file before returning; throws FormatError on bad magic,
// version, dtype, rank, truncation or trailing bytes.
std::vector<NamedTensor> read_tensor_file(const std::string& path);

// Writes `contents` to `path` through a temporary file and rename.
void write_file_atomic(const std::string& path, const std::string& contents);

}  // namespace lapx
