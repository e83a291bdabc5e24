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

#include "lapx/tensor_file.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "lapx/errors.hpp"

namespace lapx {

namespace {

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts need byte swaps");

constexpr char kMagic[4] = {'L', 'A', 'P', 'X'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& data, const std::string& path) : data_(data), path_(path) {}

  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }

  const char* take(size_t n) {
    if (data_.size() - pos_ < n) {
      throw FormatError(path_ + ": truncated at byte " + std::to_string(pos_));
    }
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  const std::string& data_;
  const std::string& path_;
  size_t pos_ = 0;
};

}  // namespace

void write_file_atomic(const std::string& path, const std::string& contents) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open " + tmp + " for writing");
    f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    f.flush();
    if (!f) {
      f.close();
      std::remove(tmp.c_str());
      throw Error("write failed for " + tmp);
    }
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    std::remove(tmp.c_str());
    throw Error("cannot rename " + tmp + " to " + path + ": " + ec.message());
  }
}

void write_tensor_file(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::string out(kMagic, 4);
  put<uint32_t>(out, kVersion);
  put<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
  for (const NamedTensor& t : tensors) {
    if (t.name.size() > 0xFFFF) throw FormatError("tensor name too long: " + t.name);
    if (t.dims.size() > 4) throw FormatError("tensor rank above 4: " + t.name);
    int64_t numel = 1;
    for (int d : t.dims) numel *= d;
    if (numel != t.value.numel()) {
      throw ShapeError("tensor " + t.name + " dims disagree with its value " +
                       t.value.shape().str());
    }
    put<uint16_t>(out, static_cast<uint16_t>(t.name.size()));
    out += t.name;
    put<uint8_t>(out, 0);
    put<uint8_t>(out, static_cast<uint8_t>(t.dims.size()));
    for (int d : t.dims) put<uint32_t>(out, static_cast<uint32_t>(d));
    out.append(reinterpret_cast<const char*>(t.value.data()),
               static_cast<size_t>(numel) * sizeof(float));
  }
  write_file_atomic(path, out);
}

std::vector<NamedTensor> read_tensor_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open weight file " + path);
  const std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(data, path);
  if (std::memcmp(r.take(4), kMagic, 4) != 0) throw FormatError(path + ": bad magic");
  const auto version = r.get<uint32_t>();
  if (version != kVersion) {
    throw FormatError(path + ": unsupported version " + std::to_string(version));
  }
  const auto count = r.get<uint32_t>();
  std::vector<NamedTensor> out;
  for (uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto len = r.get<uint16_t>();
    t.name.assign(r.take(len), len);
    const auto dtype = r.get<uint8_t>();
    if (dtype != 0) {
      throw FormatError(path + ": tensor " + t.name + " has unknown dtype " +
                        std::to_string(dtype));
    }
    const auto rank = r.get<uint8_t>();
    if (rank > 4) throw FormatError(path + ": tensor " + t.name + " has rank > 4");
    int64_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      const auto v = r.get<uint32_t>();
      if (v == 0 || v > (1u << 30)) {
        throw FormatError(path + ": tensor " + t.name + " has invalid extent");
      }
      t.dims.push_back(static_cast<int>(v));
      numel *= v;
    }
    if (numel > (int64_t{1} << 31)) throw FormatError(path + ": tensor " + t.name + " too large");
    Shape s{1, 1, 1, 1};
    int* ext[4] = {&s.n, &s.c, &s.h, &s.w};
    for (int d = 0; d < rank; ++d) *ext[4 - rank + d] = t.dims[d];
    const char* raw = r.take(static_cast<size_t>(numel) * sizeof(float));
    t.value = Tensor(s);
    std::memcpy(t.value.data(), raw, static_cast<size_t>(numel) * sizeof(float));
    out.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError(path + ": trailing bytes after last tensor");
  return out;
}

}  // namespace lapx
