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

#include <stdexcept>
#include <string>

namespace lapx {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dimension or divisibility precondition violated.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed container or document (bad magic, unsupported version, truncation).
class FormatError : public Error {
 public:
  using Error::Error;
};

class MissingTensorError : public Error {
 public:
  explicit MissingTensorError(const std::string& name)
      : Error("missing tensor: " + name), name_(name) {}
  const std::string& tensor_name() const { return name_; }

 private:
  std::string name_;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// backward() called on a graph whose intermediate state was already released.
class GraphConsumedError : public Error {
 public:
  using Error::Error;
};

}  // namespace lapx
