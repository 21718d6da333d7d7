/* Copyright 2026 The divens Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "divens/matrix.hpp"

namespace divens {

// Ordered key/value header plus named tensors, stored as text:
//
//   divens-archive 1
//   header <key> <value...>
//   tensor <name> <rows> <cols>
//   <row of hexfloat values>
//   end
//
// Values use "%a" formatting so a save/load cycle is bit-exact.
struct TensorArchive {
  std::vector<std::pair<std::string, std::string>> header;
  std::vector<std::pair<std::string, Matrix>> tensors;

  void set(const std::string& key, const std::string& value);
  std::optional<std::string> get(const std::string& key) const;
  std::string require(const std::string& key) const;
  const Matrix* tensor(const std::string& name) const;

  std::string serialize() const;
  static TensorArchive deserialize(const std::string& text);

  void save(const std::string& path) const;
  static TensorArchive load(const std::string& path);
};

std::string hexfloat(double v);

}  // namespace divens
