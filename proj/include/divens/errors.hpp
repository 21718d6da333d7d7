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

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace divens {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Numerical failure. For Cholesky failures `pivot` is the index of the first
// non-positive pivot; otherwise it is npos.
class NumericalError : public Error {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  explicit NumericalError(const std::string& what, std::size_t pivot = npos)
      : Error(what), pivot_(pivot) {}

  std::size_t pivot() const { return pivot_; }

 private:
  std::size_t pivot_;
};

class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

// Raised by the training loop when the loss becomes non-finite.
class DivergenceError : public Error {
 public:
  explicit DivergenceError(std::size_t step)
      : Error("training diverged: non-finite loss at step " +
              std::to_string(step)),
        step_(step) {}

  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

}  // namespace divens
