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
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "divens/autodiff.hpp"
#include "divens/matrix.hpp"

namespace divens {

inline constexpr double kGradCheckStep = 1e-4;
inline constexpr double kGradCheckTolerance = 1e-4;

// Builds a scalar from leaves registered on the tape.
using ScalarFn = std::function<ad::Var(ad::Tape&, std::span<const ad::Var>)>;

// Reverse-mode gradient of `f` at `inputs`, one matrix per input.
std::vector<Matrix> autodiff_gradient(const ScalarFn& f, std::span<const Matrix> inputs);

// Central differences with step h.
std::vector<Matrix> numeric_gradient(const ScalarFn& f, std::span<const Matrix> inputs,
                                     double h = kGradCheckStep);

// ||g_ad - g_fd|| / max(||g_ad||, ||g_fd||, 1e-12) over all inputs jointly.
double gradcheck_relative_error(const ScalarFn& f, std::span<const Matrix> inputs,
                                double h = kGradCheckStep);

struct GradCheckCase {
  std::string name;
  std::size_t instances = 0;
  std::size_t passed = 0;
  double max_relative_error = 0.0;
  double seconds = 0.0;

  bool ok() const { return instances > 0 && passed == instances; }
};

// Every regularizer score plus the full training loss, each on `instances`
// random problems.
std::vector<GradCheckCase> run_gradcheck_suite(std::size_t instances = 20,
                                               std::uint64_t seed = 0,
                                               double tolerance = kGradCheckTolerance);

}  // namespace divens
