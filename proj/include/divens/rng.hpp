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

#include <array>
#include <cstdint>
#include <string_view>

namespace divens {

// Identity of the generator; recorded in each run's experiment.ini.
inline constexpr std::string_view kRngAlgorithm = "philox4x32-10";

// Philox4x32-10 block function (Salmon et al., Random123).
std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> counter,
                                           std::array<std::uint32_t, 2> key);

// Counter-based stream. The key is derived from (seed, stream path); the
// counter advances one block per four 32-bit outputs. Children obtained with
// split() are independent of the parent's position.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(seed) {}

  Rng split(std::uint64_t tag) const;
  Rng split(std::string_view tag) const;

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Standard normal via Box-Muller; deterministic across platforms up to libm.
  double normal();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  // +1 or -1 with equal probability.
  double sign() { return (next_u32() & 1u) ? 1.0 : -1.0; }

  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  unsigned used_ = 4;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

}  // namespace divens
