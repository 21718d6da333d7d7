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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "divens/ensemble.hpp"
#include "divens/matrix.hpp"
#include "divens/regularizers.hpp"
#include "divens/rng.hpp"

namespace divens {

struct Dataset {
  Matrix inputs;            // N x L, entries in [0, 1]
  std::vector<int> labels;  // N entries in [0, classes)
  std::size_t classes = 0;
  std::string name;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return inputs.cols(); }
  // Throws ConfigError on broken invariants. Generated datasets must also
  // contain every class.
  void validate(bool require_all_classes) const;
};

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices);

struct DatasetSplit {
  Dataset train;
  Dataset val;
  Dataset test;
};

// Stratified split: per class, a seeded shuffle assigns the first
// floor(n * val_fraction) samples to val and the next floor(n * test_fraction)
// to test.
DatasetSplit split_dataset(const Dataset& ds, double val_fraction, double test_fraction,
                           std::uint64_t seed);

struct BlobSpec {
  std::size_t classes = 10;
  std::size_t dim = 32;
  std::size_t per_class = 200;
  double spread = 1.0;
  std::uint64_t seed = 0;
  // Centers depend only on center_seed, so a different value gives a
  // shifted-cluster set over the same feature space.
  std::uint64_t center_seed = 0;
  double center_scale = 1.0;
};

Dataset make_blobs(const BlobSpec& spec);
Dataset make_rings(std::size_t classes, std::size_t per_class, double noise,
                   std::uint64_t seed);

enum class CorruptionFamily { gaussian_noise, feature_dropout, contrast_scale, smooth_blur };

std::string to_string(CorruptionFamily f);
CorruptionFamily parse_corruption(const std::string& text);
std::vector<CorruptionFamily> all_corruptions();

struct Corruption {
  CorruptionFamily kind = CorruptionFamily::gaussian_noise;
  int level = 1;  // 1..5
  // Replaces the level's scheduled severity when set.
  std::optional<double> severity_override;
};

// Scheduled severity: noise sigma, dropout rate, contrast factor, or blur
// pass count.
double corruption_severity(CorruptionFamily kind, int level);

Dataset corrupt(const Dataset& ds, const Corruption& c, std::uint64_t seed);

Matrix sample_uniform_ood(std::size_t dim, std::size_t n, Rng& rng);
Matrix sample_uniform_ood(std::size_t dim, std::size_t n, std::uint64_t seed);

// One signed-gradient ascent step on the regularizer's sample-diversity score
// with respect to the sampled inputs, clipped to [0, 1].
Matrix fgsm_perturb(const EnsembleModel& model, const RegularizerSpec& reg,
                    const Matrix& x, double epsilon);

inline constexpr std::size_t kCifarImageBytes = 3072;
inline constexpr std::size_t kCifarRecordBytes = kCifarImageBytes + 1;

Dataset parse_cifar10_binary(std::span<const std::uint8_t> bytes);
Dataset read_cifar10_binary(const std::string& path);

// CSV with header label,f0..f{L-1}.
void write_dataset_csv(const Dataset& ds, const std::string& path);

}  // namespace divens
