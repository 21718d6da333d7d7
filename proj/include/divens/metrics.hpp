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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "divens/matrix.hpp"

namespace divens {

inline constexpr double kProbFloor = 1e-12;
inline constexpr std::size_t kDefaultEceBins = 100;
inline constexpr std::size_t kDefaultTemperatureFolds = 5;
inline constexpr double kTemperatureMin = 0.05;
inline constexpr double kTemperatureMax = 20.0;
inline constexpr double kTemperatureTol = 1e-4;

// Ties go to the lowest class index.
std::size_t argmax(std::span<const double> row);

double accuracy(const Matrix& mean_probs, std::span<const int> labels);
// -(1/B) sum log max(p[label], 1e-12)
double nll(const Matrix& probs, std::span<const int> labels);

struct ReliabilityBin {
  double lower = 0.0;  // exclusive
  double upper = 0.0;  // inclusive
  std::size_t count = 0;
  double accuracy = 0.0;
  double confidence = 0.0;
};

// Equal-width confidence bins over (0, 1], right-inclusive.
std::vector<ReliabilityBin> reliability_bins(const Matrix& probs, std::span<const int> labels,
                                             std::size_t bins = kDefaultEceBins);
double ece(const Matrix& probs, std::span<const int> labels,
           std::size_t bins = kDefaultEceBins);

// Max class probability per row.
std::vector<double> confidences(const Matrix& probs);

// Mann-Whitney AUC with half credit for ties; in-distribution is positive.
double auc_roc(std::span<const double> id_scores, std::span<const double> ood_scores);
double auc_roc(const Matrix& id_mean_probs, const Matrix& ood_mean_probs);

// (1/M) sum_m KL(y_m || ybar), batch mean.
double jsd(std::span<const Matrix> member_probs, const Matrix& mean_prob);
// Per sample the best member's probability on the true class.
double oracle_nll(std::span<const Matrix> member_probs, std::span<const int> labels);
// Fraction of samples on which members i and j disagree on the argmax.
Matrix disagreement_matrix(std::span<const Matrix> member_probs);
// Mean normalized entropy of the rows of `probs`.
double mean_entropy(const Matrix& probs);

// Where the temperature is applied: to the mean member logit, or to each
// member before averaging probabilities.
enum class TemperaturePath { logit_mean, prob_mean };

std::string to_string(TemperaturePath p);
TemperaturePath parse_temperature_path(const std::string& text);

Matrix scaled_probs(std::span<const Matrix> member_logits, double temperature,
                    TemperaturePath path = TemperaturePath::logit_mean);

// NLL of the scaled prediction restricted to `rows` (all rows when empty).
double nll_at_temperature(std::span<const Matrix> member_logits, std::span<const int> labels,
                          double temperature, TemperaturePath path,
                          std::span<const std::size_t> rows = {});

// Golden-section minimization of the NLL over [0.05, 20] restricted to
// `rows`; returns the best temperature evaluated.
double fit_temperature_nll(std::span<const Matrix> member_logits, std::span<const int> labels,
                           TemperaturePath path = TemperaturePath::logit_mean,
                           std::span<const std::size_t> rows = {});

struct TemperatureFit {
  double temperature = 1.0;  // mean over folds
  std::vector<double> fold_temperatures;
  // Each row scaled with the temperature fitted on the other folds.
  Matrix held_out_probs;
};

// K-fold cross-validated fit; sample i belongs to fold i % folds.
TemperatureFit fit_temperature(std::span<const Matrix> member_logits,
                               std::span<const int> labels,
                               std::size_t folds = kDefaultTemperatureFolds,
                               TemperaturePath path = TemperaturePath::logit_mean);
TemperatureFit fit_temperature(const Matrix& logits, std::span<const int> labels,
                               std::size_t folds = kDefaultTemperatureFolds);

struct EvalReport {
  std::string cell;  // clean | <kind>:<level> | ood:<name>
  // NaN on OOD rows, which carry no labels.
  double accuracy = 0.0;
  double nll = 0.0;
  double ece = 0.0;
  double temperature = 1.0;
  std::optional<double> auc_roc;
  double mean_entropy = 0.0;
  double jsd = 0.0;
  double oracle_nll = 0.0;
  Matrix disagreement;

  // (metric, value) pairs that are defined for this row.
  std::vector<std::pair<std::string, double>> metrics() const;
};

}  // namespace divens
