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
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "divens/autodiff.hpp"
#include "divens/ensemble.hpp"
#include "divens/matrix.hpp"

namespace divens {

inline constexpr double kDefaultGramJitter = 1e-6;
inline constexpr double kNormalizeEps = 1e-8;
inline constexpr double kChi2LogFloor = 1e-12;

enum class RegKind { none, sample_diversity, adp, neg_corr, chi2, weight_cos };

std::string to_string(RegKind kind);
RegKind parse_reg_kind(const std::string& text);

// Cross-entropy aggregation: mean of per-member CE, or CE of the mean
// prediction.
enum class CeMode { per_member, mean_prob };

std::string to_string(CeMode mode);
CeMode parse_ce_mode(const std::string& text);

struct RegularizerSpec {
  RegKind kind = RegKind::none;
  double lambda = 0.0;
  double adp_alpha = 0.125;
  double adp_beta = 0.5;
  // Replace the log-det term of sample_diversity/adp by the pairwise
  // chi-square score.
  bool use_chi2_variant = false;
  // Use the unsquared numerator sum (a-b)/(a+b) in the chi-square score.
  bool chi2_literal = false;
  double jitter = kDefaultGramJitter;
  // Optional second regularizer added with its own lambda.
  std::shared_ptr<const RegularizerSpec> combine_with;

  // kind with its default coefficient: sample_diversity 0.5, chi2 0.25,
  // neg_corr 1e-5, adp 1 (alpha 0.125, beta 0.5), weight_cos 1.
  static RegularizerSpec with_defaults(RegKind kind);

  bool active() const;
  bool needs_ood() const;
  std::string describe() const;
  // Throws ConfigError for combinations whose Gram matrix is singular by
  // construction.
  void validate(const EnsembleModel& model) const;
};

// ---- differentiable scores ---------------------------------------------------

// Pairwise form -sum_m (y_m - ybar) . sum_{j!=m} (y_j - ybar), batch mean.
ad::Var neg_corr(std::span<const ad::Var> member_probs);

// log(max(floor, mean over ordered pairs of sum_k (a-b)^2/(a+b))), batch mean.
ad::Var chi2_diversity(std::span<const ad::Var> member_probs, bool literal = false);

ad::Var adp(std::span<const ad::Var> member_probs, std::span<const int> labels,
            double alpha, double beta, double jitter = kDefaultGramJitter,
            bool use_chi2 = false, bool chi2_literal = false);

// Mean over samples of log det(Yt^T Yt + jitter I), Yt the unit-normalized
// member logits of one sample stacked as columns.
ad::Var sample_diversity_from_logits(std::span<const ad::Var> member_logits,
                                     double jitter = kDefaultGramJitter,
                                     bool use_chi2 = false, bool chi2_literal = false);

// Forwards `ood_batch` through every member, then scores it.
ad::Var sample_diversity(const BoundModel& bound, ad::Var ood_batch,
                         double jitter = kDefaultGramJitter, bool use_chi2 = false,
                         bool chi2_literal = false);

// log det(Theta Theta^T + jitter I) over unit-normalized member-owned
// parameter vectors.
ad::Var weight_cos(const BoundModel& bound, double jitter = kDefaultGramJitter);

// Mean over the batch of the chosen cross-entropy.
ad::Var cross_entropy(const EnsembleVars& out, std::span<const int> labels,
                      CeMode mode = CeMode::per_member);

// L_total = CE - lambda * reg_score.
ad::Var combined_loss(const EnsembleVars& out, std::span<const int> labels,
                      ad::Var reg_score, double lambda, CeMode mode = CeMode::per_member);

struct RegInputs {
  const BoundModel* bound = nullptr;
  const EnsembleVars* id_out = nullptr;
  std::span<const int> labels;
  // Required when the spec (or its companion) is sample_diversity.
  std::optional<ad::Var> ood_batch;
};

struct RegTerm {
  ad::Var weighted;  // sum_i lambda_i * score_i
  double raw = 0.0;  // sum_i score_i
};

// Score of a single spec, ignoring lambda and the companion.
ad::Var regularizer_score(const RegularizerSpec& spec, const RegInputs& in);
RegTerm regularization_term(const RegularizerSpec& spec, const RegInputs& in);

// ---- value-level helpers -----------------------------------------------------

// Normalized Shannon entropy -(1/log C) sum p log p, 0 log 0 = 0.
double entropy(std::span<const double> p);

// Both algebraic routes of the negative-correlation score for one sample.
double neg_corr_pairwise(std::span<const std::vector<double>> member_probs);
double neg_corr_squared_deviation(std::span<const std::vector<double>> member_probs);

// Value of chi2 inner (pre-log) mean for one sample.
double chi2_inner(std::span<const std::vector<double>> member_probs, bool literal = false);

double log_det_gram_value(const Matrix& y, double jitter);
Matrix normalize_columns_value(const Matrix& y, double eps);
Matrix softmax_rows_value(const Matrix& z);

}  // namespace divens
