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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "divens/archive.hpp"
#include "divens/data.hpp"
#include "divens/ensemble.hpp"
#include "divens/matrix.hpp"
#include "divens/metrics.hpp"
#include "divens/regularizers.hpp"

namespace divens {

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 2e-4;
  std::size_t batch_size = 128;
  std::size_t epochs = 200;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  RegularizerSpec reg;
  // Regularize only during the first N epochs.
  std::optional<std::size_t> warmup_only_epochs;
  // Defaults to batch_size.
  std::optional<std::size_t> ood_batch_size;
  std::optional<double> fgsm_epsilon;
  std::uint64_t seed = 0;
  // Early stop on validation NLL; 0 disables.
  std::size_t patience = 30;
  CeMode ce_mode = CeMode::per_member;
  // AdamW-style decay instead of L2 added to the gradient.
  bool decoupled_weight_decay = false;
  bool decay_rank1_factors = false;

  void validate() const;
  std::size_t effective_ood_batch() const { return ood_batch_size.value_or(batch_size); }
  // Whether the regularizer contributes during zero-based `epoch`.
  bool regularize_epoch(std::size_t epoch) const;
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::uint64_t step = 0;

  static AdamState zeros_like(const EnsembleModel& model);
};

// One Adam update with bias correction. `decay_scale` multiplies the weight
// decay per tensor (empty means 1 everywhere).
void adam_step(std::span<Matrix> params, std::span<const Matrix> grads, AdamState& state,
               const TrainConfig& cfg, std::span<const double> decay_scale = {});
// Model overload; rank-1 factors are exempt from decay unless
// cfg.decay_rank1_factors is set.
void adam_step(EnsembleModel& model, std::span<const Matrix> grads, AdamState& state,
               const TrainConfig& cfg);

struct EpochRecord {
  std::size_t epoch = 0;  // one-based
  double loss = 0.0;
  double ce = 0.0;
  // Absent for epochs without an active regularizer.
  std::optional<double> reg_score;
  double val_accuracy = 0.0;
  double val_nll = 0.0;
};

struct TrainTrace {
  std::vector<EpochRecord> epochs;
  // Loss of every optimization step, in order.
  std::vector<double> step_losses;
  std::size_t best_epoch = 0;
  bool early_stopped = false;

  std::string to_csv() const;
  void write_csv(const std::string& path) const;
};

// Everything needed to continue a run exactly.
struct TrainCheckpoint {
  EnsembleModel model;
  AdamState adam;
  std::size_t epochs_completed = 0;

  TensorArchive to_archive() const;
  static TrainCheckpoint from_archive(const TensorArchive& ar);
  void save(const std::string& path) const;
  static TrainCheckpoint load(const std::string& path);
};

struct TrainOptions {
  // Continue from here instead of from the given model. Early-stopping
  // bookkeeping restarts at the resume point.
  std::optional<TrainCheckpoint> resume_from;
  std::function<void(const TrainCheckpoint&)> on_epoch_end;
};

struct TrainResult {
  EnsembleModel model;
  TrainTrace trace;
  AdamState adam;
  std::size_t epochs_completed = 0;
};

// Throws DivergenceError with the step index on a non-finite loss.
TrainResult train(EnsembleModel model, const Dataset& train_ds, const Dataset& val_ds,
                  const TrainConfig& cfg, const TrainOptions& options = {});

struct StepLoss {
  ad::Var loss;
  ad::Var ce;
  std::optional<double> reg_score;
};

// The loss of one training step on `bound`'s tape. `reg` is null when the
// regularizer is off for this step; `ood` is required when it needs one.
StepLoss step_loss(const BoundModel& bound, const Matrix& x, std::span<const int> labels,
                   const RegularizerSpec* reg, const Matrix* ood, CeMode mode);

struct OodSet {
  std::string name;
  Matrix inputs;
};

struct EvalConfig {
  std::vector<CorruptionFamily> corruptions = all_corruptions();
  std::vector<int> levels = {1, 2, 3, 4, 5};
  std::size_t ece_bins = kDefaultEceBins;
  std::size_t temperature_folds = kDefaultTemperatureFolds;
  TemperaturePath temperature_path = TemperaturePath::logit_mean;
  std::uint64_t corruption_seed = 0;
};

EvalReport evaluate_cell(const EnsembleModel& model, const Dataset& ds,
                         const std::string& cell, const EvalConfig& cfg);

// Clean cell, one cell per corruption kind and level, then one row per OOD
// set scored against the clean cell's confidences.
std::vector<EvalReport> evaluate(const EnsembleModel& model, const Dataset& test_ds,
                                 const EvalConfig& cfg, std::span<const OodSet> ood_sets);

}  // namespace divens
