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
#include <string>
#include <vector>

#include "divens/data.hpp"
#include "divens/ensemble.hpp"
#include "divens/training.hpp"

namespace divens {

inline constexpr int kConfigSchema = 1;

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitDiverged = 3 };

struct DatasetConfig {
  std::string generator = "blobs";  // blobs | rings | cifar10
  std::size_t classes = 10;
  std::size_t dim = 32;
  std::size_t per_class = 200;
  double spread = 1.0;
  double noise = 0.1;  // rings only
  std::uint64_t seed = 0;
  std::string path;  // cifar10 only
  double val_fraction = 0.15;
  double test_fraction = 0.25;
};

struct OodConfig {
  // Any of: shifted_clusters, uniform.
  std::vector<std::string> sets = {"shifted_clusters", "uniform"};
  std::size_t size = 500;
  std::uint64_t center_seed = 99;
};

struct SweepConfig {
  std::vector<std::string> members;
  std::vector<std::string> split_level;
  std::vector<std::string> lambda;
  std::vector<std::string> ood_batch_size;

  const std::vector<std::string>& values(const std::string& axis) const;
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetConfig dataset;
  MlpSpec mlp{{32, 64, 64, 64, 10}, Activation::relu};
  SharingScheme scheme = SharingScheme::independent();
  std::size_t members = 5;
  TrainConfig train;
  EvalConfig eval;
  OodConfig ood;
  std::vector<std::int64_t> seeds = {0, 1, 2};
  std::string output_dir = "results";
  SweepConfig sweep;

  // Cross-field checks; throws ConfigError.
  void validate() const;
  // Stable key = value rendering; parse(canonical()) reproduces the config.
  std::string canonical() const;
  std::string architecture_label() const;
  std::string regularizer_label() const;
};

// Sectioned "key = value" text with '#' comments; the first key must be
// `schema = 1`. Errors carry the line number and field name.
ExperimentConfig parse_config(const std::string& text, const std::string& source = "<config>");
ExperimentConfig load_config(const std::string& path);

struct RunOptions {
  std::int64_t seed_offset = 0;
  std::size_t jobs = 1;  // 0 means hardware concurrency
  bool force = false;
  // Overrides the config's output_dir when set.
  std::optional<std::string> output_dir;
};

// Honors DIVENS_DETERMINISTIC=1 by forcing a single worker.
std::size_t effective_jobs(std::size_t requested);

struct SeedOutcome {
  std::int64_t seed = 0;
  bool skipped = false;  // up to date, not recomputed
  bool diverged = false;
  std::size_t diverged_step = 0;
};

struct RunSummary {
  std::string output_dir;
  std::vector<SeedOutcome> seeds;
  int exit_code = kExitOk;
};

struct ExperimentData {
  DatasetSplit split;
  std::vector<OodSet> ood_sets;
};

ExperimentData build_data(const ExperimentConfig& cfg);

// Trains and evaluates every seed, then merges results.csv and summary.csv.
RunSummary run_experiment(const ExperimentConfig& cfg, const RunOptions& options = {});

inline const std::vector<std::string> kSweepAxes = {"members", "split_level", "lambda",
                                                    "ood_batch_size"};

// Config for one axis value, written to <output_dir>/<axis>_<value>.
ExperimentConfig apply_axis(const ExperimentConfig& cfg, const std::string& axis,
                            const std::string& value);

struct SweepSummary {
  std::vector<RunSummary> runs;
  int exit_code = kExitOk;
};

// One run per axis value and a merged sweep_<axis>.csv.
SweepSummary run_sweep(const ExperimentConfig& cfg, const std::string& axis,
                       const RunOptions& options = {});

struct ResultRow {
  std::string experiment;
  std::int64_t seed = 0;
  std::string cell;
  std::string metric;
  double value = 0.0;
};

std::vector<ResultRow> read_results(const std::string& path);

struct SummaryRow {
  std::string experiment;
  std::string cell;
  std::string metric;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for one seed
  std::size_t n = 0;
};

// Aggregates by (experiment, cell, metric) in first-appearance order.
std::vector<SummaryRow> summarize(const std::vector<ResultRow>& rows);

struct ReportTable {
  std::vector<std::string> columns;
  std::vector<std::string> row_labels;
  // Mean over seeds; nullopt renders as '-'.
  std::vector<std::vector<std::optional<double>>> values;
  std::vector<std::vector<std::optional<double>>> stds;
  std::vector<bool> higher_is_better;

  // Row index of the best value per column, when any value exists.
  std::vector<std::optional<std::size_t>> best_rows() const;
  std::string to_text() const;
  std::string to_csv() const;
};

// Collects every run below `dir` (the directory itself or its children).
ReportTable build_report(const std::string& dir);

std::string format_number(double v);

}  // namespace divens
