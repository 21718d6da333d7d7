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

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "divens/errors.hpp"
#include "divens/experiment.hpp"

namespace fs = std::filesystem;

namespace divens {
namespace {

const char* kTiny = R"(schema = 1
name = tiny

[dataset]
generator = blobs
classes = 3
dim = 4
per_class = 30
seed = 2

[model]
widths = 4,8,3
scheme = tree_split:1
members = 2

[train]
learning_rate = 1e-2
epochs = 3
batch_size = 16

[regularizer]
kind = sample_diversity

[eval]
corruptions = gaussian_noise
levels = 1,5
ece_bins = 5

[ood]
size = 40

[run]
seeds = 1,0
output_dir = unused

[sweep]
members = 2,3
)";

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("divens_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string config_error(const std::string& text) {
  try {
    parse_config(text, "cfg.ini");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

TEST(Config, ParsesAllSections) {
  const ExperimentConfig c = parse_config(kTiny);
  EXPECT_EQ(c.name, "tiny");
  EXPECT_EQ(c.dataset.classes, 3u);
  EXPECT_EQ(c.mlp.layer_widths, (std::vector<std::size_t>{4, 8, 3}));
  EXPECT_EQ(c.scheme, SharingScheme::tree_split(1));
  EXPECT_EQ(c.train.reg.kind, RegKind::sample_diversity);
  EXPECT_EQ(c.train.reg.lambda, 0.5);
  EXPECT_EQ(c.eval.levels, (std::vector<int>{1, 5}));
  EXPECT_EQ(c.seeds, (std::vector<std::int64_t>{1, 0}));
  EXPECT_EQ(c.sweep.members, (std::vector<std::string>{"2", "3"}));
}

TEST(Config, LambdaMayPrecedeKind) {
  const ExperimentConfig c = parse_config(
      "schema = 1\n[dataset]\nclasses = 3\ndim = 4\n[model]\nwidths = 4,3\n"
      "[regularizer]\nlambda = 0.2\nkind = chi2\n");
  EXPECT_EQ(c.train.reg.lambda, 0.2);
  EXPECT_EQ(c.train.reg.kind, RegKind::chi2);
}

TEST(Config, ErrorsNameLineAndField) {
  EXPECT_EQ(config_error("name = x\n"),
            "cfg.ini:1: field 'name': the first entry must be 'schema = 1'");
  EXPECT_EQ(config_error("schema = 2\n"), "cfg.ini:1: field 'schema': unsupported schema version '2'");
  EXPECT_EQ(config_error("schema = 1\n\n[train]\nepochz = 3\n"),
            "cfg.ini:4: field 'train.epochz': unknown field");
  EXPECT_EQ(config_error("schema = 1\n[train]\nepochs = 3\nepochs = 4\n"),
            "cfg.ini:4: field 'train.epochs': duplicate field");
  EXPECT_NE(config_error("schema = 1\n[train]\nepochs = three\n").find("cfg.ini:3: field 'train.epochs'"),
            std::string::npos);
  EXPECT_NE(config_error("schema = 1\n[bogus]\n").find("cfg.ini:2: unknown section"),
            std::string::npos);
  EXPECT_NE(config_error("schema = 1\n[model]\nmembers = 1\n").find("members"), std::string::npos);
  EXPECT_NE(config_error("").find("missing 'schema = 1'"), std::string::npos);
}

TEST(Config, CanonicalRoundTrips) {
  const ExperimentConfig c = parse_config(kTiny);
  const std::string text = c.canonical();
  EXPECT_EQ(text.rfind("# rng = philox4x32-10", 0), 0u);
  EXPECT_EQ(parse_config(text).canonical(), text);
  ExperimentConfig changed = c;
  changed.train.learning_rate = 0.1 + 0.2;  // not exactly representable in short form
  EXPECT_EQ(parse_config(changed.canonical()).train.learning_rate, changed.train.learning_rate);
}

TEST(Config, ApplyAxisRenamesAndRedirects) {
  ExperimentConfig c = parse_config(kTiny);
  c.output_dir = "base";
  const ExperimentConfig m3 = apply_axis(c, "members", "3");
  EXPECT_EQ(m3.members, 3u);
  EXPECT_EQ(m3.name, "tiny@members=3");
  EXPECT_EQ(fs::path(m3.output_dir), fs::path("base") / "members_3");
  EXPECT_EQ(apply_axis(c, "lambda", "0.1").train.reg.lambda, 0.1);
  EXPECT_EQ(apply_axis(c, "split_level", "0").scheme, SharingScheme::tree_split(0));
  EXPECT_EQ(apply_axis(c, "ood_batch_size", "7").train.effective_ood_batch(), 7u);
  EXPECT_THROW(apply_axis(c, "depth", "2"), ConfigError);
}

TEST(Summary, MeanAndSampleStd) {
  const std::vector<ResultRow> rows{{"e", 0, "clean", "accuracy", 0.5},
                                    {"e", 1, "clean", "accuracy", 0.7},
                                    {"e", 2, "clean", "accuracy", 0.9},
                                    {"e", 0, "clean", "nll", 1.0}};
  const auto s = summarize(rows);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_NEAR(s[0].mean, 0.7, 1e-15);
  EXPECT_NEAR(s[0].std, 0.2, 1e-15);
  EXPECT_EQ(s[0].n, 3u);
  EXPECT_EQ(s[1].std, 0.0);
}

TEST(Jobs, DeterministicEnvironmentForcesOneWorker) {
  ::setenv("DIVENS_DETERMINISTIC", "1", 1);
  EXPECT_EQ(effective_jobs(8), 1u);
  ::unsetenv("DIVENS_DETERMINISTIC");
  EXPECT_EQ(effective_jobs(3), 3u);
  EXPECT_GE(effective_jobs(0), 1u);
}

TEST(Run, WritesOutputsAndSkipsUpToDateSeeds) {
  const fs::path out = scratch("run");
  RunOptions opts;
  opts.output_dir = out.string();
  const ExperimentConfig c = parse_config(kTiny);
  const RunSummary first = run_experiment(c, opts);
  EXPECT_EQ(first.exit_code, kExitOk);
  ASSERT_EQ(first.seeds.size(), 2u);
  EXPECT_EQ(first.seeds[0].seed, 0);
  for (const char* f : {"results.csv", "summary.csv", "status.csv", "experiment.ini",
                        "trace_0.csv", "checkpoint_1.txt", "reliability_0.csv"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  const std::string results = slurp(out / "results.csv");
  EXPECT_EQ(results.rfind("experiment,seed,cell,metric,value\n", 0), 0u);
  EXPECT_NE(results.find("tiny,0,gaussian_noise:5,accuracy,"), std::string::npos);
  EXPECT_NE(results.find("tiny,1,ood:uniform,auc_roc,"), std::string::npos);
  EXPECT_EQ(parse_config(slurp(out / "experiment.ini")).canonical(), c.canonical());

  const RunSummary second = run_experiment(c, opts);
  EXPECT_TRUE(second.seeds[0].skipped && second.seeds[1].skipped);
  EXPECT_EQ(slurp(out / "results.csv"), results);

  opts.force = true;
  const RunSummary forced = run_experiment(c, opts);
  EXPECT_FALSE(forced.seeds[0].skipped);
  EXPECT_EQ(slurp(out / "results.csv"), results);

  // A changed config invalidates the fingerprint.
  ExperimentConfig changed = c;
  changed.train.epochs = 2;
  opts.force = false;
  EXPECT_FALSE(run_experiment(changed, opts).seeds[0].skipped);
  fs::remove_all(out);
}

TEST(Run, SeedOffsetShiftsSeeds) {
  const fs::path out = scratch("offset");
  RunOptions opts;
  opts.output_dir = out.string();
  opts.seed_offset = 10;
  const RunSummary s = run_experiment(parse_config(kTiny), opts);
  EXPECT_EQ(s.seeds[0].seed, 10);
  EXPECT_EQ(s.seeds[1].seed, 11);
  EXPECT_TRUE(fs::exists(out / "trace_11.csv"));
  fs::remove_all(out);
}

TEST(Run, ParallelMatchesSerial) {
  const fs::path a = scratch("serial"), b = scratch("parallel");
  RunOptions opts;
  opts.output_dir = a.string();
  run_experiment(parse_config(kTiny), opts);
  opts.output_dir = b.string();
  opts.jobs = 2;
  run_experiment(parse_config(kTiny), opts);
  EXPECT_EQ(slurp(a / "results.csv"), slurp(b / "results.csv"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Run, DivergenceSetsExitCodeAndStatus) {
  const fs::path out = scratch("diverge");
  std::string text = kTiny;
  text.replace(text.find("learning_rate = 1e-2"), 20, "learning_rate = 1e300");
  RunOptions opts;
  opts.output_dir = out.string();
  const RunSummary s = run_experiment(parse_config(text), opts);
  EXPECT_EQ(s.exit_code, kExitDiverged);
  EXPECT_TRUE(s.seeds[0].diverged);
  EXPECT_NE(slurp(out / "status.csv").find("0,diverged,"), std::string::npos);
  fs::remove_all(out);
}

TEST(Sweep, OneRunPerValueAndMergedCsv) {
  const fs::path out = scratch("sweep");
  RunOptions opts;
  opts.output_dir = out.string();
  const SweepSummary s = run_sweep(parse_config(kTiny), "members", opts);
  ASSERT_EQ(s.runs.size(), 2u);
  EXPECT_TRUE(fs::exists(out / "members_2" / "results.csv"));
  EXPECT_TRUE(fs::exists(out / "members_3" / "results.csv"));
  const std::string merged = slurp(out / "sweep_members.csv");
  EXPECT_EQ(merged.rfind("axis,metric,mean,std\n", 0), 0u);
  EXPECT_NE(merged.find("\n3,clean/accuracy,"), std::string::npos);
  EXPECT_THROW(run_sweep(parse_config(kTiny), "lambda", opts), ConfigError);

  const ReportTable t = build_report(out.string());
  ASSERT_EQ(t.row_labels.size(), 2u);
  EXPECT_EQ(t.columns.front(), "accuracy clean");
  EXPECT_EQ(t.columns.back(), "auc uniform");
  fs::remove_all(out);
}

TEST(Report, DivergedRunsRenderDashAndBestIsMarked) {
  ReportTable t;
  t.columns = {"accuracy clean", "nll clean"};
  t.higher_is_better = {true, false};
  t.row_labels = {"a", "b", "c"};
  t.values = {{0.9, 0.3}, {0.95, 0.4}, {std::nullopt, std::nullopt}};
  t.stds = {{0.01, 0.02}, {0.0, 0.0}, {std::nullopt, std::nullopt}};
  const auto best = t.best_rows();
  EXPECT_EQ(best[0], 1u);
  EXPECT_EQ(best[1], 0u);
  const std::string text = t.to_text();
  EXPECT_NE(text.find("**0.95 ± 0**"), std::string::npos);
  EXPECT_NE(text.find("**0.3 ± 0.02**"), std::string::npos);
  EXPECT_NE(text.find("| c     | -"), std::string::npos);
  EXPECT_NE(t.to_csv().find("c,"), std::string::npos);
}

TEST(Report, MissingDirectoryIsAnError) {
  EXPECT_THROW(build_report((fs::temp_directory_path() / "divens_no_such_dir").string()), Error);
}

}  // namespace
}  // namespace divens
