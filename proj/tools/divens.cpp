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

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "divens/errors.hpp"
#include "divens/experiment.hpp"
#include "divens/gradcheck.hpp"

namespace {

struct CommonFlags {
  std::int64_t seed_offset = 0;
  std::size_t jobs = 1;
  bool force = false;
  std::string output_dir;

  divens::RunOptions options() const {
    divens::RunOptions o;
    o.seed_offset = seed_offset;
    o.jobs = jobs;
    o.force = force;
    if (!output_dir.empty()) o.output_dir = output_dir;
    return o;
  }
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--seed-offset", f.seed_offset, "Added to every configured seed");
  cmd->add_option("--jobs", f.jobs, "Concurrent seed replicates (0: all cores)");
  cmd->add_flag("--force", f.force, "Recompute seeds whose results are up to date");
  cmd->add_option("--output", f.output_dir, "Override the config's output directory");
}

void print_run(const divens::RunSummary& run) {
  for (const auto& s : run.seeds) {
    std::printf("seed %lld: %s\n", static_cast<long long>(s.seed),
                s.diverged ? ("diverged at step " + std::to_string(s.diverged_step)).c_str()
                           : (s.skipped ? "up to date" : "done"));
  }
  std::printf("results written to %s\n", run.output_dir.c_str());
}

int cmd_gradcheck(std::size_t instances, std::uint64_t seed) {
  bool ok = true;
  double total = 0.0;
  for (const auto& c : divens::run_gradcheck_suite(instances, seed)) {
    std::printf("%-18s %s  %zu/%zu  max rel err %.3g  (%.2fs)\n", c.name.c_str(),
                c.ok() ? "PASS" : "FAIL", c.passed, c.instances, c.max_relative_error,
                c.seconds);
    ok = ok && c.ok();
    total += c.seconds;
  }
  std::printf("gradcheck %s in %.2fs (h = %g, tolerance %g)\n", ok ? "passed" : "FAILED", total,
              divens::kGradCheckStep, divens::kGradCheckTolerance);
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"divens: diversity-regularized ensemble experiments"};
  app.require_subcommand(1);

  CommonFlags run_flags;
  std::string run_cfg;
  auto* run = app.add_subcommand("run", "Train and evaluate every seed of a config");
  run->add_option("config", run_cfg, "Experiment config file")->required();
  add_common(run, run_flags);

  CommonFlags sweep_flags;
  std::string sweep_cfg;
  std::string axis;
  auto* sweep = app.add_subcommand("sweep", "Run a config once per value of one axis");
  sweep->add_option("config", sweep_cfg, "Experiment config file")->required();
  sweep->add_option("--axis", axis, "Sweep axis")
      ->required()
      ->check(CLI::IsMember(divens::kSweepAxes));
  add_common(sweep, sweep_flags);

  std::string report_dir;
  auto* report = app.add_subcommand("report", "Render a comparison table from results");
  report->add_option("dir", report_dir, "Results directory")->required();

  std::size_t instances = 20;
  std::uint64_t gc_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gradcheck->add_option("--instances", instances, "Random instances per case");
  gradcheck->add_option("--seed", gc_seed, "Instance seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const auto cfg = divens::load_config(run_cfg);
      const auto summary = divens::run_experiment(cfg, run_flags.options());
      print_run(summary);
      return summary.exit_code;
    }
    if (*sweep) {
      const auto cfg = divens::load_config(sweep_cfg);
      const auto summary = divens::run_sweep(cfg, axis, sweep_flags.options());
      for (const auto& r : summary.runs) print_run(r);
      return summary.exit_code;
    }
    if (*report) {
      const auto table = divens::build_report(report_dir);
      const std::string text = table.to_text();
      std::cout << text;
      std::ofstream(std::filesystem::path(report_dir) / "report.txt") << text;
      std::ofstream(std::filesystem::path(report_dir) / "report.csv") << table.to_csv();
      return 0;
    }
    if (*gradcheck) return cmd_gradcheck(instances, gc_seed);
  } catch (const divens::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return divens::kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
