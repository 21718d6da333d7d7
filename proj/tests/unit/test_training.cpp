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

#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "divens/errors.hpp"
#include "divens/training.hpp"

namespace divens {
namespace {

struct SmallTask {
  DatasetSplit split;
  MlpSpec spec{{8, 16, 16, 4}, Activation::relu};
};

SmallTask small_task(double spread = 1.0, std::uint64_t seed = 5) {
  BlobSpec blobs;
  blobs.classes = 4;
  blobs.dim = 8;
  blobs.per_class = 60;
  blobs.spread = spread;
  blobs.seed = seed;
  return {split_dataset(make_blobs(blobs), 0.15, 0.25, seed)};
}

TrainConfig fast_config() {
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 32;
  cfg.learning_rate = 1e-3;
  cfg.patience = 0;
  cfg.seed = 3;
  return cfg;
}

TEST(Adam, MatchesHandSteppedScalarTrace) {
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.0;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<Matrix> params{Matrix{{1.0}}};
  AdamState state{{Matrix(1, 1)}, {Matrix(1, 1)}, 0};
  double theta = 1.0, m = 0.0, v = 0.0;
  const double grads[] = {0.5, -0.2, 0.1};
  for (int t = 1; t <= 3; ++t) {
    const double g = grads[t - 1];
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    theta -= 0.1 * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    const std::vector<Matrix> gm{Matrix{{g}}};
    adam_step(params, gm, state, cfg);
    EXPECT_NEAR(params[0](0, 0), theta, 1e-15) << "step " << t;
  }
  // First step moves by lr in the direction opposite the gradient.
  EXPECT_NEAR(1.0 - 0.1, 0.9, 1e-15);
  EXPECT_EQ(state.step, 3u);
}

TEST(Adam, CoupledAndDecoupledDecay) {
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.weight_decay = 0.5;
  std::vector<Matrix> params{Matrix{{2.0}}};
  AdamState state{{Matrix(1, 1)}, {Matrix(1, 1)}, 0};
  const std::vector<Matrix> zero{Matrix(1, 1)};
  // Coupled: g = 0 + wd * theta, first step is a plain sign step.
  adam_step(params, zero, state, cfg);
  EXPECT_NEAR(params[0](0, 0), 2.0 - 0.01, 1e-9);

  cfg.decoupled_weight_decay = true;
  std::vector<Matrix> q{Matrix{{2.0}}};
  AdamState s2{{Matrix(1, 1)}, {Matrix(1, 1)}, 0};
  adam_step(q, zero, s2, cfg);
  EXPECT_NEAR(q[0](0, 0), 2.0 - 0.01 * 0.5 * 2.0, 1e-15);
}

TEST(Adam, ZeroGradientWithoutDecayLeavesParamsUnchanged) {
  EnsembleModel model = init_ensemble(MlpSpec{{3, 4, 2}, Activation::relu},
                                      SharingScheme::rank1_factorized(), 2, 1);
  const EnsembleModel before = model;
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  AdamState state = AdamState::zeros_like(model);
  std::vector<Matrix> grads;
  for (const auto& p : model.params) grads.emplace_back(p.value.rows(), p.value.cols());
  adam_step(model, grads, state, cfg);
  for (std::size_t i = 0; i < model.params.size(); ++i)
    EXPECT_EQ(model.params[i].value, before.params[i].value);
}

TEST(Adam, Rank1FactorsAreNotDecayedByDefault) {
  EnsembleModel model = init_ensemble(MlpSpec{{3, 4, 2}, Activation::relu},
                                      SharingScheme::rank1_factorized(), 2, 1);
  const EnsembleModel before = model;
  TrainConfig cfg;
  cfg.weight_decay = 0.1;
  std::vector<Matrix> grads;
  for (const auto& p : model.params) grads.emplace_back(p.value.rows(), p.value.cols());
  AdamState state = AdamState::zeros_like(model);
  adam_step(model, grads, state, cfg);
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const auto role = model.params[i].role;
    if (role == ParamRole::rank1_r || role == ParamRole::rank1_s)
      EXPECT_EQ(model.params[i].value, before.params[i].value);
  }
  cfg.decay_rank1_factors = true;
  EnsembleModel decayed = before;
  AdamState s2 = AdamState::zeros_like(decayed);
  adam_step(decayed, grads, s2, cfg);
  EXPECT_NE(decayed.params[*decayed.find("m0.l0.r")].value,
            before.params[*before.find("m0.l0.r")].value);
}

TEST(Adam, RejectsMismatchedShapes) {
  std::vector<Matrix> params{Matrix(2, 2)};
  const std::vector<Matrix> grads{Matrix(2, 1)};
  AdamState state{{Matrix(2, 2)}, {Matrix(2, 2)}, 0};
  EXPECT_THROW(adam_step(params, grads, state, TrainConfig{}), ShapeError);
}

// One full-batch training step equals -lr * g / (|g| + eps) for a central
// difference estimate g of the loss gradient (Adam's first step).
TEST(Train, OneStepDeltaMatchesFiniteDifference) {
  Dataset ds;
  ds.inputs = Matrix{{0.2}, {0.9}, {0.4}, {0.7}};
  ds.labels = {0, 1, 0, 1};
  ds.classes = 2;
  // widths {1, 2}: W is 1x2 and b is 1x2, four parameters per member.
  EnsembleModel model = init_ensemble(MlpSpec{{1, 2}, Activation::relu},
                                      SharingScheme::independent(), 2, 4);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e-3;
  cfg.weight_decay = 1e-2;
  cfg.patience = 0;
  const TrainResult r = train(model, ds, Dataset{Matrix(0, 1), {}, 2, "empty"}, cfg);

  auto loss_at = [&](const EnsembleModel& m) {
    ad::Tape t;
    const BoundModel b = bind(t, m, false);
    double l2 = 0.0;
    for (const auto& p : m.params)
      for (double v : p.value.data()) l2 += v * v;
    return step_loss(b, ds.inputs, ds.labels, nullptr, nullptr, CeMode::per_member)
               .loss.value()
               .item() +
           0.5 * cfg.weight_decay * l2;
  };
  double diff = 0.0, norm = 0.0;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    for (std::size_t k = 0; k < model.params[i].value.size(); ++k) {
      EnsembleModel up = model, down = model;
      const double h = 1e-6;
      up.params[i].value.data()[k] += h;
      down.params[i].value.data()[k] -= h;
      const double g = (loss_at(up) - loss_at(down)) / (2 * h);
      const double expected = -cfg.learning_rate * g / (std::abs(g) + cfg.adam_eps);
      const double actual = r.model.params[i].value.data()[k] - model.params[i].value.data()[k];
      diff += std::pow(actual - expected, 2);
      norm += expected * expected;
    }
  }
  EXPECT_LT(std::sqrt(diff / norm), 1e-3);
}

TEST(Train, SeparableBlobsReachFullTrainAccuracy) {
  BlobSpec blobs;
  blobs.classes = 2;
  blobs.dim = 8;
  blobs.per_class = 100;
  blobs.spread = 0.05;
  const Dataset ds = make_blobs(blobs);
  const EnsembleModel model = init_ensemble(MlpSpec{{8, 16, 2}, Activation::relu},
                                            SharingScheme::independent(), 2, 1);
  TrainConfig cfg = fast_config();
  cfg.epochs = 50;
  const TrainResult r = train(model, ds, ds, cfg);
  EXPECT_GE(accuracy(forward_all(r.model, ds.inputs).mean_prob, ds.labels), 0.99);
}

TEST(Train, SameSeedIsBitIdentical) {
  const SmallTask task = small_task();
  const EnsembleModel model = init_ensemble(task.spec, SharingScheme::tree_split(1), 3, 2);
  TrainConfig cfg = fast_config();
  cfg.reg = RegularizerSpec::with_defaults(RegKind::sample_diversity);
  const TrainResult a = train(model, task.split.train, task.split.val, cfg);
  const TrainResult b = train(model, task.split.train, task.split.val, cfg);
  EXPECT_EQ(a.trace.step_losses, b.trace.step_losses);
  for (std::size_t i = 0; i < a.model.params.size(); ++i)
    EXPECT_EQ(a.model.params[i].value, b.model.params[i].value);
}

TEST(Train, WarmupRecordsRegScoreOnlyInWarmupEpochs) {
  const SmallTask task = small_task();
  const EnsembleModel model = init_ensemble(task.spec, SharingScheme::independent(), 3, 2);
  TrainConfig cfg = fast_config();
  cfg.reg = RegularizerSpec::with_defaults(RegKind::sample_diversity);
  cfg.warmup_only_epochs = 3;
  const TrainResult r = train(model, task.split.train, task.split.val, cfg);
  ASSERT_EQ(r.trace.epochs.size(), 5u);
  for (const auto& e : r.trace.epochs) EXPECT_EQ(e.reg_score.has_value(), e.epoch <= 3);
  const std::string csv = r.trace.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,loss,ce,reg_score,val_acc,val_nll");
}

TEST(Train, ResumeFromCheckpointIsBitExact) {
  const SmallTask task = small_task();
  const EnsembleModel model = init_ensemble(task.spec, SharingScheme::rank1_factorized(), 3, 2);
  TrainConfig cfg = fast_config();
  cfg.reg = RegularizerSpec::with_defaults(RegKind::sample_diversity);
  std::optional<TrainCheckpoint> mid;
  TrainOptions opts;
  opts.on_epoch_end = [&](const TrainCheckpoint& c) {
    if (c.epochs_completed == 2) mid = c;
  };
  const TrainResult full = train(model, task.split.train, task.split.val, cfg, opts);
  ASSERT_TRUE(mid);

  const auto path = std::filesystem::temp_directory_path() / "divens_resume_test.txt";
  mid->save(path.string());
  TrainOptions resume;
  resume.resume_from = TrainCheckpoint::load(path.string());
  std::filesystem::remove(path);
  const TrainResult rest = train(model, task.split.train, task.split.val, cfg, resume);

  const auto& a = full.trace.step_losses;
  const auto& b = rest.trace.step_losses;
  ASSERT_EQ(b.size() * 5, a.size() * 3);
  EXPECT_EQ(0, std::memcmp(a.data() + (a.size() - b.size()), b.data(), b.size() * sizeof(double)));
  for (std::size_t i = 0; i < full.model.params.size(); ++i)
    EXPECT_EQ(full.model.params[i].value, rest.model.params[i].value);
  EXPECT_EQ(rest.adam.step, full.adam.step);
}

TEST(Train, DivergenceReportsTheStep) {
  const SmallTask task = small_task();
  const EnsembleModel model = init_ensemble(task.spec, SharingScheme::independent(), 2, 2);
  TrainConfig cfg = fast_config();
  cfg.learning_rate = 1e300;
  try {
    train(model, task.split.train, task.split.val, cfg);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    // Step 0 is finite; the first update overflows the next forward pass.
    EXPECT_EQ(e.step(), 1u);
  }
}

TEST(Train, EarlyStoppingRestoresBestEpoch) {
  const SmallTask task = small_task(3.0);
  const EnsembleModel model = init_ensemble(task.spec, SharingScheme::independent(), 2, 2);
  TrainConfig cfg = fast_config();
  cfg.epochs = 200;
  cfg.learning_rate = 1e-2;
  cfg.patience = 3;
  const TrainResult r = train(model, task.split.train, task.split.val, cfg);
  ASSERT_TRUE(r.trace.early_stopped);
  const auto& best = r.trace.epochs[r.trace.best_epoch - 1];
  const EnsemblePrediction p = forward_all(r.model, task.split.val.inputs);
  EXPECT_EQ(nll(p.mean_prob, task.split.val.labels), best.val_nll);
  for (const auto& e : r.trace.epochs) EXPECT_GE(e.val_nll, best.val_nll);
}

TEST(Train, RejectsIncompatibleData) {
  const SmallTask task = small_task();
  const EnsembleModel model = init_ensemble(MlpSpec{{5, 4, 4}, Activation::relu},
                                            SharingScheme::independent(), 2, 2);
  EXPECT_THROW(train(model, task.split.train, task.split.val, fast_config()), ConfigError);
  TrainConfig bad = fast_config();
  bad.learning_rate = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

double spearman(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> rank(n);
  for (std::size_t r = 0; r < n; ++r) rank[idx[r]] = static_cast<double>(r);
  double d2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) d2 += std::pow(rank[i] - static_cast<double>(i), 2);
  return 1.0 - 6.0 * d2 / (static_cast<double>(n) * (static_cast<double>(n * n) - 1.0));
}

TEST(Train, SampleDiversityScoreTrendsUpward) {
  const SmallTask task = small_task();
  std::vector<double> epoch_mean(10, 0.0);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const EnsembleModel model = init_ensemble(task.spec, SharingScheme::tree_split(1), 3, seed);
    TrainConfig cfg = fast_config();
    cfg.epochs = 10;
    cfg.seed = seed;
    cfg.reg = RegularizerSpec::with_defaults(RegKind::sample_diversity);
    const TrainResult r = train(model, task.split.train, task.split.val, cfg);
    for (std::size_t e = 0; e < 10; ++e) epoch_mean[e] += *r.trace.epochs[e].reg_score / 5.0;
  }
  EXPECT_GT(spearman(epoch_mean), 0.0);
}

TEST(Evaluate, CellAccountingAndCleanAccuracy) {
  const SmallTask task = small_task();
  const EnsembleModel model = init_ensemble(task.spec, SharingScheme::independent(), 2, 2);
  const TrainResult r = train(model, task.split.train, task.split.val, fast_config());
  EvalConfig ec;
  ec.ece_bins = 10;
  const std::vector<OodSet> ood{{"uniform", sample_uniform_ood(8, 50, 1)}};
  const auto reports = evaluate(r.model, task.split.test, ec, ood);
  ASSERT_EQ(reports.size(), 1 + all_corruptions().size() * 5 + 1);
  EXPECT_EQ(reports.front().cell, "clean");
  EXPECT_EQ(reports[1].cell, "gaussian_noise:1");
  EXPECT_EQ(reports.back().cell, "ood:uniform");
  EXPECT_TRUE(reports.back().auc_roc.has_value());
  EXPECT_TRUE(std::isnan(reports.back().accuracy));
  EXPECT_EQ(reports.front().accuracy,
            accuracy(forward_all(r.model, task.split.test.inputs).mean_prob,
                     task.split.test.labels));
}

}  // namespace
}  // namespace divens
