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

#include "divens/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "divens/errors.hpp"
#include "divens/rng.hpp"

namespace divens {

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw ConfigError(std::string("train.") + name + " must be positive");
    }
  };
  positive(learning_rate, "learning_rate");
  positive(adam_eps, "adam_eps");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw ConfigError("train.weight_decay must be >= 0");
  }
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("train.adam_beta1 and adam_beta2 must lie in [0, 1)");
  }
  if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  if (epochs == 0) throw ConfigError("train.epochs must be >= 1");
  if (ood_batch_size && *ood_batch_size == 0) {
    throw ConfigError("train.ood_batch_size must be >= 1");
  }
  if (fgsm_epsilon && !(*fgsm_epsilon >= 0.0)) {
    throw ConfigError("train.fgsm_epsilon must be >= 0");
  }
}

bool TrainConfig::regularize_epoch(std::size_t epoch) const {
  if (!reg.active()) return false;
  return !warmup_only_epochs || epoch < *warmup_only_epochs;
}

AdamState AdamState::zeros_like(const EnsembleModel& model) {
  AdamState s;
  for (const auto& p : model.params) {
    s.m.emplace_back(p.value.rows(), p.value.cols());
    s.v.emplace_back(p.value.rows(), p.value.cols());
  }
  return s;
}

void adam_step(std::span<Matrix> params, std::span<const Matrix> grads, AdamState& state,
               const TrainConfig& cfg, std::span<const double> decay_scale) {
  if (grads.size() != params.size() || state.m.size() != params.size() ||
      state.v.size() != params.size() || (!decay_scale.empty() && decay_scale.size() != params.size())) {
    throw ShapeError("adam_step: parameter, gradient and state counts differ");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double b1 = cfg.adam_beta1;
  const double b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = params[i];
    if (!p.same_shape(grads[i]) || !p.same_shape(state.m[i]) || !p.same_shape(state.v[i])) {
      throw ShapeError("adam_step: shape mismatch for tensor " + std::to_string(i));
    }
    const double wd = cfg.weight_decay * (decay_scale.empty() ? 1.0 : decay_scale[i]);
    auto pv = p.data();
    auto gv = grads[i].data();
    auto mv = state.m[i].data();
    auto vv = state.v[i].data();
    for (std::size_t k = 0; k < pv.size(); ++k) {
      double g = gv[k];
      if (!cfg.decoupled_weight_decay) g += wd * pv[k];
      mv[k] = b1 * mv[k] + (1.0 - b1) * g;
      vv[k] = b2 * vv[k] + (1.0 - b2) * g * g;
      const double mhat = mv[k] / c1;
      const double vhat = vv[k] / c2;
      double next = pv[k] - cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
      if (cfg.decoupled_weight_decay) next -= cfg.learning_rate * wd * pv[k];
      pv[k] = next;
    }
  }
}

void adam_step(EnsembleModel& model, std::span<const Matrix> grads, AdamState& state,
               const TrainConfig& cfg) {
  std::vector<Matrix> values;
  values.reserve(model.params.size());
  std::vector<double> decay_scale;
  for (auto& p : model.params) {
    values.push_back(std::move(p.value));
    const bool factor = p.role == ParamRole::rank1_r || p.role == ParamRole::rank1_s;
    decay_scale.push_back(factor && !cfg.decay_rank1_factors ? 0.0 : 1.0);
  }
  try {
    adam_step(values, grads, state, cfg, decay_scale);
  } catch (...) {
    for (std::size_t i = 0; i < values.size(); ++i) model.params[i].value = std::move(values[i]);
    throw;
  }
  for (std::size_t i = 0; i < values.size(); ++i) model.params[i].value = std::move(values[i]);
}

namespace {

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

std::string TrainTrace::to_csv() const {
  std::ostringstream out;
  out << "epoch,loss,ce,reg_score,val_acc,val_nll\n";
  for (const auto& e : epochs) {
    out << e.epoch << ',' << fmt6(e.loss) << ',' << fmt6(e.ce) << ','
        << (e.reg_score ? fmt6(*e.reg_score) : std::string()) << ',' << fmt6(e.val_accuracy)
        << ',' << fmt6(e.val_nll) << '\n';
  }
  return out.str();
}

void TrainTrace::write_csv(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write trace file " + path);
  f << to_csv();
}

TensorArchive TrainCheckpoint::to_archive() const {
  TensorArchive ar = checkpoint_archive(model);
  ar.set("epochs_completed", std::to_string(epochs_completed));
  ar.set("adam_step", std::to_string(adam.step));
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    ar.tensors.emplace_back("adam.m." + model.params[i].name, adam.m[i]);
    ar.tensors.emplace_back("adam.v." + model.params[i].name, adam.v[i]);
  }
  return ar;
}

TrainCheckpoint TrainCheckpoint::from_archive(const TensorArchive& ar) {
  TrainCheckpoint ck;
  ck.model = model_from_archive(ar, /*exact=*/false);
  ck.epochs_completed = std::stoul(ar.require("epochs_completed"));
  ck.adam.step = std::stoull(ar.require("adam_step"));
  for (const auto& p : ck.model.params) {
    const Matrix* m = ar.tensor("adam.m." + p.name);
    const Matrix* v = ar.tensor("adam.v." + p.name);
    if (!m || !v || !m->same_shape(p.value) || !v->same_shape(p.value)) {
      throw FormatError("training checkpoint lacks Adam moments for '" + p.name + "'", 0);
    }
    ck.adam.m.push_back(*m);
    ck.adam.v.push_back(*v);
  }
  return ck;
}

void TrainCheckpoint::save(const std::string& path) const { to_archive().save(path); }

TrainCheckpoint TrainCheckpoint::load(const std::string& path) {
  return from_archive(TensorArchive::load(path));
}

StepLoss step_loss(const BoundModel& bound, const Matrix& x, std::span<const int> labels,
                   const RegularizerSpec* reg, const Matrix* ood, CeMode mode) {
  ad::Tape& tape = bound.params.front().tape();
  EnsembleVars out = forward(bound, tape.constant(x));
  StepLoss s;
  s.ce = cross_entropy(out, labels, mode);
  s.loss = s.ce;
  if (reg && reg->active()) {
    RegInputs in;
    in.bound = &bound;
    in.id_out = &out;
    in.labels = labels;
    if (ood) in.ood_batch = tape.constant(*ood);
    RegTerm term = regularization_term(*reg, in);
    s.loss = ad::sub(s.ce, term.weighted);
    s.reg_score = term.raw;
  }
  return s;
}

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng(seed).split("shuffle").split(static_cast<std::uint64_t>(epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

void check_compatible(const EnsembleModel& model, const Dataset& ds, const char* which) {
  if (ds.size() == 0) return;
  if (ds.classes != model.spec.classes()) {
    throw ConfigError(std::string(which) + " dataset has " + std::to_string(ds.classes) +
                      " classes but the model predicts " +
                      std::to_string(model.spec.classes()));
  }
  if (ds.dim() != model.spec.input_dim()) {
    throw ConfigError(std::string(which) + " dataset has dimension " +
                      std::to_string(ds.dim()) + " but the model expects " +
                      std::to_string(model.spec.input_dim()));
  }
}

}  // namespace

TrainResult train(EnsembleModel model, const Dataset& train_ds, const Dataset& val_ds,
                  const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  if (train_ds.size() == 0) throw ConfigError("training dataset is empty");
  check_compatible(model, train_ds, "training");
  check_compatible(model, val_ds, "validation");
  cfg.reg.validate(model);

  TrainResult result;
  std::size_t start_epoch = 0;
  if (options.resume_from) {
    result.model = options.resume_from->model;
    result.adam = options.resume_from->adam;
    start_epoch = options.resume_from->epochs_completed;
  } else {
    result.model = std::move(model);
    result.adam = AdamState::zeros_like(result.model);
  }
  EnsembleModel& net = result.model;
  const std::size_t n = train_ds.size();
  const std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const bool fgsm = cfg.fgsm_epsilon && *cfg.fgsm_epsilon > 0.0;

  double best_nll = std::numeric_limits<double>::infinity();
  std::vector<Matrix> best_params;
  std::size_t since_best = 0;

  for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const bool reg_on = cfg.regularize_epoch(epoch);
    const std::vector<std::size_t> order = epoch_order(n, cfg.seed, epoch);
    double loss_sum = 0.0;
    double ce_sum = 0.0;
    double reg_sum = 0.0;

    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t step = epoch * batches + b;
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(n, lo + cfg.batch_size);
      Matrix x(hi - lo, train_ds.dim());
      std::vector<int> y(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) {
        auto src = train_ds.inputs.row(order[i]);
        std::copy(src.begin(), src.end(), x.row(i - lo).begin());
        y[i - lo] = train_ds.labels[order[i]];
      }

      std::optional<Matrix> ood;
      if (reg_on && cfg.reg.needs_ood()) {
        Rng rng = Rng(cfg.seed).split("ood").split(static_cast<std::uint64_t>(step));
        ood = sample_uniform_ood(train_ds.dim(), cfg.effective_ood_batch(), rng);
        if (fgsm) ood = fgsm_perturb(net, cfg.reg, *ood, *cfg.fgsm_epsilon);
      }

      ad::Tape tape;
      BoundModel bound = bind(tape, net);
      std::optional<StepLoss> s;
      double loss = 0.0;
      try {
        s = step_loss(bound, x, y, reg_on ? &cfg.reg : nullptr, ood ? &*ood : nullptr,
                      cfg.ce_mode);
        loss = s->loss.value().item();
        if (std::isfinite(loss)) tape.backward(s->loss);
      } catch (const NumericalError&) {
        // Overflow inside the forward or backward pass.
        throw DivergenceError(step);
      }
      if (!std::isfinite(loss)) throw DivergenceError(step);

      std::vector<Matrix> grads;
      grads.reserve(bound.params.size());
      for (const auto& p : bound.params) grads.push_back(p.grad());
      adam_step(net, grads, result.adam, cfg);
      for (const auto& p : net.params)
        if (!all_finite(p.value)) throw DivergenceError(step);

      result.trace.step_losses.push_back(loss);
      loss_sum += loss;
      ce_sum += s->ce.value().item();
      if (s->reg_score) reg_sum += *s->reg_score;
    }

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.loss = loss_sum / static_cast<double>(batches);
    rec.ce = ce_sum / static_cast<double>(batches);
    if (reg_on) rec.reg_score = reg_sum / static_cast<double>(batches);
    if (val_ds.size() > 0) {
      EnsemblePrediction pred = forward_all(net, val_ds.inputs);
      rec.val_accuracy = accuracy(pred.mean_prob, val_ds.labels);
      rec.val_nll = nll(pred.mean_prob, val_ds.labels);
    } else {
      rec.val_accuracy = std::numeric_limits<double>::quiet_NaN();
      rec.val_nll = std::numeric_limits<double>::quiet_NaN();
    }
    result.trace.epochs.push_back(rec);
    result.epochs_completed = epoch + 1;

    if (options.on_epoch_end) {
      options.on_epoch_end(TrainCheckpoint{net, result.adam, result.epochs_completed});
    }

    if (cfg.patience > 0 && val_ds.size() > 0) {
      if (rec.val_nll < best_nll) {
        best_nll = rec.val_nll;
        result.trace.best_epoch = rec.epoch;
        best_params.clear();
        for (const auto& p : net.params) best_params.push_back(p.value);
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        result.trace.early_stopped = true;
        break;
      }
    }
  }

  if (result.trace.early_stopped) {
    for (std::size_t i = 0; i < best_params.size(); ++i) net.params[i].value = best_params[i];
  } else if (result.trace.best_epoch == 0 && !result.trace.epochs.empty()) {
    result.trace.best_epoch = result.trace.epochs.back().epoch;
  }
  return result;
}

EvalReport evaluate_cell(const EnsembleModel& model, const Dataset& ds,
                         const std::string& cell, const EvalConfig& cfg) {
  EnsemblePrediction pred = forward_all(model, ds.inputs);
  EvalReport r;
  r.cell = cell;
  r.accuracy = accuracy(pred.mean_prob, ds.labels);
  const std::size_t folds = std::min(cfg.temperature_folds, ds.size());
  TemperatureFit fit = fit_temperature(pred.logits, ds.labels, folds, cfg.temperature_path);
  r.temperature = fit.temperature;
  r.nll = nll(fit.held_out_probs, ds.labels);
  r.ece = ece(fit.held_out_probs, ds.labels, cfg.ece_bins);
  r.mean_entropy = mean_entropy(pred.mean_prob);
  r.jsd = jsd(pred.probs, pred.mean_prob);
  r.oracle_nll = oracle_nll(pred.probs, ds.labels);
  r.disagreement = disagreement_matrix(pred.probs);
  return r;
}

std::vector<EvalReport> evaluate(const EnsembleModel& model, const Dataset& test_ds,
                                 const EvalConfig& cfg, std::span<const OodSet> ood_sets) {
  if (test_ds.size() == 0) throw ConfigError("evaluation dataset is empty");
  check_compatible(model, test_ds, "evaluation");
  std::vector<EvalReport> out;
  out.push_back(evaluate_cell(model, test_ds, "clean", cfg));

  for (CorruptionFamily kind : cfg.corruptions) {
    for (int level : cfg.levels) {
      const std::uint64_t seed = Rng(cfg.corruption_seed)
                                     .split(to_string(kind))
                                     .split(static_cast<std::uint64_t>(level))
                                     .next_u64();
      Dataset shifted = corrupt(test_ds, Corruption{kind, level, std::nullopt}, seed);
      out.push_back(evaluate_cell(model, shifted, to_string(kind) + ":" + std::to_string(level),
                                  cfg));
    }
  }

  if (!ood_sets.empty()) {
    const Matrix id_mean = forward_all(model, test_ds.inputs).mean_prob;
    for (const OodSet& set : ood_sets) {
      if (set.inputs.cols() != model.spec.input_dim()) {
        throw ConfigError("OOD set '" + set.name + "' has the wrong input dimension");
      }
      EnsemblePrediction pred = forward_all(model, set.inputs);
      EvalReport r;
      r.cell = "ood:" + set.name;
      const double nan = std::numeric_limits<double>::quiet_NaN();
      r.accuracy = r.nll = r.ece = r.temperature = r.oracle_nll = nan;
      r.auc_roc = auc_roc(id_mean, pred.mean_prob);
      r.mean_entropy = mean_entropy(pred.mean_prob);
      r.jsd = jsd(pred.probs, pred.mean_prob);
      r.disagreement = disagreement_matrix(pred.probs);
      out.push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace divens
