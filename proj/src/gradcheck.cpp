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

#include "divens/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "divens/ensemble.hpp"
#include "divens/errors.hpp"
#include "divens/regularizers.hpp"
#include "divens/rng.hpp"
#include "divens/training.hpp"

namespace divens {

std::vector<Matrix> autodiff_gradient(const ScalarFn& f, std::span<const Matrix> inputs) {
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  leaves.reserve(inputs.size());
  for (const auto& m : inputs) leaves.push_back(tape.parameter(m));
  ad::Var out = f(tape, leaves);
  tape.backward(out);
  std::vector<Matrix> grads;
  for (const auto& v : leaves) grads.push_back(v.grad());
  return grads;
}

namespace {

double evaluate(const ScalarFn& f, std::span<const Matrix> inputs) {
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  for (const auto& m : inputs) leaves.push_back(tape.constant(m));
  return f(tape, leaves).value().item();
}

}  // namespace

std::vector<Matrix> numeric_gradient(const ScalarFn& f, std::span<const Matrix> inputs,
                                     double h) {
  std::vector<Matrix> work(inputs.begin(), inputs.end());
  std::vector<Matrix> grads;
  for (std::size_t i = 0; i < work.size(); ++i) {
    Matrix g(work[i].rows(), work[i].cols());
    for (std::size_t k = 0; k < work[i].size(); ++k) {
      const double orig = work[i].data()[k];
      work[i].data()[k] = orig + h;
      const double up = evaluate(f, work);
      work[i].data()[k] = orig - h;
      const double down = evaluate(f, work);
      work[i].data()[k] = orig;
      g.data()[k] = (up - down) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

double gradcheck_relative_error(const ScalarFn& f, std::span<const Matrix> inputs, double h) {
  const std::vector<Matrix> ga = autodiff_gradient(f, inputs);
  const std::vector<Matrix> gn = numeric_gradient(f, inputs, h);
  double diff = 0.0;
  double na = 0.0;
  double nn = 0.0;
  for (std::size_t i = 0; i < ga.size(); ++i) {
    for (std::size_t k = 0; k < ga[i].size(); ++k) {
      const double a = ga[i].data()[k];
      const double n = gn[i].data()[k];
      diff += (a - n) * (a - n);
      na += a * a;
      nn += n * n;
    }
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
}

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, double scale, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data()) v = scale * rng.normal();
  return m;
}

std::vector<int> random_labels(std::size_t n, std::size_t classes, Rng& rng) {
  std::vector<int> y(n);
  for (int& v : y) v = static_cast<int>(rng.below(classes));
  return y;
}

std::vector<ad::Var> softmax_all(std::span<const ad::Var> logits) {
  std::vector<ad::Var> out;
  for (const auto& z : logits) out.push_back(ad::softmax_rows(z));
  return out;
}

// Member logits as leaves, probabilities through softmax so they stay on the
// simplex under perturbation.
using ProbScore = std::function<ad::Var(std::span<const ad::Var>)>;

double check_prob_score(const ProbScore& score, std::size_t members, std::size_t batch,
                        std::size_t classes, Rng& rng) {
  std::vector<Matrix> logits;
  for (std::size_t m = 0; m < members; ++m)
    logits.push_back(random_matrix(batch, classes, 1.5, rng));
  ScalarFn f = [&](ad::Tape&, std::span<const ad::Var> leaves) {
    return score(softmax_all(leaves));
  };
  return gradcheck_relative_error(f, logits);
}

const SharingScheme kSchemes[] = {SharingScheme::independent(), SharingScheme::tree_split(1),
                                  SharingScheme::rank1_factorized()};

EnsembleModel small_model(std::size_t instance, std::uint64_t seed) {
  MlpSpec spec{{5, 6, 6, 6}, Activation::tanh};
  return init_ensemble(spec, kSchemes[instance % 3], 3, seed);
}

// Parameters (and optionally an extra input matrix) as leaves of `body`.
double check_model(const EnsembleModel& model, std::vector<Matrix> extra,
                   const std::function<ad::Var(const BoundModel&, std::span<const ad::Var>)>& body) {
  std::vector<Matrix> inputs;
  for (const auto& p : model.params) inputs.push_back(p.value);
  const std::size_t n_params = inputs.size();
  for (auto& m : extra) inputs.push_back(std::move(m));
  ScalarFn f = [&](ad::Tape&, std::span<const ad::Var> leaves) {
    BoundModel bound;
    bound.model = &model;
    bound.params.assign(leaves.begin(), leaves.begin() + static_cast<std::ptrdiff_t>(n_params));
    return body(bound, leaves.subspan(n_params));
  };
  return gradcheck_relative_error(f, inputs);
}

Matrix uniform_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data()) v = rng.uniform();
  return m;
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(std::size_t instances, std::uint64_t seed,
                                               double tolerance) {
  using Clock = std::chrono::steady_clock;
  struct Entry {
    std::string name;
    std::function<double(std::size_t, Rng&)> run;
  };
  const std::vector<Entry> entries = {
      {"neg_corr",
       [](std::size_t, Rng& rng) {
         return check_prob_score([](auto p) { return neg_corr(p); }, 3, 4, 5, rng);
       }},
      {"chi2",
       [](std::size_t i, Rng& rng) {
         const bool literal = i % 2 == 1;
         return check_prob_score([=](auto p) { return chi2_diversity(p, literal); }, 3, 4, 5,
                                 rng);
       }},
      {"adp",
       [](std::size_t i, Rng& rng) {
         const std::vector<int> labels = random_labels(4, 6, rng);
         const bool chi2 = i % 4 == 3;
         return check_prob_score(
             [&](auto p) { return adp(p, labels, 0.125, 0.5, kDefaultGramJitter, chi2); }, 3, 4,
             6, rng);
       }},
      {"sample_diversity",
       [seed](std::size_t i, Rng& rng) {
         const EnsembleModel model = small_model(i, seed + i);
         Matrix ood = uniform_matrix(4, 5, rng);
         return check_model(model, {ood}, [](const BoundModel& b, std::span<const ad::Var> x) {
           return sample_diversity(b, x[0]);
         });
       }},
      {"weight_cos",
       [seed](std::size_t i, Rng&) {
         const EnsembleModel model = small_model(i, seed + i);
         return check_model(model, {}, [](const BoundModel& b, std::span<const ad::Var>) {
           return weight_cos(b);
         });
       }},
      {"total_loss",
       [seed](std::size_t i, Rng& rng) {
         const EnsembleModel model = small_model(i, seed + i);
         const RegKind kinds[] = {RegKind::sample_diversity, RegKind::adp, RegKind::neg_corr,
                                  RegKind::chi2, RegKind::weight_cos};
         RegularizerSpec reg = RegularizerSpec::with_defaults(kinds[i % 5]);
         if (reg.kind == RegKind::neg_corr) reg.lambda = 0.5;
         const CeMode mode = (i / 5) % 2 == 0 ? CeMode::per_member : CeMode::mean_prob;
         const Matrix x = uniform_matrix(6, 5, rng);
         const std::vector<int> y = random_labels(6, 6, rng);
         const Matrix ood = uniform_matrix(6, 5, rng);
         return check_model(model, {}, [&](const BoundModel& b, std::span<const ad::Var>) {
           return step_loss(b, x, y, &reg, &ood, mode).loss;
         });
       }},
  };

  std::vector<GradCheckCase> out;
  const Rng root(seed);
  for (const auto& e : entries) {
    GradCheckCase c;
    c.name = e.name;
    const auto start = Clock::now();
    Rng rng = root.split(e.name);
    for (std::size_t i = 0; i < instances; ++i) {
      const double err = e.run(i, rng);
      c.instances += 1;
      if (err < tolerance) c.passed += 1;
      c.max_relative_error = std::max(c.max_relative_error, std::isfinite(err) ? err : INFINITY);
    }
    c.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace divens
