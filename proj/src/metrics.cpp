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

#include "divens/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "divens/errors.hpp"
#include "divens/regularizers.hpp"

namespace divens {

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < row.size(); ++k)
    if (row[k] > row[best]) best = k;
  return best;
}

namespace {

void require_labels(const Matrix& probs, std::span<const int> labels, const char* who) {
  if (probs.rows() != labels.size()) {
    throw ShapeError(std::string(who) + ": " + std::to_string(probs.rows()) +
                     " rows but " + std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw UsageError(std::string(who) + ": empty batch");
}

std::size_t label_at(std::span<const int> labels, std::size_t i, std::size_t classes) {
  const int y = labels[i];
  if (y < 0 || static_cast<std::size_t>(y) >= classes) {
    throw ShapeError("label " + std::to_string(y) + " out of range");
  }
  return static_cast<std::size_t>(y);
}

}  // namespace

double accuracy(const Matrix& mean_probs, std::span<const int> labels) {
  require_labels(mean_probs, labels, "accuracy");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (argmax(mean_probs.row(i)) == label_at(labels, i, mean_probs.cols())) ++correct;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double nll(const Matrix& probs, std::span<const int> labels) {
  require_labels(probs, labels, "nll");
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    total -= std::log(std::max(probs(i, label_at(labels, i, probs.cols())), kProbFloor));
  return total / static_cast<double>(labels.size());
}

std::vector<ReliabilityBin> reliability_bins(const Matrix& probs, std::span<const int> labels,
                                             std::size_t bins) {
  require_labels(probs, labels, "ece");
  if (bins < 1) throw UsageError("ece: bins must be >= 1");
  std::vector<ReliabilityBin> out(bins);
  std::vector<double> conf_sum(bins, 0.0);
  std::vector<double> hit_sum(bins, 0.0);
  for (std::size_t b = 0; b < bins; ++b) {
    out[b].lower = static_cast<double>(b) / static_cast<double>(bins);
    out[b].upper = static_cast<double>(b + 1) / static_cast<double>(bins);
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto row = probs.row(i);
    const std::size_t pred = argmax(row);
    const double conf = row[pred];
    // Bin b covers (b/bins, (b+1)/bins].
    auto b = static_cast<std::size_t>(std::ceil(conf * static_cast<double>(bins)));
    // conf * bins can round up past an exact edge (0.8 * 100 > 80).
    if (b > 1 && static_cast<double>(b - 1) / static_cast<double>(bins) >= conf) --b;
    b = std::clamp<std::size_t>(b, 1, bins) - 1;
    out[b].count += 1;
    conf_sum[b] += conf;
    hit_sum[b] += pred == label_at(labels, i, probs.cols()) ? 1.0 : 0.0;
  }
  for (std::size_t b = 0; b < bins; ++b) {
    if (out[b].count == 0) continue;
    out[b].accuracy = hit_sum[b] / static_cast<double>(out[b].count);
    out[b].confidence = conf_sum[b] / static_cast<double>(out[b].count);
  }
  return out;
}

double ece(const Matrix& probs, std::span<const int> labels, std::size_t bins) {
  const auto table = reliability_bins(probs, labels, bins);
  double total = 0.0;
  for (const auto& b : table) {
    if (b.count == 0) continue;
    total += static_cast<double>(b.count) * std::abs(b.accuracy - b.confidence);
  }
  return total / static_cast<double>(labels.size());
}

std::vector<double> confidences(const Matrix& probs) {
  std::vector<double> out(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    auto row = probs.row(i);
    out[i] = *std::max_element(row.begin(), row.end());
  }
  return out;
}

double auc_roc(std::span<const double> id_scores, std::span<const double> ood_scores) {
  if (id_scores.empty() || ood_scores.empty()) {
    throw UsageError("auc_roc: both score sets must be non-empty");
  }
  // Midranks over the pooled sample; U = R_pos - n_pos (n_pos + 1) / 2.
  struct Entry {
    double score;
    bool positive;
  };
  std::vector<Entry> pooled;
  pooled.reserve(id_scores.size() + ood_scores.size());
  for (double s : id_scores) pooled.push_back({s, true});
  for (double s : ood_scores) pooled.push_back({s, false});
  std::sort(pooled.begin(), pooled.end(),
            [](const Entry& a, const Entry& b) { return a.score < b.score; });
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < pooled.size()) {
    std::size_t j = i;
    while (j < pooled.size() && pooled[j].score == pooled[i].score) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (pooled[k].positive) rank_sum += midrank;
    i = j;
  }
  const auto n_pos = static_cast<double>(id_scores.size());
  const auto n_neg = static_cast<double>(ood_scores.size());
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

double auc_roc(const Matrix& id_mean_probs, const Matrix& ood_mean_probs) {
  const auto id = confidences(id_mean_probs);
  const auto ood = confidences(ood_mean_probs);
  return auc_roc(id, ood);
}

double jsd(std::span<const Matrix> member_probs, const Matrix& mean_prob) {
  if (member_probs.empty()) throw UsageError("jsd: no members");
  double total = 0.0;
  for (const Matrix& p : member_probs) {
    if (!p.same_shape(mean_prob)) throw ShapeError("jsd: member shape mismatch");
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::size_t k = 0; k < p.cols(); ++k) {
        const double y = p(i, k);
        if (y > 0.0) total += y * std::log(y / std::max(mean_prob(i, k), 1e-300));
      }
  }
  return total / static_cast<double>(member_probs.size() * mean_prob.rows());
}

double oracle_nll(std::span<const Matrix> member_probs, std::span<const int> labels) {
  if (member_probs.empty()) throw UsageError("oracle_nll: no members");
  require_labels(member_probs[0], labels, "oracle_nll");
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t y = label_at(labels, i, member_probs[0].cols());
    double best = 0.0;
    for (const Matrix& p : member_probs) best = std::max(best, p(i, y));
    total -= std::log(std::max(best, kProbFloor));
  }
  return total / static_cast<double>(labels.size());
}

Matrix disagreement_matrix(std::span<const Matrix> member_probs) {
  const std::size_t m = member_probs.size();
  if (m < 1) throw UsageError("disagreement_matrix: no members");
  const std::size_t n = member_probs[0].rows();
  std::vector<std::vector<std::size_t>> preds(m, std::vector<std::size_t>(n));
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t i = 0; i < n; ++i) preds[j][i] = argmax(member_probs[j].row(i));
  Matrix out(m, m);
  if (n == 0) return out;
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = a + 1; b < m; ++b) {
      std::size_t diff = 0;
      for (std::size_t i = 0; i < n; ++i) diff += preds[a][i] != preds[b][i];
      out(a, b) = out(b, a) = static_cast<double>(diff) / static_cast<double>(n);
    }
  return out;
}

double mean_entropy(const Matrix& probs) {
  if (probs.rows() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < probs.rows(); ++i) total += entropy(probs.row(i));
  return total / static_cast<double>(probs.rows());
}

std::string to_string(TemperaturePath p) {
  return p == TemperaturePath::logit_mean ? "logit_mean" : "prob_mean";
}

TemperaturePath parse_temperature_path(const std::string& text) {
  if (text == "logit_mean") return TemperaturePath::logit_mean;
  if (text == "prob_mean") return TemperaturePath::prob_mean;
  throw ConfigError("unknown temperature path '" + text + "'");
}

namespace {

void softmax_row_into(std::span<const double> z, double inv_t, std::span<double> out) {
  double mx = z[0] * inv_t;
  for (double v : z) mx = std::max(mx, v * inv_t);
  double total = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    out[k] = std::exp(z[k] * inv_t - mx);
    total += out[k];
  }
  for (double& v : out) v /= total;
}

void check_logits(std::span<const Matrix> member_logits, std::span<const int> labels) {
  if (member_logits.empty()) throw UsageError("temperature: no logits");
  for (const Matrix& z : member_logits) {
    if (!all_finite(z)) throw NumericalError("temperature scaling on non-finite logits");
    if (!z.same_shape(member_logits[0])) throw ShapeError("temperature: member shape mismatch");
  }
  require_labels(member_logits[0], labels, "temperature");
}

// Scaled prediction for one row.
void scaled_row(std::span<const Matrix> member_logits, std::size_t i, double temperature,
                TemperaturePath path, std::vector<double>& out, std::vector<double>& work) {
  const std::size_t c = member_logits[0].cols();
  const double inv_t = 1.0 / temperature;
  const auto m = static_cast<double>(member_logits.size());
  out.assign(c, 0.0);
  if (path == TemperaturePath::logit_mean) {
    work.assign(c, 0.0);
    for (const Matrix& z : member_logits)
      for (std::size_t k = 0; k < c; ++k) work[k] += z(i, k) / m;
    softmax_row_into(work, inv_t, out);
  } else {
    work.resize(c);
    for (const Matrix& z : member_logits) {
      softmax_row_into(z.row(i), inv_t, work);
      for (std::size_t k = 0; k < c; ++k) out[k] += work[k] / m;
    }
  }
}

}  // namespace

Matrix scaled_probs(std::span<const Matrix> member_logits, double temperature,
                    TemperaturePath path) {
  if (member_logits.empty()) throw UsageError("scaled_probs: no logits");
  const Matrix& first = member_logits[0];
  Matrix out(first.rows(), first.cols());
  std::vector<double> row, work;
  for (std::size_t i = 0; i < first.rows(); ++i) {
    scaled_row(member_logits, i, temperature, path, row, work);
    std::copy(row.begin(), row.end(), out.row(i).begin());
  }
  return out;
}

double nll_at_temperature(std::span<const Matrix> member_logits, std::span<const int> labels,
                          double temperature, TemperaturePath path,
                          std::span<const std::size_t> rows) {
  std::vector<double> row, work;
  double total = 0.0;
  std::size_t count = 0;
  auto visit = [&](std::size_t i) {
    scaled_row(member_logits, i, temperature, path, row, work);
    total -= std::log(std::max(row[label_at(labels, i, row.size())], kProbFloor));
    ++count;
  };
  if (rows.empty()) {
    for (std::size_t i = 0; i < labels.size(); ++i) visit(i);
  } else {
    for (std::size_t i : rows) visit(i);
  }
  return total / static_cast<double>(count);
}

double fit_temperature_nll(std::span<const Matrix> member_logits, std::span<const int> labels,
                           TemperaturePath path, std::span<const std::size_t> rows) {
  check_logits(member_logits, labels);
  auto f = [&](double t) { return nll_at_temperature(member_logits, labels, t, path, rows); };
  const double ratio = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = kTemperatureMin;
  double hi = kTemperatureMax;
  double x1 = hi - ratio * (hi - lo);
  double x2 = lo + ratio * (hi - lo);
  double f1 = f(x1);
  double f2 = f(x2);
  double best_t = f1 <= f2 ? x1 : x2;
  double best_f = std::min(f1, f2);
  while (hi - lo > kTemperatureTol) {
    if (f1 <= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - ratio * (hi - lo);
      f1 = f(x1);
      if (f1 < best_f) { best_f = f1; best_t = x1; }
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + ratio * (hi - lo);
      f2 = f(x2);
      if (f2 < best_f) { best_f = f2; best_t = x2; }
    }
  }
  return best_t;
}

TemperatureFit fit_temperature(std::span<const Matrix> member_logits,
                               std::span<const int> labels, std::size_t folds,
                               TemperaturePath path) {
  check_logits(member_logits, labels);
  if (folds < 2) throw UsageError("fit_temperature: folds must be >= 2");
  const std::size_t n = labels.size();
  if (n < folds) {
    throw UsageError("fit_temperature: " + std::to_string(n) + " samples for " +
                     std::to_string(folds) + " folds");
  }
  TemperatureFit fit;
  fit.held_out_probs = Matrix(n, member_logits[0].cols());
  std::vector<double> row, work;
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<std::size_t> train;
    for (std::size_t i = 0; i < n; ++i)
      if (i % folds != f) train.push_back(i);
    const double t = fit_temperature_nll(member_logits, labels, path, train);
    fit.fold_temperatures.push_back(t);
    for (std::size_t i = f; i < n; i += folds) {
      scaled_row(member_logits, i, t, path, row, work);
      std::copy(row.begin(), row.end(), fit.held_out_probs.row(i).begin());
    }
  }
  fit.temperature = std::accumulate(fit.fold_temperatures.begin(), fit.fold_temperatures.end(), 0.0) /
                    static_cast<double>(folds);
  return fit;
}

TemperatureFit fit_temperature(const Matrix& logits, std::span<const int> labels,
                               std::size_t folds) {
  return fit_temperature(std::span<const Matrix>(&logits, 1), labels, folds,
                         TemperaturePath::logit_mean);
}

std::vector<std::pair<std::string, double>> EvalReport::metrics() const {
  std::vector<std::pair<std::string, double>> out;
  auto put = [&](const char* name, double v) {
    if (std::isfinite(v)) out.emplace_back(name, v);
  };
  put("accuracy", accuracy);
  put("nll", nll);
  put("ece", ece);
  put("temperature", temperature);
  if (auc_roc) put("auc_roc", *auc_roc);
  put("entropy", mean_entropy);
  put("jsd", jsd);
  put("oracle_nll", oracle_nll);
  if (disagreement.rows() > 1) {
    double total = 0.0;
    const std::size_t m = disagreement.rows();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) total += disagreement(i, j);
    put("disagreement", total / static_cast<double>(m * (m - 1)));
  }
  return out;
}

}  // namespace divens
