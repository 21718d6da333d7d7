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

#include "divens/regularizers.hpp"

#include <cmath>
#include <sstream>

#include "divens/errors.hpp"

namespace divens {

std::string to_string(RegKind kind) {
  switch (kind) {
    case RegKind::none: return "none";
    case RegKind::sample_diversity: return "sample_diversity";
    case RegKind::adp: return "adp";
    case RegKind::neg_corr: return "neg_corr";
    case RegKind::chi2: return "chi2";
    case RegKind::weight_cos: return "weight_cos";
  }
  return "?";
}

RegKind parse_reg_kind(const std::string& text) {
  if (text == "none") return RegKind::none;
  if (text == "sample_diversity" || text == "sd") return RegKind::sample_diversity;
  if (text == "adp") return RegKind::adp;
  if (text == "neg_corr" || text == "ncl") return RegKind::neg_corr;
  if (text == "chi2") return RegKind::chi2;
  if (text == "weight_cos") return RegKind::weight_cos;
  throw ConfigError("unknown regularizer '" + text + "'");
}

std::string to_string(CeMode mode) {
  return mode == CeMode::per_member ? "per_member" : "mean_prob";
}

CeMode parse_ce_mode(const std::string& text) {
  if (text == "per_member") return CeMode::per_member;
  if (text == "mean_prob") return CeMode::mean_prob;
  throw ConfigError("unknown ce_mode '" + text + "'");
}

RegularizerSpec RegularizerSpec::with_defaults(RegKind kind) {
  RegularizerSpec spec;
  spec.kind = kind;
  switch (kind) {
    case RegKind::none: spec.lambda = 0.0; break;
    case RegKind::sample_diversity: spec.lambda = 0.5; break;
    case RegKind::chi2: spec.lambda = 0.25; break;
    case RegKind::neg_corr: spec.lambda = 1e-5; break;
    case RegKind::adp: spec.lambda = 1.0; break;
    case RegKind::weight_cos: spec.lambda = 1.0; break;
  }
  return spec;
}

bool RegularizerSpec::active() const {
  const bool self = kind != RegKind::none && lambda != 0.0;
  return self || (combine_with && combine_with->active());
}

bool RegularizerSpec::needs_ood() const {
  return (kind == RegKind::sample_diversity && lambda != 0.0) ||
         (combine_with && combine_with->needs_ood());
}

std::string RegularizerSpec::describe() const {
  std::ostringstream os;
  os << to_string(kind);
  if (use_chi2_variant) os << "_chi2";
  if (combine_with) os << "+" << combine_with->describe();
  return os.str();
}

void RegularizerSpec::validate(const EnsembleModel& model) const {
  if (!std::isfinite(lambda) || lambda < 0.0) {
    throw ConfigError("regularizer lambda must be finite and >= 0");
  }
  if (jitter < 0.0) throw ConfigError("regularizer jitter must be >= 0");
  const std::size_t members = model.members;
  const std::size_t classes = model.spec.classes();
  if (kind == RegKind::sample_diversity && !use_chi2_variant && members > classes) {
    throw ConfigError(
        "sample_diversity log-det branch needs members <= classes: "
        "det(Y^T Y) = 0 whenever C < M (" + std::to_string(classes) + " classes, " +
        std::to_string(members) + " members); use the chi2 variant");
  }
  if (kind == RegKind::adp && !use_chi2_variant && members + 1 > classes) {
    throw ConfigError(
        "adp log-det branch needs members <= classes - 1: det(Y^T Y) = 0 whenever "
        "C - 1 < M (" + std::to_string(classes) + " classes, " +
        std::to_string(members) + " members); use the chi2 variant");
  }
  if (kind == RegKind::adp && classes < 2) throw ConfigError("adp needs >= 2 classes");
  if (kind == RegKind::weight_cos) {
    const std::size_t owned = member_owned_parameter_vector(model, 0).size();
    if (members > owned) {
      throw ConfigError("weight_cos needs members <= member-owned parameters (" +
                        std::to_string(owned) + ")");
    }
  }
  if (combine_with) combine_with->validate(model);
}

namespace {

double inv(std::size_t n) { return 1.0 / static_cast<double>(n); }

void require_members(std::span<const ad::Var> members, const char* who) {
  if (members.size() < 2) {
    throw ConfigError(std::string(who) + " needs at least 2 members");
  }
}

// Rows divided by their sum.
ad::Var renormalize_rows(ad::Var a) { return ad::div_col(a, ad::sum_rows(a)); }

// Per-row Shannon entropy (natural log), R x 1.
ad::Var row_entropy(ad::Var p) {
  return ad::neg(ad::sum_rows(ad::mul(p, ad::log_floor(p, 1e-300))));
}

}  // namespace

ad::Var neg_corr(std::span<const ad::Var> member_probs) {
  require_members(member_probs, "neg_corr");
  const std::size_t m = member_probs.size();
  ad::Var mean = ad::scale(ad::sum_of(member_probs), inv(m));
  std::vector<ad::Var> dev;
  for (const ad::Var& p : member_probs) dev.push_back(ad::sub(p, mean));
  ad::Var total_dev = ad::sum_of(dev);
  std::vector<ad::Var> per_member;
  for (const ad::Var& d : dev) {
    ad::Var others = ad::sub(total_dev, d);
    per_member.push_back(ad::sum_rows(ad::mul(d, others)));
  }
  return ad::neg(ad::mean(ad::sum_of(per_member)));
}

ad::Var chi2_diversity(std::span<const ad::Var> member_probs, bool literal) {
  require_members(member_probs, "chi2_diversity");
  const std::size_t m = member_probs.size();
  std::vector<ad::Var> terms;
  auto pair_term = [&](std::size_t i, std::size_t j) {
    ad::Var diff = ad::sub(member_probs[i], member_probs[j]);
    ad::Var num = literal ? diff : ad::square(diff);
    ad::Var den = ad::add(member_probs[i], member_probs[j]);
    return ad::sum_rows(ad::div(num, den));
  };
  double factor = inv(m * (m - 1));
  if (literal) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j)
        if (i != j) terms.push_back(pair_term(i, j));
  } else {
    // The squared form is symmetric, so each unordered pair counts twice.
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = i + 1; j < m; ++j) terms.push_back(pair_term(i, j));
    factor *= 2.0;
  }
  ad::Var inner = ad::scale(ad::sum_of(terms), factor);
  return ad::mean(ad::log_floor(inner, kChi2LogFloor));
}

ad::Var adp(std::span<const ad::Var> member_probs, std::span<const int> labels,
            double alpha, double beta, double jitter, bool use_chi2, bool chi2_literal) {
  require_members(member_probs, "adp");
  const std::size_t m = member_probs.size();
  std::vector<ad::Var> stripped;
  for (const ad::Var& p : member_probs) stripped.push_back(ad::drop_label_column(p, labels));

  ad::Var mean_stripped = ad::scale(ad::sum_of(stripped), inv(m));
  ad::Var ent = ad::mean(row_entropy(renormalize_rows(mean_stripped)));

  ad::Var diversity;
  if (use_chi2) {
    std::vector<ad::Var> dists;
    for (const ad::Var& s : stripped) dists.push_back(renormalize_rows(s));
    diversity = chi2_diversity(dists, chi2_literal);
  } else {
    if (m > stripped[0].cols()) {
      throw ConfigError("adp log-det branch needs members <= classes - 1 "
                        "(det(Y^T Y) = 0 whenever C - 1 < M); use the chi2 variant");
    }
    std::vector<ad::Var> unit;
    for (const ad::Var& s : stripped) unit.push_back(ad::normalize_rows(s, kNormalizeEps));
    diversity = ad::mean(ad::batched_log_det_gram(unit, jitter));
  }
  return ad::add(ad::scale(ent, alpha), ad::scale(diversity, beta));
}

ad::Var sample_diversity_from_logits(std::span<const ad::Var> member_logits,
                                     double jitter, bool use_chi2, bool chi2_literal) {
  require_members(member_logits, "sample_diversity");
  if (use_chi2) {
    std::vector<ad::Var> probs;
    for (const ad::Var& z : member_logits) probs.push_back(ad::softmax_rows(z));
    return chi2_diversity(probs, chi2_literal);
  }
  if (member_logits.size() > member_logits[0].cols()) {
    throw ConfigError("sample_diversity log-det branch needs members <= classes "
                      "(det(Y^T Y) = 0 whenever C < M); use the chi2 variant");
  }
  std::vector<ad::Var> unit;
  for (const ad::Var& z : member_logits) unit.push_back(ad::normalize_rows(z, kNormalizeEps));
  return ad::mean(ad::batched_log_det_gram(unit, jitter));
}

ad::Var sample_diversity(const BoundModel& bound, ad::Var ood_batch, double jitter,
                         bool use_chi2, bool chi2_literal) {
  EnsembleVars out = forward(bound, ood_batch);
  return sample_diversity_from_logits(out.logits, jitter, use_chi2, chi2_literal);
}

ad::Var weight_cos(const BoundModel& bound, double jitter) {
  const EnsembleModel& model = *bound.model;
  std::vector<ad::Var> rows;
  for (std::size_t j = 0; j < model.members; ++j) {
    std::vector<ad::Var> parts;
    for (std::size_t idx : member_tensor_indices(model, j, true)) parts.push_back(bound.params[idx]);
    if (parts.empty()) {
      throw ConfigError("weight_cos: member " + std::to_string(j) + " owns no parameters");
    }
    rows.push_back(ad::flatten_concat(parts));
  }
  if (model.members > rows[0].cols()) {
    throw ConfigError("weight_cos needs members <= member-owned parameters");
  }
  ad::Var theta = ad::normalize_rows(ad::vstack(rows), kNormalizeEps);
  return ad::log_det_gram(ad::transpose(theta), jitter);
}

ad::Var cross_entropy(const EnsembleVars& out, std::span<const int> labels, CeMode mode) {
  if (mode == CeMode::mean_prob) {
    return ad::neg(ad::mean(ad::log_floor(ad::pick(out.mean_prob, labels), 1e-300)));
  }
  std::vector<ad::Var> per_member;
  for (const ad::Var& z : out.logits)
    per_member.push_back(ad::mean(ad::pick(ad::log_softmax_rows(z), labels)));
  return ad::neg(ad::scale(ad::sum_of(per_member), inv(out.logits.size())));
}

ad::Var combined_loss(const EnsembleVars& out, std::span<const int> labels,
                      ad::Var reg_score, double lambda, CeMode mode) {
  return ad::sub(cross_entropy(out, labels, mode), ad::scale(reg_score, lambda));
}

ad::Var regularizer_score(const RegularizerSpec& spec, const RegInputs& in) {
  switch (spec.kind) {
    case RegKind::none:
      throw UsageError("regularizer_score called for kind none");
    case RegKind::neg_corr:
      return neg_corr(in.id_out->probs);
    case RegKind::chi2:
      return chi2_diversity(in.id_out->probs, spec.chi2_literal);
    case RegKind::adp:
      return adp(in.id_out->probs, in.labels, spec.adp_alpha, spec.adp_beta, spec.jitter,
                 spec.use_chi2_variant, spec.chi2_literal);
    case RegKind::sample_diversity:
      if (!in.ood_batch) throw UsageError("sample_diversity needs an OOD batch");
      return sample_diversity(*in.bound, *in.ood_batch, spec.jitter, spec.use_chi2_variant,
                              spec.chi2_literal);
    case RegKind::weight_cos:
      return weight_cos(*in.bound, spec.jitter);
  }
  throw UsageError("unknown regularizer kind");
}

RegTerm regularization_term(const RegularizerSpec& spec, const RegInputs& in) {
  std::vector<ad::Var> weighted;
  double raw = 0.0;
  for (const RegularizerSpec* s = &spec; s != nullptr; s = s->combine_with.get()) {
    if (s->kind == RegKind::none || s->lambda == 0.0) continue;
    ad::Var score = regularizer_score(*s, in);
    raw += score.value().item();
    weighted.push_back(ad::scale(score, s->lambda));
  }
  if (weighted.empty()) throw UsageError("regularization_term on an inactive spec");
  return {ad::sum_of(weighted), raw};
}

double entropy(std::span<const double> p) {
  if (p.size() < 2) return 0.0;
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h / std::log(static_cast<double>(p.size()));
}

double neg_corr_pairwise(std::span<const std::vector<double>> ys) {
  const std::size_t m = ys.size();
  const std::size_t c = ys[0].size();
  std::vector<double> mean(c, 0.0);
  for (const auto& y : ys)
    for (std::size_t k = 0; k < c; ++k) mean[k] += y[k] / static_cast<double>(m);
  double score = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      double others = 0.0;
      for (std::size_t j = 0; j < m; ++j)
        if (j != i) others += ys[j][k] - mean[k];
      score -= (ys[i][k] - mean[k]) * others;
    }
  }
  return score;
}

double neg_corr_squared_deviation(std::span<const std::vector<double>> ys) {
  const std::size_t m = ys.size();
  const std::size_t c = ys[0].size();
  std::vector<double> mean(c, 0.0);
  for (const auto& y : ys)
    for (std::size_t k = 0; k < c; ++k) mean[k] += y[k] / static_cast<double>(m);
  double score = 0.0;
  for (const auto& y : ys)
    for (std::size_t k = 0; k < c; ++k) score += (y[k] - mean[k]) * (y[k] - mean[k]);
  return score;
}

double chi2_inner(std::span<const std::vector<double>> ys, bool literal) {
  const std::size_t m = ys.size();
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (i == j) continue;
      for (std::size_t k = 0; k < ys[i].size(); ++k) {
        const double d = ys[i][k] - ys[j][k];
        total += (literal ? d : d * d) / (ys[i][k] + ys[j][k]);
      }
    }
  return total / static_cast<double>(m * (m - 1));
}

double log_det_gram_value(const Matrix& y, double jitter) {
  ad::Tape tape;
  return ad::log_det_gram(tape.constant(y), jitter).value().item();
}

Matrix normalize_columns_value(const Matrix& y, double eps) {
  ad::Tape tape;
  return ad::normalize_columns(tape.constant(y), eps).value();
}

Matrix softmax_rows_value(const Matrix& z) {
  ad::Tape tape;
  return ad::softmax_rows(tape.constant(z)).value();
}

}  // namespace divens
