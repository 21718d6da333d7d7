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

#include "divens/ensemble.hpp"

#include <cmath>
#include <sstream>

#include "divens/archive.hpp"
#include "divens/errors.hpp"
#include "divens/rng.hpp"

namespace divens {

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

Activation parse_activation(const std::string& text) {
  if (text == "relu") return Activation::relu;
  if (text == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + text + "'");
}

void MlpSpec::validate() const {
  if (layer_widths.size() < 2) {
    throw ConfigError("MLP needs at least an input and an output width");
  }
  for (std::size_t w : layer_widths) {
    if (w < 1) throw ConfigError("MLP layer widths must be >= 1");
  }
}

std::size_t MlpSpec::single_member_parameters() const {
  std::size_t total = 0;
  for (std::size_t l = 0; l < layers(); ++l)
    total += layer_widths[l] * layer_widths[l + 1] + layer_widths[l + 1];
  return total;
}

std::string to_string(const SharingScheme& s) {
  switch (s.kind) {
    case SharingScheme::Kind::independent:
      return "independent";
    case SharingScheme::Kind::rank1_factorized:
      return "rank1";
    case SharingScheme::Kind::tree_split:
      return "tree_split:" + std::to_string(s.split_level);
  }
  return "?";
}

SharingScheme parse_scheme(const std::string& text) {
  if (text == "independent") return SharingScheme::independent();
  if (text == "rank1" || text == "rank1_factorized") {
    return SharingScheme::rank1_factorized();
  }
  const std::string prefix = "tree_split:";
  if (text.rfind(prefix, 0) == 0) {
    const std::string level = text.substr(prefix.size());
    if (level.empty() || level.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError("bad tree_split level in '" + text + "'");
    }
    return SharingScheme::tree_split(std::stoul(level));
  }
  throw ConfigError("unknown sharing scheme '" + text + "'");
}

std::size_t EnsembleModel::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : params) total += p.value.size();
  return total;
}

std::size_t EnsembleModel::shared_parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : params)
    if (!p.owner) total += p.value.size();
  return total;
}

std::optional<std::size_t> EnsembleModel::find(const std::string& name) const {
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].name == name) return i;
  return std::nullopt;
}

namespace {

Matrix he_normal(std::size_t fan_in, std::size_t fan_out, Rng rng) {
  Matrix w(fan_in, fan_out);
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : w.data()) v = std_dev * rng.normal();
  return w;
}

Matrix random_signs(std::size_t n, Rng rng) {
  Matrix m(1, n);
  for (double& v : m.data()) v = rng.sign();
  return m;
}

std::string tensor_name(std::optional<std::size_t> owner, std::size_t layer,
                        const char* suffix) {
  std::string prefix = owner ? "m" + std::to_string(*owner) : std::string("shared");
  return prefix + ".l" + std::to_string(layer) + "." + suffix;
}

}  // namespace

EnsembleModel init_ensemble(const MlpSpec& spec, const SharingScheme& scheme,
                            std::size_t members, std::uint64_t seed) {
  spec.validate();
  if (members < 2) throw ConfigError("an ensemble needs at least 2 members");
  if (scheme.kind == SharingScheme::Kind::tree_split &&
      scheme.split_level > spec.layers()) {
    throw ConfigError("tree_split level " + std::to_string(scheme.split_level) +
                      " exceeds layer count " + std::to_string(spec.layers()));
  }

  EnsembleModel model;
  model.spec = spec;
  model.scheme = scheme;
  model.members = members;
  model.seed = seed;
  model.layout.assign(members, std::vector<LayerRefs>(spec.layers()));

  const Rng root(seed);
  auto add = [&](std::optional<std::size_t> owner, std::size_t layer, ParamRole role,
                 const char* suffix, Matrix value) {
    model.params.push_back({tensor_name(owner, layer, suffix), std::move(value), role,
                            layer, owner});
    return model.params.size() - 1;
  };

  for (std::size_t l = 0; l < spec.layers(); ++l) {
    const std::size_t fan_in = spec.layer_widths[l];
    const std::size_t fan_out = spec.layer_widths[l + 1];
    const bool shared_layer =
        scheme.kind == SharingScheme::Kind::tree_split && l < scheme.split_level;

    if (shared_layer) {
      const auto w = add(std::nullopt, l, ParamRole::weight, "W",
                         he_normal(fan_in, fan_out, root.split(tensor_name({}, l, "W"))));
      const auto b = add(std::nullopt, l, ParamRole::bias, "b", Matrix(1, fan_out));
      for (std::size_t m = 0; m < members; ++m) model.layout[m][l] = {w, b, {}, {}};
    } else if (scheme.kind == SharingScheme::Kind::rank1_factorized) {
      const auto w = add(std::nullopt, l, ParamRole::weight, "W",
                         he_normal(fan_in, fan_out, root.split(tensor_name({}, l, "W"))));
      for (std::size_t m = 0; m < members; ++m) {
        const auto r = add(m, l, ParamRole::rank1_r, "r",
                           random_signs(fan_in, root.split(tensor_name(m, l, "r"))));
        const auto s = add(m, l, ParamRole::rank1_s, "s",
                           random_signs(fan_out, root.split(tensor_name(m, l, "s"))));
        const auto b = add(m, l, ParamRole::bias, "b", Matrix(1, fan_out));
        model.layout[m][l] = {w, b, r, s};
      }
    } else {
      for (std::size_t m = 0; m < members; ++m) {
        const auto w = add(m, l, ParamRole::weight, "W",
                           he_normal(fan_in, fan_out, root.split(tensor_name(m, l, "W"))));
        const auto b = add(m, l, ParamRole::bias, "b", Matrix(1, fan_out));
        model.layout[m][l] = {w, b, {}, {}};
      }
    }
  }
  return model;
}

Matrix effective_weight(const EnsembleModel& model, std::size_t member,
                        std::size_t layer) {
  if (member >= model.members) throw UsageError("member index out of range");
  const LayerRefs& refs = model.layout.at(member).at(layer);
  Matrix w = model.params[refs.weight].value;
  if (refs.rank1_r) {
    const Matrix& r = model.params[*refs.rank1_r].value;
    const Matrix& s = model.params[*refs.rank1_s].value;
    for (std::size_t i = 0; i < w.rows(); ++i)
      for (std::size_t j = 0; j < w.cols(); ++j) w(i, j) *= r(0, i) * s(0, j);
  }
  return w;
}

std::vector<std::size_t> member_tensor_indices(const EnsembleModel& model,
                                               std::size_t member, bool owned_only) {
  if (member >= model.members) {
    throw UsageError("member index " + std::to_string(member) + " out of range");
  }
  std::vector<std::size_t> order;
  for (const LayerRefs& refs : model.layout[member]) {
    order.push_back(refs.weight);
    if (refs.rank1_r) order.push_back(*refs.rank1_r);
    if (refs.rank1_s) order.push_back(*refs.rank1_s);
    order.push_back(refs.bias);
  }
  if (owned_only) {
    std::erase_if(order, [&](std::size_t idx) { return model.params[idx].owner != member; });
  }
  return order;
}

std::vector<double> member_parameter_vector(const EnsembleModel& model,
                                            std::size_t member) {
  std::vector<double> flat;
  for (std::size_t idx : member_tensor_indices(model, member, false)) {
    auto d = model.params[idx].value.data();
    flat.insert(flat.end(), d.begin(), d.end());
  }
  return flat;
}

std::vector<double> member_owned_parameter_vector(const EnsembleModel& model,
                                                  std::size_t member) {
  std::vector<double> flat;
  for (std::size_t idx : member_tensor_indices(model, member, true)) {
    auto d = model.params[idx].value.data();
    flat.insert(flat.end(), d.begin(), d.end());
  }
  return flat;
}

BoundModel bind(ad::Tape& tape, const EnsembleModel& model, bool trainable) {
  BoundModel bound;
  bound.model = &model;
  bound.params.reserve(model.params.size());
  for (const auto& p : model.params)
    bound.params.push_back(trainable ? tape.parameter(p.value) : tape.constant(p.value));
  return bound;
}

namespace {

ad::Var dense(const BoundModel& bound, const LayerRefs& refs, ad::Var h) {
  const auto& p = bound.params;
  ad::Var out;
  if (refs.rank1_r) {
    // x (W o r s^T) = ((x o r) W) o s
    out = ad::mul_row(ad::matmul(ad::mul_row(h, p[*refs.rank1_r]), p[refs.weight]),
                      p[*refs.rank1_s]);
  } else {
    out = ad::matmul(h, p[refs.weight]);
  }
  return ad::add_row(out, p[refs.bias]);
}

ad::Var activate(Activation a, ad::Var h) {
  return a == Activation::relu ? ad::relu(h) : ad::tanh(h);
}

}  // namespace

EnsembleVars forward(const BoundModel& bound, ad::Var x) {
  const EnsembleModel& model = *bound.model;
  if (x.cols() != model.spec.input_dim()) {
    throw ShapeError("forward: input has " + std::to_string(x.cols()) +
                     " features, model expects " +
                     std::to_string(model.spec.input_dim()));
  }
  const std::size_t layers = model.spec.layers();
  const std::size_t shared =
      model.scheme.kind == SharingScheme::Kind::tree_split ? model.scheme.split_level : 0;

  ad::Var trunk = x;
  for (std::size_t l = 0; l < shared; ++l) {
    trunk = dense(bound, model.layout[0][l], trunk);
    if (l + 1 < layers) trunk = activate(model.spec.activation, trunk);
  }

  EnsembleVars out;
  for (std::size_t m = 0; m < model.members; ++m) {
    ad::Var h = trunk;
    for (std::size_t l = shared; l < layers; ++l) {
      h = dense(bound, model.layout[m][l], h);
      if (l + 1 < layers) h = activate(model.spec.activation, h);
    }
    out.logits.push_back(h);
    out.probs.push_back(ad::softmax_rows(h));
  }
  out.mean_prob = ad::scale(ad::sum_of(out.probs), 1.0 / static_cast<double>(model.members));
  return out;
}

EnsemblePrediction forward_all(const EnsembleModel& model, const Matrix& x) {
  ad::Tape tape;
  BoundModel bound = bind(tape, model, /*trainable=*/false);
  EnsembleVars vars = forward(bound, tape.constant(x));
  EnsemblePrediction pred;
  for (std::size_t m = 0; m < model.members; ++m) {
    pred.logits.push_back(vars.logits[m].value());
    pred.probs.push_back(vars.probs[m].value());
  }
  pred.mean_prob = vars.mean_prob.value();
  return pred;
}

TensorArchive checkpoint_archive(const EnsembleModel& model) {
  TensorArchive ar;
  std::ostringstream widths;
  for (std::size_t i = 0; i < model.spec.layer_widths.size(); ++i)
    widths << (i ? "," : "") << model.spec.layer_widths[i];
  ar.set("kind", "ensemble");
  ar.set("widths", widths.str());
  ar.set("activation", to_string(model.spec.activation));
  ar.set("scheme", to_string(model.scheme));
  ar.set("members", std::to_string(model.members));
  ar.set("seed", std::to_string(model.seed));
  for (const auto& p : model.params) ar.tensors.emplace_back(p.name, p.value);
  return ar;
}

EnsembleModel model_from_archive(const TensorArchive& ar, bool exact) {
  MlpSpec spec;
  std::istringstream ws(ar.require("widths"));
  std::string tok;
  while (std::getline(ws, tok, ',')) spec.layer_widths.push_back(std::stoul(tok));
  spec.activation = parse_activation(ar.require("activation"));
  EnsembleModel model = init_ensemble(spec, parse_scheme(ar.require("scheme")),
                                      std::stoul(ar.require("members")),
                                      std::stoull(ar.require("seed")));
  if (exact && ar.tensors.size() != model.params.size()) {
    throw FormatError("checkpoint tensor count does not match its header", 0);
  }
  for (auto& p : model.params) {
    const Matrix* m = ar.tensor(p.name);
    if (!m) throw FormatError("checkpoint is missing tensor '" + p.name + "'", 0);
    if (!m->same_shape(p.value)) {
      throw FormatError("checkpoint tensor '" + p.name + "' has shape " +
                            m->shape_string() + ", expected " + p.value.shape_string(),
                        0);
    }
    p.value = *m;
  }
  return model;
}

std::string serialize_checkpoint(const EnsembleModel& model) {
  return checkpoint_archive(model).serialize();
}

EnsembleModel deserialize_checkpoint(const std::string& text) {
  return model_from_archive(TensorArchive::deserialize(text));
}

void save_checkpoint(const EnsembleModel& model, const std::string& path) {
  checkpoint_archive(model).save(path);
}

EnsembleModel load_checkpoint(const std::string& path) {
  return model_from_archive(TensorArchive::load(path));
}

}  // namespace divens
