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

#include "divens/archive.hpp"
#include "divens/autodiff.hpp"
#include "divens/matrix.hpp"

namespace divens {

enum class Activation { relu, tanh };

std::string to_string(Activation a);
Activation parse_activation(const std::string& text);

// Fully connected backbone: widths[0] is the input dimension, widths.back()
// the class count. Each consecutive pair is one layer.
struct MlpSpec {
  std::vector<std::size_t> layer_widths;
  Activation activation = Activation::relu;

  std::size_t layers() const { return layer_widths.size() - 1; }
  std::size_t input_dim() const { return layer_widths.front(); }
  std::size_t classes() const { return layer_widths.back(); }
  void validate() const;
  // Parameter count of one standalone MLP (weights + biases).
  std::size_t single_member_parameters() const;
};

struct SharingScheme {
  enum class Kind { independent, tree_split, rank1_factorized };

  Kind kind = Kind::independent;
  // Layers [0, split_level) are shared; only meaningful for tree_split.
  std::size_t split_level = 0;

  static SharingScheme independent() { return {Kind::independent, 0}; }
  static SharingScheme tree_split(std::size_t level) { return {Kind::tree_split, level}; }
  static SharingScheme rank1_factorized() { return {Kind::rank1_factorized, 0}; }

  bool operator==(const SharingScheme&) const = default;
};

std::string to_string(const SharingScheme& s);
// Accepts "independent", "rank1", "tree_split:<level>".
SharingScheme parse_scheme(const std::string& text);

enum class ParamRole { weight, bias, rank1_r, rank1_s };

struct ParamTensor {
  std::string name;
  Matrix value;
  ParamRole role = ParamRole::weight;
  std::size_t layer = 0;
  // Owning member, or nullopt when shared by all members.
  std::optional<std::size_t> owner;
};

// Indices into EnsembleModel::params for one member's view of one layer.
struct LayerRefs {
  std::size_t weight = 0;
  std::size_t bias = 0;
  std::optional<std::size_t> rank1_r;  // 1 x fan_in
  std::optional<std::size_t> rank1_s;  // 1 x fan_out
};

struct EnsembleModel {
  MlpSpec spec;
  SharingScheme scheme;
  std::size_t members = 0;
  std::uint64_t seed = 0;
  std::vector<ParamTensor> params;
  // layout[member][layer]
  std::vector<std::vector<LayerRefs>> layout;

  std::size_t parameter_count() const;
  std::size_t shared_parameter_count() const;
  std::optional<std::size_t> find(const std::string& name) const;
};

// He-normal weights, zero biases, rank-1 factors uniform on {-1, +1}.
EnsembleModel init_ensemble(const MlpSpec& spec, const SharingScheme& scheme,
                            std::size_t members, std::uint64_t seed);

// W o (r s^T) for rank-1 members, the plain weight otherwise.
Matrix effective_weight(const EnsembleModel& model, std::size_t member,
                        std::size_t layer);

// Indices into model.params in flattening order; `owned_only` keeps tensors
// owned by `member`.
std::vector<std::size_t> member_tensor_indices(const EnsembleModel& model,
                                               std::size_t member, bool owned_only);

// Flattening order: layers ascending; within a layer W, r, s, b (r/s only for
// rank-1 members). Shared tensors appear in every member's vector.
std::vector<double> member_parameter_vector(const EnsembleModel& model,
                                            std::size_t member);
// Only tensors owned by `member` (same order).
std::vector<double> member_owned_parameter_vector(const EnsembleModel& model,
                                                  std::size_t member);

// Model parameters registered as leaves on a tape.
struct BoundModel {
  const EnsembleModel* model = nullptr;
  std::vector<ad::Var> params;
};

// Constant leaves when `trainable` is false (evaluation only).
BoundModel bind(ad::Tape& tape, const EnsembleModel& model, bool trainable = true);

struct EnsembleVars {
  std::vector<ad::Var> logits;  // M x (B x C)
  std::vector<ad::Var> probs;   // M x (B x C)
  ad::Var mean_prob;            // B x C
};

EnsembleVars forward(const BoundModel& bound, ad::Var x);

struct EnsemblePrediction {
  std::vector<Matrix> logits;
  std::vector<Matrix> probs;
  Matrix mean_prob;
};

// Pure evaluation. Every member sees the same input batch.
EnsemblePrediction forward_all(const EnsembleModel& model, const Matrix& x);

// Text checkpoint; values are written as hexadecimal floats and round-trip
// bit-exactly.
void save_checkpoint(const EnsembleModel& model, const std::string& path);
EnsembleModel load_checkpoint(const std::string& path);
std::string serialize_checkpoint(const EnsembleModel& model);
EnsembleModel deserialize_checkpoint(const std::string& text);

TensorArchive checkpoint_archive(const EnsembleModel& model);
// With `exact` false, tensors beyond the model's own are ignored.
EnsembleModel model_from_archive(const TensorArchive& ar, bool exact = true);

}  // namespace divens
