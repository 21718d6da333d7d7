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
#include <random>
#include <set>

#include "divens/ensemble.hpp"
#include "divens/errors.hpp"
#include "test_util.hpp"

namespace divens {
namespace {

using testing::uniform_matrix;

const MlpSpec kSpec{{6, 8, 8, 8, 4}, Activation::relu};

TEST(InitEnsemble, IndependentCountIsMTimesSingle) {
  const EnsembleModel m = init_ensemble(kSpec, SharingScheme::independent(), 5, 1);
  EXPECT_EQ(m.parameter_count(), 5 * kSpec.single_member_parameters());
  EXPECT_EQ(m.shared_parameter_count(), 0u);
}

TEST(InitEnsemble, TreeSplitAtLastLayerSharesAllButHead) {
  const EnsembleModel m = init_ensemble(kSpec, SharingScheme::tree_split(3), 5, 1);
  const std::size_t head = 8 * 4 + 4;
  EXPECT_EQ(m.shared_parameter_count(), kSpec.single_member_parameters() - head);
  EXPECT_EQ(m.parameter_count(), m.shared_parameter_count() + 5 * head);
}

TEST(InitEnsemble, SameSeedIsBitIdentical) {
  for (auto scheme : {SharingScheme::independent(), SharingScheme::tree_split(2),
                      SharingScheme::rank1_factorized()}) {
    const EnsembleModel a = init_ensemble(kSpec, scheme, 3, 9);
    const EnsembleModel b = init_ensemble(kSpec, scheme, 3, 9);
    ASSERT_EQ(a.params.size(), b.params.size());
    for (std::size_t i = 0; i < a.params.size(); ++i) EXPECT_EQ(a.params[i].value, b.params[i].value);
    const EnsembleModel c = init_ensemble(kSpec, scheme, 3, 10);
    EXPECT_NE(a.params[0].value, c.params[0].value);
  }
}

TEST(InitEnsemble, HeNormalScaleAndZeroBias) {
  const MlpSpec wide{{400, 300, 2}, Activation::relu};
  const EnsembleModel m = init_ensemble(wide, SharingScheme::independent(), 2, 3);
  const Matrix& w = m.params[*m.find("m0.l0.W")].value;
  double ss = 0.0;
  for (double v : w.data()) ss += v * v;
  EXPECT_NEAR(std::sqrt(ss / static_cast<double>(w.size())), std::sqrt(2.0 / 400), 2e-3);
  for (double v : m.params[*m.find("m1.l1.b")].value.data()) EXPECT_EQ(v, 0.0);
}

TEST(InitEnsemble, Rank1FactorsAreSigns) {
  const EnsembleModel m = init_ensemble(kSpec, SharingScheme::rank1_factorized(), 3, 4);
  for (const auto& p : m.params) {
    if (p.role != ParamRole::rank1_r && p.role != ParamRole::rank1_s) continue;
    for (double v : p.value.data()) EXPECT_TRUE(v == 1.0 || v == -1.0);
  }
}

TEST(InitEnsemble, RejectsBadConfigurations) {
  EXPECT_THROW(init_ensemble(kSpec, SharingScheme::independent(), 1, 0), ConfigError);
  EXPECT_THROW(init_ensemble(kSpec, SharingScheme::tree_split(5), 3, 0), ConfigError);
  EXPECT_THROW(init_ensemble(MlpSpec{{4}, Activation::relu}, SharingScheme::independent(), 2, 0),
               ConfigError);
  EXPECT_THROW(parse_scheme("tree_split:x"), ConfigError);
  EXPECT_EQ(parse_scheme("tree_split:2"), SharingScheme::tree_split(2));
  EXPECT_EQ(to_string(parse_scheme("rank1")), "rank1");
}

TEST(Sharing, IndependentMembersReferenceDisjointTensors) {
  const EnsembleModel m = init_ensemble(kSpec, SharingScheme::independent(), 4, 1);
  std::set<std::size_t> seen;
  for (std::size_t j = 0; j < m.members; ++j)
    for (std::size_t idx : member_tensor_indices(m, j, false)) EXPECT_TRUE(seen.insert(idx).second);
}

TEST(Sharing, TreeSplitTrunkIsOneTensor) {
  const EnsembleModel m = init_ensemble(kSpec, SharingScheme::tree_split(2), 3, 1);
  for (std::size_t l = 0; l < kSpec.layers(); ++l) {
    std::set<std::size_t> weights;
    for (std::size_t j = 0; j < m.members; ++j) weights.insert(m.layout[j][l].weight);
    EXPECT_EQ(weights.size(), l < 2 ? 1u : 3u) << "layer " << l;
  }
}

// Closed-form counts for one MLP under each scheme.
std::size_t expected_count(const MlpSpec& spec, SharingScheme s, std::size_t members) {
  std::size_t total = 0;
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    const std::size_t in = spec.layer_widths[l], out = spec.layer_widths[l + 1];
    switch (s.kind) {
      case SharingScheme::Kind::independent:
        total += members * (in * out + out);
        break;
      case SharingScheme::Kind::tree_split:
        total += l < s.split_level ? in * out + out : members * (in * out + out);
        break;
      case SharingScheme::Kind::rank1_factorized:
        total += in * out + members * (in + out + out);
        break;
    }
  }
  return total;
}

TEST(Sharing, ParameterCountsMatchClosedForm) {
  for (std::size_t members : {2u, 3u, 5u}) {
    for (std::size_t s = 0; s <= kSpec.layers(); ++s) {
      const auto scheme = SharingScheme::tree_split(s);
      EXPECT_EQ(init_ensemble(kSpec, scheme, members, 0).parameter_count(),
                expected_count(kSpec, scheme, members));
    }
    const auto r1 = SharingScheme::rank1_factorized();
    EXPECT_EQ(init_ensemble(kSpec, r1, members, 0).parameter_count(),
              expected_count(kSpec, r1, members));
  }
}

TEST(Sharing, ParameterCountMonotoneInSplitLevel) {
  for (std::size_t members : {2u, 3u, 5u}) {
    const auto count = [&](SharingScheme s) {
      return init_ensemble(kSpec, s, members, 0).parameter_count();
    };
    const std::size_t independent = count(SharingScheme::independent());
    const std::size_t rank1 = count(SharingScheme::rank1_factorized());
    EXPECT_EQ(count(SharingScheme::tree_split(0)), independent);
    std::size_t prev = independent;
    for (std::size_t s = 1; s <= kSpec.layers(); ++s) {
      const std::size_t c = count(SharingScheme::tree_split(s));
      EXPECT_LT(c, prev);
      prev = c;
    }
    EXPECT_LT(rank1, independent);
    EXPECT_GE(count(SharingScheme::tree_split(1)), rank1);
    // Once the unshared head is smaller than the per-member rank-1 overhead,
    // tree_split drops below rank1.
    EXPECT_LT(count(SharingScheme::tree_split(kSpec.layers())), rank1);
  }
}

TEST(Forward, MeanRowsSumToOne) {
  std::mt19937_64 gen(1);
  const EnsembleModel m = init_ensemble(kSpec, SharingScheme::rank1_factorized(), 4, 2);
  const EnsemblePrediction p = forward_all(m, uniform_matrix(10, 6, gen));
  for (std::size_t r = 0; r < 10; ++r) {
    double s = 0.0;
    for (double v : p.mean_prob.row(r)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Forward, IdenticalMembersGiveIdenticalPredictions) {
  std::mt19937_64 gen(2);
  EnsembleModel m = init_ensemble(kSpec, SharingScheme::independent(), 2, 3);
  for (auto& p : m.params) {
    if (p.owner == 1u) {
      std::string twin = p.name;
      twin[1] = '0';
      p.value = m.params[*m.find(twin)].value;
    }
  }
  const EnsemblePrediction p = forward_all(m, uniform_matrix(5, 6, gen));
  EXPECT_EQ(p.probs[0], p.probs[1]);
  EXPECT_LT(max_abs_diff(p.probs[0], p.mean_prob), 1e-15);
}

// Hand-written forward of one MLP, used as the reference for every scheme.
Matrix reference_logits(const EnsembleModel& m, std::size_t member, const Matrix& x) {
  Matrix h = x;
  for (std::size_t l = 0; l < m.spec.layers(); ++l) {
    const Matrix w = effective_weight(m, member, l);
    const Matrix& b = m.params[m.layout[member][l].bias].value;
    Matrix out = matmul(h, w);
    for (std::size_t r = 0; r < out.rows(); ++r)
      for (std::size_t c = 0; c < out.cols(); ++c) {
        out(r, c) += b(0, c);
        if (l + 1 < m.spec.layers()) out(r, c) = std::max(0.0, out(r, c));
      }
    h = out;
  }
  return h;
}

TEST(Forward, MatchesReferenceForEveryScheme) {
  std::mt19937_64 gen(4);
  const Matrix x = uniform_matrix(7, 6, gen);
  for (auto scheme : {SharingScheme::independent(), SharingScheme::tree_split(2),
                      SharingScheme::rank1_factorized()}) {
    const EnsembleModel m = init_ensemble(kSpec, scheme, 3, 5);
    const EnsemblePrediction p = forward_all(m, x);
    for (std::size_t j = 0; j < 3; ++j)
      EXPECT_LT(max_abs_diff(p.logits[j], reference_logits(m, j, x)), 1e-12) << to_string(scheme);
  }
}

TEST(Forward, Rank1WithUnitFactorsEqualsSharedWeights) {
  std::mt19937_64 gen(6);
  EnsembleModel m = init_ensemble(kSpec, SharingScheme::rank1_factorized(), 3, 7);
  for (auto& p : m.params)
    if (p.role == ParamRole::rank1_r || p.role == ParamRole::rank1_s)
      for (double& v : p.value.data()) v = 1.0;
  // Member biases differ only if initialized differently; they start at zero.
  const EnsemblePrediction p = forward_all(m, uniform_matrix(4, 6, gen));
  EXPECT_LT(max_abs_diff(p.logits[0], p.logits[1]), 1e-15);
  EXPECT_LT(max_abs_diff(p.logits[0], p.logits[2]), 1e-15);
}

TEST(Forward, RejectsWrongInputWidth) {
  const EnsembleModel m = init_ensemble(kSpec, SharingScheme::independent(), 2, 0);
  EXPECT_THROW(forward_all(m, Matrix(3, 5)), ShapeError);
}

TEST(Forward, IsPure) {
  std::mt19937_64 gen(8);
  const EnsembleModel m = init_ensemble(kSpec, SharingScheme::tree_split(1), 3, 1);
  const Matrix x = uniform_matrix(6, 6, gen);
  EXPECT_EQ(forward_all(m, x).mean_prob, forward_all(m, x).mean_prob);
}

TEST(ParameterVector, TreeSplitMembersAgreeOnTrunkPrefix) {
  const EnsembleModel m = init_ensemble(kSpec, SharingScheme::tree_split(2), 3, 1);
  const auto a = member_parameter_vector(m, 0);
  const auto b = member_parameter_vector(m, 1);
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(a.size(), kSpec.single_member_parameters());
  const std::size_t trunk = 6 * 8 + 8 + 8 * 8 + 8;
  for (std::size_t i = 0; i < trunk; ++i) ASSERT_EQ(a[i], b[i]);
  EXPECT_NE(std::vector<double>(a.begin() + trunk, a.end()),
            std::vector<double>(b.begin() + trunk, b.end()));
  EXPECT_EQ(member_owned_parameter_vector(m, 0).size(), a.size() - trunk);
}

TEST(ParameterVector, LengthIsSumOfTensorSizes) {
  const EnsembleModel m = init_ensemble(kSpec, SharingScheme::rank1_factorized(), 2, 1);
  std::size_t total = 0;
  for (std::size_t idx : member_tensor_indices(m, 1, false)) total += m.params[idx].value.size();
  EXPECT_EQ(member_parameter_vector(m, 1).size(), total);
  EXPECT_THROW(member_parameter_vector(m, 2), UsageError);
}

// Trunk gradient of a summed per-member loss equals the sum of single-member
// gradients.
TEST(Gradients, TrunkAccumulatesAcrossMembers) {
  std::mt19937_64 gen(10);
  const EnsembleModel m = init_ensemble(kSpec, SharingScheme::tree_split(2), 3, 2);
  const Matrix x = uniform_matrix(5, 6, gen);
  const std::size_t trunk = *m.find("shared.l0.W");

  ad::Tape full;
  BoundModel bound = bind(full, m);
  EnsembleVars out = forward(bound, full.constant(x));
  std::vector<ad::Var> terms;
  for (const auto& z : out.logits) terms.push_back(ad::sum(ad::square(z)));
  full.backward(ad::sum_of(terms));
  const Matrix total = bound.params[trunk].grad();

  Matrix summed(total.rows(), total.cols());
  for (std::size_t j = 0; j < 3; ++j) {
    ad::Tape t;
    BoundModel b = bind(t, m);
    EnsembleVars o = forward(b, t.constant(x));
    t.backward(ad::sum(ad::square(o.logits[j])));
    for (std::size_t k = 0; k < summed.size(); ++k) summed.data()[k] += b.params[trunk].grad().data()[k];
  }
  double diff = 0.0, norm = 0.0;
  for (std::size_t k = 0; k < summed.size(); ++k) {
    diff += std::pow(summed.data()[k] - total.data()[k], 2);
    norm += std::pow(total.data()[k], 2);
  }
  EXPECT_LT(std::sqrt(diff / norm), 1e-10);
}

TEST(Checkpoint, RoundTripsBitExactly) {
  const EnsembleModel m = init_ensemble(kSpec, SharingScheme::rank1_factorized(), 3, 11);
  const EnsembleModel back = deserialize_checkpoint(serialize_checkpoint(m));
  EXPECT_EQ(back.scheme, m.scheme);
  EXPECT_EQ(back.members, m.members);
  EXPECT_EQ(back.seed, m.seed);
  ASSERT_EQ(back.params.size(), m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i) EXPECT_EQ(back.params[i].value, m.params[i].value);
}

TEST(Checkpoint, ShapeMismatchIsRejected) {
  const EnsembleModel m = init_ensemble(kSpec, SharingScheme::independent(), 2, 1);
  TensorArchive ar = checkpoint_archive(m);
  ar.tensors[0].second = Matrix(1, 1);
  EXPECT_THROW(model_from_archive(ar), FormatError);
}

}  // namespace
}  // namespace divens
