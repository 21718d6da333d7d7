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

#include "divens/autodiff.hpp"
#include "divens/errors.hpp"
#include "test_util.hpp"

namespace divens {
namespace {

using testing::determinant;
using testing::fd_relative_error;
using testing::random_matrix;
using testing::uniform_matrix;

constexpr double kTol = 1e-6;

struct OpCase {
  const char* name;
  testing::Fn fn;
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  bool positive = false;
};

class OpGradient : public ::testing::TestWithParam<int> {};

std::vector<OpCase> op_cases() {
  using V = const std::vector<ad::Var>&;
  return {
      {"matmul", [](ad::Tape&, V x) { return ad::sum(ad::matmul(x[0], x[1])); }, {{3, 4}, {4, 2}}},
      {"transpose_mul",
       [](ad::Tape&, V x) { return ad::sum(ad::mul(ad::transpose(x[0]), x[1])); },
       {{3, 2}, {2, 3}}},
      {"add_sub_mul",
       [](ad::Tape&, V x) { return ad::sum(ad::mul(ad::add(x[0], x[1]), ad::sub(x[0], x[1]))); },
       {{2, 3}, {2, 3}}},
      {"div", [](ad::Tape&, V x) { return ad::sum(ad::div(x[0], x[1])); }, {{2, 3}, {2, 3}}, true},
      {"scale_shift_neg",
       [](ad::Tape&, V x) {
         return ad::sum(ad::square(ad::neg(ad::add_scalar(ad::scale(x[0], 1.7), 0.3))));
       },
       {{3, 3}}},
      {"sqrt_log", [](ad::Tape&, V x) { return ad::sum(ad::log(ad::sqrt(x[0]))); }, {{2, 4}}, true},
      {"tanh_relu",
       [](ad::Tape&, V x) { return ad::sum(ad::mul(ad::tanh(x[0]), ad::relu(x[0]))); },
       {{4, 4}}},
      {"broadcasts",
       [](ad::Tape&, V x) {
         return ad::sum(ad::div_col(ad::mul_col(ad::mul_row(ad::add_row(x[0], x[1]), x[1]), x[2]),
                                    ad::add_scalar(ad::square(x[2]), 1.0)));
       },
       {{3, 4}, {1, 4}, {3, 1}}},
      {"reductions",
       [](ad::Tape&, V x) {
         return ad::mean(ad::square(ad::sum_rows(x[0])));
       },
       {{4, 3}}},
      {"softmax",
       [](ad::Tape&, V x) { return ad::sum(ad::mul(ad::softmax_rows(x[0]), x[1])); },
       {{3, 5}, {3, 5}}},
      {"log_softmax",
       [](ad::Tape&, V x) { return ad::sum(ad::mul(ad::log_softmax_rows(x[0]), x[1])); },
       {{3, 5}, {3, 5}}},
      {"normalize_rows",
       [](ad::Tape&, V x) { return ad::sum(ad::mul(ad::normalize_rows(x[0], 1e-8), x[1])); },
       {{3, 4}, {3, 4}}},
      {"normalize_columns",
       [](ad::Tape&, V x) { return ad::sum(ad::mul(ad::normalize_columns(x[0], 1e-8), x[1])); },
       {{4, 3}, {4, 3}}},
      {"log_det_gram", [](ad::Tape&, V x) { return ad::log_det_gram(x[0], 1e-6); }, {{5, 3}}},
      {"batched_log_det",
       [](ad::Tape&, V x) {
         std::vector<ad::Var> members(x.begin(), x.end());
         return ad::sum(ad::batched_log_det_gram(members, 1e-6));
       },
       {{2, 4}, {2, 4}, {2, 4}}},
      {"pick_drop",
       [](ad::Tape&, V x) {
         const std::vector<int> labels = {2, 0, 1};
         return ad::add(ad::sum(ad::pick(x[0], labels)),
                        ad::sum(ad::square(ad::drop_label_column(x[0], labels))));
       },
       {{3, 4}}},
      {"flatten_vstack",
       [](ad::Tape&, V x) {
         std::vector<ad::Var> parts = {x[0], x[1]};
         ad::Var flat = ad::flatten_concat(parts);
         std::vector<ad::Var> blocks = {flat, ad::square(flat)};
         return ad::sum(ad::tanh(ad::vstack(blocks)));
       },
       {{2, 2}, {1, 3}}},
  };
}

TEST_P(OpGradient, MatchesCentralDifferences) {
  const OpCase c = op_cases()[static_cast<std::size_t>(GetParam())];
  std::mt19937_64 gen(100 + GetParam());
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Matrix> inputs;
    for (auto [r, k] : c.shapes) {
      inputs.push_back(c.positive ? uniform_matrix(r, k, gen, 0.5, 2.0)
                                  : random_matrix(r, k, gen));
    }
    EXPECT_LT(fd_relative_error(c.fn, inputs), kTol) << c.name << " trial " << trial;
  }
}

INSTANTIATE_TEST_SUITE_P(Ops, OpGradient,
                         ::testing::Range(0, static_cast<int>(op_cases().size())),
                         [](const ::testing::TestParamInfo<int>& info) {
                           return std::string(op_cases()[static_cast<std::size_t>(info.param)].name);
                         });

TEST(LogDetGram, MatchesEliminationDeterminant) {
  std::mt19937_64 gen(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix y = random_matrix(6, 4, gen);
    Matrix g = matmul_tn(y, y);
    for (std::size_t i = 0; i < 4; ++i) g(i, i) += 1e-6;
    ad::Tape tape;
    const double v = ad::log_det_gram(tape.constant(y), 1e-6).value().item();
    EXPECT_NEAR(v, std::log(determinant(g)), 1e-9);
  }
}

TEST(LogDetGram, SingularWithoutJitterReportsPivot) {
  // Two identical columns make the Gram matrix singular at pivot 1.
  const Matrix y{{1, 1}, {0, 0}};
  ad::Tape tape;
  try {
    ad::log_det_gram(tape.constant(y), 0.0);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.pivot(), 1u);
  }
}

TEST(Tape, SecondBackwardNeedsZeroGrad) {
  ad::Tape tape;
  ad::Var x = tape.parameter(Matrix{{2.0}});
  ad::Var y = ad::square(x);
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x.grad().item(), 4.0);
  EXPECT_THROW(tape.backward(y), UsageError);
  tape.zero_grad();
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x.grad().item(), 4.0);
}

TEST(Tape, RootMustBeScalar) {
  ad::Tape tape;
  ad::Var x = tape.parameter(Matrix{{1.0, 2.0}});
  EXPECT_THROW(tape.backward(x), UsageError);
}

TEST(Tape, ParentsPrecedeChildren) {
  ad::Tape tape;
  ad::Var a = tape.parameter(Matrix{{1.0, 2.0}});
  ad::Var b = tape.constant(Matrix{{3.0, 4.0}});
  ad::Var c = ad::sum(ad::mul(ad::add(a, b), a));
  for (std::size_t id = 0; id < tape.size(); ++id)
    for (std::size_t p : tape.parents(id)) EXPECT_LT(p, id);
  tape.backward(c);
  EXPECT_FALSE(b.requires_grad());
}

TEST(Tape, SharedSubexpressionAccumulates) {
  ad::Tape tape;
  ad::Var x = tape.parameter(Matrix{{3.0}});
  ad::Var y = ad::add(ad::mul(x, x), x);  // x^2 + x
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x.grad().item(), 7.0);
}

TEST(Tape, MixingTapesIsRejected) {
  ad::Tape t1, t2;
  ad::Var a = t1.parameter(Matrix{{1.0}});
  ad::Var b = t2.parameter(Matrix{{1.0}});
  EXPECT_THROW(ad::add(a, b), UsageError);
}

TEST(LogFloor, GradientVanishesBelowFloor) {
  ad::Tape tape;
  ad::Var x = tape.parameter(Matrix{{1e-20, 2.0}});
  tape.backward(ad::sum(ad::log_floor(x, 1e-12)));
  EXPECT_EQ(x.grad()(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(x.grad()(0, 1), 0.5);
}

}  // namespace
}  // namespace divens
