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

#include "divens/archive.hpp"
#include "divens/errors.hpp"
#include "divens/matrix.hpp"
#include "divens/rng.hpp"
#include "test_util.hpp"

namespace divens {
namespace {

using testing::determinant;
using testing::random_matrix;

TEST(Matrix, RejectsNonFiniteInput) {
  EXPECT_THROW(Matrix(1, 2, {1.0, NAN}), NumericalError);
  EXPECT_THROW(Matrix(1, 2, {1.0, INFINITY}), NumericalError);
  EXPECT_THROW(Matrix(2, 2, {1.0, 2.0, 3.0}), ShapeError);
}

TEST(Matrix, MatmulVariantsAgree) {
  std::mt19937_64 gen(1);
  const Matrix a = random_matrix(4, 3, gen);
  const Matrix b = random_matrix(4, 5, gen);
  const Matrix c = random_matrix(3, 5, gen);
  EXPECT_LT(max_abs_diff(matmul_tn(a, b), matmul(a.transposed(), b)), 1e-14);
  EXPECT_LT(max_abs_diff(matmul_nt(b, c), matmul(b, c.transposed())), 1e-14);
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Matrix, HandMultiplication) {
  const Matrix a{{1, 2}, {3, 4}};
  const Matrix b{{5, 6}, {7, 8}};
  EXPECT_EQ(matmul(a, b), (Matrix{{19, 22}, {43, 50}}));
}

TEST(Cholesky, ReconstructsAndMatchesDeterminant) {
  std::mt19937_64 gen(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix y = random_matrix(6, 4, gen);
    Matrix g = matmul_tn(y, y);
    for (std::size_t i = 0; i < 4; ++i) g(i, i) += 0.1;
    const Matrix l = cholesky(g);
    EXPECT_LT(max_abs_diff(matmul_nt(l, l), g), 1e-12);
    EXPECT_NEAR(cholesky_log_det(l), std::log(determinant(g)), 1e-10);
    const Matrix inv = cholesky_inverse(l);
    EXPECT_LT(max_abs_diff(matmul(inv, g), Matrix::identity(4)), 1e-10);
  }
}

TEST(Cholesky, ReportsFailingPivot) {
  // Leading 2x2 block is PD; the third pivot is exactly 1 - 1 = 0.
  const Matrix g{{1, 0, 1}, {0, 1, 0}, {1, 0, 1}};
  try {
    cholesky(g);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.pivot(), 2u);
  }
}

// Random123 known-answer vectors for philox4x32-10.
TEST(Philox, KnownAnswerVectors) {
  using A4 = std::array<std::uint32_t, 4>;
  EXPECT_EQ(philox4x32_10({0, 0, 0, 0}, {0, 0}),
            (A4{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8}));
  EXPECT_EQ(philox4x32_10({0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff},
                          {0xffffffff, 0xffffffff}),
            (A4{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd}));
  EXPECT_EQ(philox4x32_10({0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344},
                          {0xa4093822, 0x299f31d0}),
            (A4{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1}));
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42);
  Rng b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, SplitStreamsDiffer) {
  const Rng root(7);
  Rng a = root.split("shuffle");
  Rng b = root.split("ood");
  Rng c = root.split(std::uint64_t{1});
  int same = 0;
  for (int i = 0; i < 64; ++i) {
    const auto x = a.next_u32();
    same += x == b.next_u32();
    same += x == c.next_u32();
  }
  EXPECT_LT(same, 2);
  // Splitting does not depend on how far the parent has advanced.
  Rng advanced(7);
  for (int i = 0; i < 10; ++i) advanced.next_u32();
  EXPECT_EQ(advanced.split("ood").next_u64(), root.split("ood").next_u64());
}

TEST(Rng, MomentsOfUniformAndNormal) {
  constexpr int kDraws = 200000;
  Rng rng(3);
  double su = 0.0, su2 = 0.0, sn = 0.0, sn2 = 0.0;
  for (int i = 0; i < kDraws; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    su2 += u * u;
    const double n = rng.normal();
    sn += n;
    sn2 += n * n;
  }
  // 5 standard errors.
  EXPECT_NEAR(su / kDraws, 0.5, 5 * std::sqrt(1.0 / 12 / kDraws));
  EXPECT_NEAR(su2 / kDraws - std::pow(su / kDraws, 2), 1.0 / 12, 1e-3);
  EXPECT_NEAR(sn / kDraws, 0.0, 5 / std::sqrt(double(kDraws)));
  EXPECT_NEAR(sn2 / kDraws, 1.0, 5 * std::sqrt(2.0 / kDraws));
}

TEST(Rng, BelowIsUnbiasedAndInRange) {
  Rng rng(9);
  std::array<int, 7> counts{};
  constexpr int kDraws = 70000;
  for (int i = 0; i < kDraws; ++i) {
    const auto v = rng.below(7);
    ASSERT_LT(v, 7u);
    counts[v]++;
  }
  for (int c : counts) EXPECT_NEAR(c, kDraws / 7.0, 5 * std::sqrt(kDraws / 7.0));
}

TEST(Archive, RoundTripIsBitExact) {
  std::mt19937_64 gen(5);
  TensorArchive ar;
  ar.set("kind", "test");
  ar.set("note", "two words");
  Matrix m = random_matrix(3, 4, gen, 1e-3);
  m(0, 0) = 5e-324;  // smallest subnormal
  m(0, 1) = -0.0;
  m(0, 2) = 1.0 / 3.0;
  ar.tensors.emplace_back("w", m);
  const TensorArchive back = TensorArchive::deserialize(ar.serialize());
  EXPECT_EQ(back.require("note"), "two words");
  ASSERT_NE(back.tensor("w"), nullptr);
  const Matrix& r = *back.tensor("w");
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_EQ(std::signbit(r.data()[i]), std::signbit(m.data()[i]));
    EXPECT_EQ(r.data()[i], m.data()[i]);
  }
}

TEST(Archive, MalformedInputReportsOffset) {
  EXPECT_THROW(TensorArchive::deserialize("garbage\n"), FormatError);
  const std::string text = "divens-archive 1\ntensor w 1 2\n0x1p+0 zz\nend\n";
  try {
    TensorArchive::deserialize(text);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), text.find("zz"));
  }
  EXPECT_THROW(TensorArchive::deserialize("divens-archive 1\nheader a b\n"), FormatError);
}

}  // namespace
}  // namespace divens
