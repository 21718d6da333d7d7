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

#include "divens/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "divens/errors.hpp"

namespace divens {

namespace {

void require_finite(std::span<const double> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericalError("non-finite matrix entry at flat index " +
                           std::to_string(i));
    }
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                     " does not match " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
  require_finite(data_);
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
  require_finite(data_);
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::filled(std::size_t rows, std::size_t cols, double value) {
  return Matrix(rows, cols, std::vector<double>(rows * cols, value));
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), {values.begin(), values.end()});
}

Matrix Matrix::column_vector(std::span<const double> values) {
  return Matrix(values.size(), 1, {values.begin(), values.end()});
}

double Matrix::item() const {
  if (rows_ != 1 || cols_ != 1) {
    throw ShapeError("item() on non-scalar matrix " + shape_string());
  }
  return data_[0];
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

std::string Matrix::shape_string() const {
  std::ostringstream os;
  os << rows_ << "x" << cols_;
  return os.str();
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + a.shape_string() + " * " + b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* out_row = out.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* b_row = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: " + a.shape_string() + "^T * " +
                     b.shape_string());
  }
  Matrix out(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* b_row = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      if (aki == 0.0) continue;
      double* out_row = out.row(i).data();
      for (std::size_t j = 0; j < n; ++j) out_row[j] += aki * b_row[j];
    }
  }
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + a.shape_string() + " * " +
                     b.shape_string() + "^T");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* a_row = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* b_row = b.row(j).data();
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a_row[k] * b_row[k];
      out(i, j) = acc;
    }
  }
  return out;
}

bool all_finite(const Matrix& m) {
  return std::all_of(m.data().begin(), m.data().end(),
                     [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  return worst;
}

Matrix cholesky(const Matrix& spd) {
  if (spd.rows() != spd.cols()) {
    throw ShapeError("cholesky: non-square " + spd.shape_string());
  }
  const std::size_t n = spd.rows();
  Matrix lower(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = spd(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= lower(j, k) * lower(j, k);
    if (!(diag > 0.0) || !std::isfinite(diag)) {
      throw NumericalError(
          "cholesky: matrix is not positive definite at pivot " +
              std::to_string(j),
          j);
    }
    const double ljj = std::sqrt(diag);
    lower(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = spd(i, j);
      for (std::size_t k = 0; k < j; ++k) v -= lower(i, k) * lower(j, k);
      lower(i, j) = v / ljj;
    }
  }
  return lower;
}

Matrix cholesky_inverse(const Matrix& lower) {
  const std::size_t n = lower.rows();
  // Invert L by forward substitution, then A^-1 = L^-T L^-1.
  Matrix linv(n, n);
  for (std::size_t col = 0; col < n; ++col) {
    for (std::size_t i = col; i < n; ++i) {
      double v = (i == col) ? 1.0 : 0.0;
      for (std::size_t k = col; k < i; ++k) v -= lower(i, k) * linv(k, col);
      linv(i, col) = v / lower(i, i);
    }
  }
  return matmul_tn(linv, linv);
}

double cholesky_log_det(const Matrix& lower) {
  double acc = 0.0;
  for (std::size_t i = 0; i < lower.rows(); ++i) acc += std::log(lower(i, i));
  return 2.0 * acc;
}

}  // namespace divens
