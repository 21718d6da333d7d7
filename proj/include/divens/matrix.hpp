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
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace divens {

// Dense row-major matrix of doubles.
//
// Construction from external data rejects non-finite entries. Kernels inside
// the library fill zero-initialized matrices through the mutable accessors
// and do not re-validate; the training loop checks the loss instead.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix filled(std::size_t rows, std::size_t cols, double value);
  static Matrix row_vector(std::span<const double> values);
  static Matrix column_vector(std::span<const double> values);
  static Matrix scalar(double value) { return filled(1, 1, value); }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }
  double& operator()(std::size_t r, std::size_t c) {
    return data_[r * cols_ + c];
  }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }

  // Value of a 1x1 matrix.
  double item() const;

  Matrix transposed() const;
  std::string shape_string() const;

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
// a^T * b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// a * b^T without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

bool all_finite(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);

// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
// Throws NumericalError carrying the failing pivot index.
Matrix cholesky(const Matrix& spd);
// Inverse of an SPD matrix given its Cholesky factor.
Matrix cholesky_inverse(const Matrix& lower);
double cholesky_log_det(const Matrix& lower);

}  // namespace divens
