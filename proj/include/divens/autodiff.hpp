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
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "divens/matrix.hpp"

namespace divens::ad {

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  const Matrix& grad() const;
  bool requires_grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so parents
// always precede children and the provenance graph is acyclic by
// construction. A tape is single-threaded.
class Tape {
 public:
  // Accumulates the node's incoming gradient into its parents.
  using BackwardFn = std::function<void(Tape&, const Matrix& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var parameter(Matrix value);

  // Records an operation result. `fn` may be empty when no parent needs a
  // gradient.
  Var record(Matrix value, std::span<const Var> parents, BackwardFn fn,
             std::string_view op);

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. The loss must
  // be 1x1. A second call requires zero_grad() first.
  void backward(Var loss);
  void zero_grad();

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::string_view op(std::size_t id) const { return nodes_[id].op; }
  std::span<const std::size_t> parents(std::size_t id) const {
    return nodes_[id].parents;
  }
  std::size_t size() const { return nodes_.size(); }

  // Adds `delta` into the gradient of `target` if it requires one.
  void accumulate(Var target, const Matrix& delta);
  // Direct access for kernels that scatter into a parent gradient.
  Matrix* grad_buffer(Var target);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    std::string_view op;
  };

  std::vector<Node> nodes_;
  bool swept_ = false;
};

// ---- elementwise and structural ops ----------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
Var neg(Var a);
Var square(Var a);
Var sqrt(Var a);
Var log(Var a);
// log(max(a, floor)); zero gradient where the floor is active.
Var log_floor(Var a, double floor);
Var relu(Var a);
Var tanh(Var a);

// a (R x C) op row (1 x C), broadcast over rows.
Var add_row(Var a, Var row);
Var mul_row(Var a, Var row);
// a (R x C) op col (R x 1), broadcast over columns.
Var mul_col(Var a, Var col);
Var div_col(Var a, Var col);

Var sum(Var a);        // 1x1
Var mean(Var a);       // 1x1
Var sum_rows(Var a);   // R x 1, sums across each row
Var sum_of(std::span<const Var> terms);

Var softmax_rows(Var z);
Var log_softmax_rows(Var z);

// Each row divided by max(||row||_2, eps).
Var normalize_rows(Var a, double eps);
// Each column divided by max(||col||_2, eps).
Var normalize_columns(Var y, double eps);

// log det(Y^T Y + jitter I) for a C x M matrix Y via Cholesky of the Gram.
Var log_det_gram(Var y, double jitter);
// Per-row batched form: sample b stacks row b of every member matrix as the
// columns of its own Y_b. Returns B x 1.
Var batched_log_det_gram(std::span<const Var> members, double jitter);

// out[b] = a[b, labels[b]]; R x 1.
Var pick(Var a, std::span<const int> labels);
// Removes column labels[b] from row b; R x (C-1).
Var drop_label_column(Var a, std::span<const int> labels);
// Row-major concatenation of all entries into a 1 x P row.
Var flatten_concat(std::span<const Var> parts);
// Vertical concatenation of equal-width blocks.
Var vstack(std::span<const Var> blocks);

}  // namespace divens::ad
