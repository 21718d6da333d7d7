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

#include "divens/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>

#include "divens/errors.hpp"

namespace divens::ad {

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Matrix value) {
  Node node;
  node.grad = Matrix(value.rows(), value.cols());
  node.value = std::move(value);
  node.op = "constant";
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Matrix value) {
  Node node;
  node.grad = Matrix(value.rows(), value.cols());
  node.value = std::move(value);
  node.requires_grad = true;
  node.op = "parameter";
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::span<const Var> parents, BackwardFn fn,
                 std::string_view op) {
  Node node;
  node.grad = Matrix(value.rows(), value.cols());
  node.value = std::move(value);
  node.op = op;
  for (const Var& p : parents) {
    if (p.tape_ != this) throw UsageError("operands live on different tapes");
    node.parents.push_back(p.id_);
    node.requires_grad = node.requires_grad || nodes_[p.id_].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
  if (loss.tape_ != this) throw UsageError("backward: loss is on another tape");
  const Matrix& v = nodes_[loss.id_].value;
  if (v.rows() != 1 || v.cols() != 1) {
    throw UsageError("backward: root must be a scalar node, got " +
                     v.shape_string());
  }
  if (swept_) {
    throw UsageError("backward: gradients already populated; call zero_grad()");
  }
  swept_ = true;
  nodes_[loss.id_].grad(0, 0) += 1.0;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || !node.backward) continue;
    // The callback may append nothing, so the reference stays valid.
    node.backward(*this, node.grad);
  }
}

void Tape::zero_grad() {
  for (Node& node : nodes_) std::fill(node.grad.data().begin(), node.grad.data().end(), 0.0);
  swept_ = false;
}

void Tape::accumulate(Var target, const Matrix& delta) {
  Node& node = nodes_[target.id_];
  if (!node.requires_grad) return;
  auto dst = node.grad.data();
  auto src = delta.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Matrix* Tape::grad_buffer(Var target) {
  Node& node = nodes_[target.id_];
  return node.requires_grad ? &node.grad : nullptr;
}

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() +
                     " vs " + b.shape_string());
  }
}

template <typename F>
Matrix map(const Matrix& a, F f) {
  Matrix out(a.rows(), a.cols());
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

// Unary op whose local derivative depends on (input, output).
template <typename Fwd, typename Deriv>
Var unary(Var a, std::string_view name, Fwd fwd, Deriv deriv) {
  Matrix out = map(a.value(), fwd);
  Var parents[] = {a};
  return a.tape().record(
      std::move(out), parents,
      [a, deriv](Tape& t, const Matrix& g) {
        Matrix* ga = t.grad_buffer(a);
        if (!ga) return;
        auto x = a.value().data();
        auto gd = g.data();
        auto dst = ga->data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gd[i] * deriv(x[i]);
      },
      name);
}

}  // namespace

Var matmul(Var a, Var b) {
  Matrix out = divens::matmul(a.value(), b.value());
  Var parents[] = {a, b};
  return a.tape().record(
      std::move(out), parents,
      [a, b](Tape& t, const Matrix& g) {
        if (a.requires_grad()) t.accumulate(a, matmul_nt(g, b.value()));
        if (b.requires_grad()) t.accumulate(b, matmul_tn(a.value(), g));
      },
      "matmul");
}

Var transpose(Var a) {
  Var parents[] = {a};
  return a.tape().record(
      a.value().transposed(), parents,
      [a](Tape& t, const Matrix& g) { t.accumulate(a, g.transposed()); },
      "transpose");
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value();
  auto bd = b.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] += bd[i];
  Var parents[] = {a, b};
  return a.tape().record(
      std::move(out), parents,
      [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
      },
      "add");
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Matrix out = a.value();
  auto bd = b.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] -= bd[i];
  Var parents[] = {a, b};
  return a.tape().record(
      std::move(out), parents,
      [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        if (Matrix* gb = t.grad_buffer(b)) {
          auto dst = gb->data();
          auto gd = g.data();
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= gd[i];
        }
      },
      "sub");
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Matrix out = a.value();
  auto bd = b.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] *= bd[i];
  Var parents[] = {a, b};
  return a.tape().record(
      std::move(out), parents,
      [a, b](Tape& t, const Matrix& g) {
        auto gd = g.data();
        if (Matrix* ga = t.grad_buffer(a)) {
          auto bv = b.value().data();
          auto dst = ga->data();
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gd[i] * bv[i];
        }
        if (Matrix* gb = t.grad_buffer(b)) {
          auto av = a.value().data();
          auto dst = gb->data();
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gd[i] * av[i];
        }
      },
      "mul");
}

Var div(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "div");
  Matrix out = a.value();
  auto bd = b.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] /= bd[i];
  Var parents[] = {a, b};
  return a.tape().record(
      std::move(out), parents,
      [a, b](Tape& t, const Matrix& g) {
        auto gd = g.data();
        auto av = a.value().data();
        auto bv = b.value().data();
        if (Matrix* ga = t.grad_buffer(a)) {
          auto dst = ga->data();
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gd[i] / bv[i];
        }
        if (Matrix* gb = t.grad_buffer(b)) {
          auto dst = gb->data();
          for (std::size_t i = 0; i < dst.size(); ++i)
            dst[i] -= gd[i] * av[i] / (bv[i] * bv[i]);
        }
      },
      "div");
}

Var scale(Var a, double factor) {
  return unary(a, "scale", [factor](double x) { return factor * x; },
               [factor](double) { return factor; });
}

Var add_scalar(Var a, double offset) {
  return unary(a, "add_scalar", [offset](double x) { return x + offset; },
               [](double) { return 1.0; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var square(Var a) {
  return unary(a, "square", [](double x) { return x * x; },
               [](double x) { return 2.0 * x; });
}

Var sqrt(Var a) {
  return unary(a, "sqrt", [](double x) { return std::sqrt(x); },
               [](double x) { return 0.5 / std::sqrt(x); });
}

Var log(Var a) {
  return unary(a, "log", [](double x) { return std::log(x); },
               [](double x) { return 1.0 / x; });
}

Var log_floor(Var a, double floor) {
  return unary(a, "log_floor",
               [floor](double x) { return std::log(std::max(x, floor)); },
               [floor](double x) { return x > floor ? 1.0 / x : 0.0; });
}

Var relu(Var a) {
  return unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var tanh(Var a) {
  return unary(a, "tanh", [](double x) { return std::tanh(x); },
               [](double x) {
                 const double th = std::tanh(x);
                 return 1.0 - th * th;
               });
}

Var add_row(Var a, Var row) {
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw ShapeError("add_row: " + av.shape_string() + " + " + rv.shape_string());
  }
  Matrix out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += rv(0, c);
  Var parents[] = {a, row};
  return a.tape().record(
      std::move(out), parents,
      [a, row](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        if (Matrix* gr = t.grad_buffer(row)) {
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) (*gr)(0, c) += g(r, c);
        }
      },
      "add_row");
}

Var mul_row(Var a, Var row) {
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw ShapeError("mul_row: " + av.shape_string() + " * " + rv.shape_string());
  }
  Matrix out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) *= rv(0, c);
  Var parents[] = {a, row};
  return a.tape().record(
      std::move(out), parents,
      [a, row](Tape& t, const Matrix& g) {
        const Matrix& av = a.value();
        const Matrix& rv = row.value();
        if (Matrix* ga = t.grad_buffer(a)) {
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) (*ga)(r, c) += g(r, c) * rv(0, c);
        }
        if (Matrix* gr = t.grad_buffer(row)) {
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) (*gr)(0, c) += g(r, c) * av(r, c);
        }
      },
      "mul_row");
}

Var mul_col(Var a, Var col) {
  const Matrix& av = a.value();
  const Matrix& cv = col.value();
  if (cv.cols() != 1 || cv.rows() != av.rows()) {
    throw ShapeError("mul_col: " + av.shape_string() + " * " + cv.shape_string());
  }
  Matrix out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) *= cv(r, 0);
  Var parents[] = {a, col};
  return a.tape().record(
      std::move(out), parents,
      [a, col](Tape& t, const Matrix& g) {
        const Matrix& av = a.value();
        const Matrix& cv = col.value();
        if (Matrix* ga = t.grad_buffer(a)) {
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) (*ga)(r, c) += g(r, c) * cv(r, 0);
        }
        if (Matrix* gc = t.grad_buffer(col)) {
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) (*gc)(r, 0) += g(r, c) * av(r, c);
        }
      },
      "mul_col");
}

Var div_col(Var a, Var col) {
  const Matrix& av = a.value();
  const Matrix& cv = col.value();
  if (cv.cols() != 1 || cv.rows() != av.rows()) {
    throw ShapeError("div_col: " + av.shape_string() + " / " + cv.shape_string());
  }
  Matrix out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) /= cv(r, 0);
  Var parents[] = {a, col};
  return a.tape().record(
      std::move(out), parents,
      [a, col](Tape& t, const Matrix& g) {
        const Matrix& av = a.value();
        const Matrix& cv = col.value();
        if (Matrix* ga = t.grad_buffer(a)) {
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) (*ga)(r, c) += g(r, c) / cv(r, 0);
        }
        if (Matrix* gc = t.grad_buffer(col)) {
          for (std::size_t r = 0; r < g.rows(); ++r) {
            const double d = cv(r, 0);
            for (std::size_t c = 0; c < g.cols(); ++c)
              (*gc)(r, 0) -= g(r, c) * av(r, c) / (d * d);
          }
        }
      },
      "div_col");
}

Var sum(Var a) {
  double acc = 0.0;
  for (double v : a.value().data()) acc += v;
  Var parents[] = {a};
  return a.tape().record(
      Matrix::scalar(acc), parents,
      [a](Tape& t, const Matrix& g) {
        if (Matrix* ga = t.grad_buffer(a)) {
          const double gv = g(0, 0);
          for (double& v : ga->data()) v += gv;
        }
      },
      "sum");
}

Var mean(Var a) {
  const auto n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean of an empty matrix");
  double acc = 0.0;
  for (double v : a.value().data()) acc += v;
  Var parents[] = {a};
  return a.tape().record(
      Matrix::scalar(acc / n), parents,
      [a, n](Tape& t, const Matrix& g) {
        if (Matrix* ga = t.grad_buffer(a)) {
          const double gv = g(0, 0) / n;
          for (double& v : ga->data()) v += gv;
        }
      },
      "mean");
}

Var sum_rows(Var a) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), 1);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    double acc = 0.0;
    for (double v : av.row(r)) acc += v;
    out(r, 0) = acc;
  }
  Var parents[] = {a};
  return a.tape().record(
      std::move(out), parents,
      [a](Tape& t, const Matrix& g) {
        if (Matrix* ga = t.grad_buffer(a)) {
          for (std::size_t r = 0; r < ga->rows(); ++r)
            for (double& v : ga->row(r)) v += g(r, 0);
        }
      },
      "sum_rows");
}

Var sum_of(std::span<const Var> terms) {
  if (terms.empty()) throw UsageError("sum_of: no terms");
  Var acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

Var softmax_rows(Var z) {
  const Matrix& zv = z.value();
  Matrix out(zv.rows(), zv.cols());
  for (std::size_t r = 0; r < zv.rows(); ++r) {
    auto in = zv.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = std::exp(in[c] - mx);
      total += o[c];
    }
    for (double& v : o) v /= total;
  }
  Var parents[] = {z};
  Matrix probs = out;
  return z.tape().record(
      std::move(out), parents,
      [z, probs = std::move(probs)](Tape& t, const Matrix& g) {
        Matrix* gz = t.grad_buffer(z);
        if (!gz) return;
        for (std::size_t r = 0; r < g.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < g.cols(); ++c) dot += g(r, c) * probs(r, c);
          for (std::size_t c = 0; c < g.cols(); ++c)
            (*gz)(r, c) += probs(r, c) * (g(r, c) - dot);
        }
      },
      "softmax_rows");
}

Var log_softmax_rows(Var z) {
  const Matrix& zv = z.value();
  Matrix out(zv.rows(), zv.cols());
  Matrix probs(zv.rows(), zv.cols());
  for (std::size_t r = 0; r < zv.rows(); ++r) {
    auto in = zv.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (double v : in) total += std::exp(v - mx);
    const double lse = mx + std::log(total);
    for (std::size_t c = 0; c < in.size(); ++c) {
      out(r, c) = in[c] - lse;
      probs(r, c) = std::exp(out(r, c));
    }
  }
  Var parents[] = {z};
  return z.tape().record(
      std::move(out), parents,
      [z, probs = std::move(probs)](Tape& t, const Matrix& g) {
        Matrix* gz = t.grad_buffer(z);
        if (!gz) return;
        for (std::size_t r = 0; r < g.rows(); ++r) {
          double total = 0.0;
          for (std::size_t c = 0; c < g.cols(); ++c) total += g(r, c);
          for (std::size_t c = 0; c < g.cols(); ++c)
            (*gz)(r, c) += g(r, c) - probs(r, c) * total;
        }
      },
      "log_softmax_rows");
}

namespace {

// Shared kernel: normalizes each of `count` vectors of length `len` laid out
// with the given strides. Used by both the row and column variants.
struct StridedLayout {
  std::size_t count;
  std::size_t len;
  std::size_t vec_stride;
  std::size_t elem_stride;
};

Var normalize_strided(Var a, double eps, StridedLayout lay, std::string_view name) {
  if (!(eps > 0.0)) throw UsageError("normalize: eps must be positive");
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  std::vector<double> norms(lay.count);
  auto in = av.data();
  auto o = out.data();
  for (std::size_t v = 0; v < lay.count; ++v) {
    double sq = 0.0;
    for (std::size_t e = 0; e < lay.len; ++e) {
      const double x = in[v * lay.vec_stride + e * lay.elem_stride];
      sq += x * x;
    }
    norms[v] = std::sqrt(sq);
    const double denom = std::max(norms[v], eps);
    for (std::size_t e = 0; e < lay.len; ++e) {
      const std::size_t idx = v * lay.vec_stride + e * lay.elem_stride;
      o[idx] = in[idx] / denom;
    }
  }
  Var parents[] = {a};
  Matrix unit = out;
  return a.tape().record(
      std::move(out), parents,
      [a, eps, lay, norms = std::move(norms), unit = std::move(unit)](
          Tape& t, const Matrix& g) {
        Matrix* ga = t.grad_buffer(a);
        if (!ga) return;
        auto gd = g.data();
        auto y = unit.data();
        auto dst = ga->data();
        for (std::size_t v = 0; v < lay.count; ++v) {
          if (norms[v] >= eps) {
            double dot = 0.0;
            for (std::size_t e = 0; e < lay.len; ++e) {
              const std::size_t idx = v * lay.vec_stride + e * lay.elem_stride;
              dot += y[idx] * gd[idx];
            }
            for (std::size_t e = 0; e < lay.len; ++e) {
              const std::size_t idx = v * lay.vec_stride + e * lay.elem_stride;
              dst[idx] += (gd[idx] - y[idx] * dot) / norms[v];
            }
          } else {
            for (std::size_t e = 0; e < lay.len; ++e) {
              const std::size_t idx = v * lay.vec_stride + e * lay.elem_stride;
              dst[idx] += gd[idx] / eps;
            }
          }
        }
      },
      name);
}

// log det(Y^T Y + jitter I) and dL/dY = 2 Y (Y^T Y + jitter I)^-1 for the
// C x M matrix whose column m is given by `column(m)`.
struct GramResult {
  double log_det;
  Matrix inverse;
};

GramResult gram_log_det(const Matrix& y, double jitter) {
  Matrix gram = matmul_tn(y, y);
  for (std::size_t i = 0; i < gram.rows(); ++i) gram(i, i) += jitter;
  Matrix lower = cholesky(gram);
  return {cholesky_log_det(lower), cholesky_inverse(lower)};
}

}  // namespace

Var normalize_rows(Var a, double eps) {
  const Matrix& av = a.value();
  return normalize_strided(a, eps, {av.rows(), av.cols(), av.cols(), 1},
                           "normalize_rows");
}

Var normalize_columns(Var y, double eps) {
  const Matrix& yv = y.value();
  return normalize_strided(y, eps, {yv.cols(), yv.rows(), 1, yv.cols()},
                           "normalize_columns");
}

Var log_det_gram(Var y, double jitter) {
  if (jitter < 0.0) throw UsageError("log_det_gram: jitter must be >= 0");
  GramResult res = gram_log_det(y.value(), jitter);
  Var parents[] = {y};
  return y.tape().record(
      Matrix::scalar(res.log_det), parents,
      [y, inv = std::move(res.inverse)](Tape& t, const Matrix& g) {
        Matrix* gy = t.grad_buffer(y);
        if (!gy) return;
        Matrix d = divens::matmul(y.value(), inv);
        const double factor = 2.0 * g(0, 0);
        auto dst = gy->data();
        auto src = d.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * src[i];
      },
      "log_det_gram");
}

Var batched_log_det_gram(std::span<const Var> members, double jitter) {
  if (members.empty()) throw UsageError("batched_log_det_gram: no members");
  if (jitter < 0.0) throw UsageError("batched_log_det_gram: jitter must be >= 0");
  const std::size_t batch = members[0].rows();
  const std::size_t dim = members[0].cols();
  for (const Var& m : members) {
    if (m.rows() != batch || m.cols() != dim) {
      throw ShapeError("batched_log_det_gram: member shapes differ");
    }
  }
  const std::size_t count = members.size();
  Matrix out(batch, 1);
  // Per-sample gradient factor 2 Y_b G_b^-1, stored as M blocks of B x D.
  std::vector<Matrix> dy(count, Matrix(batch, dim));
  Matrix y(dim, count);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t m = 0; m < count; ++m) {
      auto row = members[m].value().row(b);
      for (std::size_t k = 0; k < dim; ++k) y(k, m) = row[k];
    }
    GramResult res = gram_log_det(y, jitter);
    out(b, 0) = res.log_det;
    Matrix d = divens::matmul(y, res.inverse);
    for (std::size_t m = 0; m < count; ++m)
      for (std::size_t k = 0; k < dim; ++k) dy[m](b, k) = 2.0 * d(k, m);
  }
  std::vector<Var> parents(members.begin(), members.end());
  return members[0].tape().record(
      std::move(out), parents,
      [parents, dy = std::move(dy)](Tape& t, const Matrix& g) {
        for (std::size_t m = 0; m < parents.size(); ++m) {
          Matrix* gm = t.grad_buffer(parents[m]);
          if (!gm) continue;
          for (std::size_t b = 0; b < g.rows(); ++b) {
            const double gb = g(b, 0);
            auto src = dy[m].row(b);
            auto dst = gm->row(b);
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += gb * src[k];
          }
        }
      },
      "batched_log_det_gram");
}

Var pick(Var a, std::span<const int> labels) {
  const Matrix& av = a.value();
  if (labels.size() != av.rows()) throw ShapeError("pick: label count mismatch");
  Matrix out(av.rows(), 1);
  std::vector<int> idx(labels.begin(), labels.end());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= av.cols()) {
      throw ShapeError("pick: label out of range");
    }
    out(r, 0) = av(r, static_cast<std::size_t>(idx[r]));
  }
  Var parents[] = {a};
  return a.tape().record(
      std::move(out), parents,
      [a, idx = std::move(idx)](Tape& t, const Matrix& g) {
        if (Matrix* ga = t.grad_buffer(a)) {
          for (std::size_t r = 0; r < idx.size(); ++r)
            (*ga)(r, static_cast<std::size_t>(idx[r])) += g(r, 0);
        }
      },
      "pick");
}

Var drop_label_column(Var a, std::span<const int> labels) {
  const Matrix& av = a.value();
  if (labels.size() != av.rows()) {
    throw ShapeError("drop_label_column: label count mismatch");
  }
  if (av.cols() < 2) throw ShapeError("drop_label_column: need >= 2 columns");
  Matrix out(av.rows(), av.cols() - 1);
  std::vector<int> idx(labels.begin(), labels.end());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    const auto k = static_cast<std::size_t>(idx[r]);
    if (idx[r] < 0 || k >= av.cols()) {
      throw ShapeError("drop_label_column: label out of range");
    }
    std::size_t o = 0;
    for (std::size_t c = 0; c < av.cols(); ++c)
      if (c != k) out(r, o++) = av(r, c);
  }
  Var parents[] = {a};
  return a.tape().record(
      std::move(out), parents,
      [a, idx = std::move(idx)](Tape& t, const Matrix& g) {
        Matrix* ga = t.grad_buffer(a);
        if (!ga) return;
        for (std::size_t r = 0; r < g.rows(); ++r) {
          const auto k = static_cast<std::size_t>(idx[r]);
          std::size_t o = 0;
          for (std::size_t c = 0; c < ga->cols(); ++c)
            if (c != k) (*ga)(r, c) += g(r, o++);
        }
      },
      "drop_label_column");
}

Var flatten_concat(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("flatten_concat: no parts");
  std::size_t total = 0;
  for (const Var& p : parts) total += p.value().size();
  std::vector<double> flat;
  flat.reserve(total);
  for (const Var& p : parts)
    flat.insert(flat.end(), p.value().data().begin(), p.value().data().end());
  std::vector<Var> parents(parts.begin(), parts.end());
  Matrix out(1, total);
  std::copy(flat.begin(), flat.end(), out.data().begin());
  return parts[0].tape().record(
      std::move(out), parents,
      [parents](Tape& t, const Matrix& g) {
        std::size_t offset = 0;
        for (const Var& p : parents) {
          const std::size_t n = p.value().size();
          if (Matrix* gp = t.grad_buffer(p)) {
            auto dst = gp->data();
            for (std::size_t i = 0; i < n; ++i) dst[i] += g.data()[offset + i];
          }
          offset += n;
        }
      },
      "flatten_concat");
}

Var vstack(std::span<const Var> blocks) {
  if (blocks.empty()) throw UsageError("vstack: no blocks");
  const std::size_t cols = blocks[0].cols();
  std::size_t rows = 0;
  for (const Var& b : blocks) {
    if (b.cols() != cols) throw ShapeError("vstack: column count mismatch");
    rows += b.rows();
  }
  Matrix out(rows, cols);
  std::size_t offset = 0;
  for (const Var& b : blocks) {
    auto src = b.value().data();
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += src.size();
  }
  std::vector<Var> parents(blocks.begin(), blocks.end());
  return blocks[0].tape().record(
      std::move(out), parents,
      [parents](Tape& t, const Matrix& g) {
        std::size_t offset = 0;
        for (const Var& p : parents) {
          const std::size_t n = p.value().size();
          if (Matrix* gp = t.grad_buffer(p)) {
            auto dst = gp->data();
            for (std::size_t i = 0; i < n; ++i) dst[i] += g.data()[offset + i];
          }
          offset += n;
        }
      },
      "vstack");
}

}  // namespace divens::ad
