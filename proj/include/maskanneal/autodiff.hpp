#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "maskanneal/mat.hpp"

namespace maskanneal::ad {

template <class Real>
struct TensorData {
  std::size_t rows = 0, cols = 0;
  std::vector<Real> v;
  std::vector<Real> g;       // leaf gradient, sized lazily by backward()
  bool requires_grad = false;  // true only for parameter leaves
  bool needs_grad = false;     // reachable from a parameter leaf
  bool op_output = false;
};

/// Shared handle to a 2-D array of Real. Parameters persist across steps;
/// intermediate results live as long as some handle (or tape node) keeps
/// them alive.
template <class Real>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::size_t r, std::size_t c) { return filled(r, c, Real(0)); }

  static Tensor filled(std::size_t r, std::size_t c, Real x) {
    Tensor t;
    t.d_ = std::make_shared<TensorData<Real>>();
    t.d_->rows = r;
    t.d_->cols = c;
    t.d_->v.assign(r * c, x);
    return t;
  }

  static Tensor constant(const Mat& m) {
    Tensor t = zeros(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.size(); ++i) t.d_->v[i] = Real(m[i]);
    return t;
  }

  static Tensor param(const Mat& m) {
    Tensor t = constant(m);
    t.d_->requires_grad = true;
    t.d_->needs_grad = true;
    return t;
  }

  bool defined() const { return bool(d_); }
  std::size_t rows() const { return d_->rows; }
  std::size_t cols() const { return d_->cols; }
  std::size_t size() const { return d_->v.size(); }
  bool is_scalar() const { return d_->rows == 1 && d_->cols == 1; }

  std::vector<Real>& values() { return d_->v; }
  const std::vector<Real>& values() const { return d_->v; }
  Real item() const {
    if (!is_scalar()) throw std::invalid_argument("item() on non-scalar tensor");
    return d_->v[0];
  }
  Real at(std::size_t r, std::size_t c) const { return d_->v[r * d_->cols + c]; }

  bool requires_grad() const { return d_->requires_grad; }
  bool needs_grad() const { return d_ && d_->needs_grad; }

  /// Accumulated gradient of the last backward() call(s); zeros if none.
  std::vector<Real>& grad() {
    if (d_->g.size() != d_->v.size()) d_->g.assign(d_->v.size(), Real(0));
    return d_->g;
  }
  void zero_grad() { d_->g.assign(d_->v.size(), Real(0)); }

  Mat to_mat() const {
    Mat m(rows(), cols());
    for (std::size_t i = 0; i < size(); ++i) m[i] = double(d_->v[i]);
    return m;
  }
  void set_values(const Mat& m) {
    if (m.rows() != rows() || m.cols() != cols())
      throw std::invalid_argument("set_values: shape mismatch");
    for (std::size_t i = 0; i < m.size(); ++i) d_->v[i] = Real(m[i]);
  }

  TensorData<Real>* key() const { return d_.get(); }

  // internal
  std::shared_ptr<TensorData<Real>> d_;
};

template <class Real>
class Tape;

template <class Real>
struct GradMap {
  std::unordered_map<const TensorData<Real>*, Tensor<Real>> entries;

  const Tensor<Real>* find(const Tensor<Real>& t) const {
    auto it = entries.find(t.key());
    return it == entries.end() ? nullptr : &it->second;
  }
  void accumulate(Tape<Real>& tape, const Tensor<Real>& t, const Tensor<Real>& grad);
};

/// Records the forward computation as a sequence of primitive nodes and
/// replays it in reverse for gradients. Backward rules are themselves
/// expressed as tape operations, so gradients() can be applied to its own
/// outputs (reverse-over-reverse) for exact Hessian-vector products.
template <class Real>
class Tape {
 public:
  using T = Tensor<Real>;

  std::size_t node_count() const { return nodes_.size(); }

  /// Clears the recorded graph and recycles the data blocks of tensors no
  /// one references anymore. Training loops call this every step, so the
  /// steady state allocates nothing.
  void reset() {
    nodes_.clear();
    leaves_.clear();
    leaf_set_.clear();
    backward_done_ = false;
    std::size_t keep = 0;
    for (auto& sp : retained_) {
      if (sp.use_count() == 1)
        free_lists_[sp->v.size()].push_back(std::move(sp));
      else
        retained_[keep++] = std::move(sp);
    }
    retained_.resize(keep);
  }

  // ---- elementwise ----

  T add(const T& a, const T& b) {
    check_same_shape("add", a, b);
    T out = fresh(a.rows(), a.cols(), {a, b});
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = a.values()[i] + b.values()[i];
    finish("add", out, [a, b, out](Tape& t, GradMap<Real>& gm) {
      const T g = *gm.find(out);
      gm.accumulate(t, a, g);
      gm.accumulate(t, b, g);
    });
    return out;
  }

  T sub(const T& a, const T& b) {
    check_same_shape("sub", a, b);
    T out = fresh(a.rows(), a.cols(), {a, b});
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = a.values()[i] - b.values()[i];
    finish("sub", out, [a, b, out](Tape& t, GradMap<Real>& gm) {
      const T g = *gm.find(out);
      gm.accumulate(t, a, g);
      if (b.needs_grad()) gm.accumulate(t, b, t.affine(g, Real(-1), Real(0)));
    });
    return out;
  }

  T mul(const T& a, const T& b) {
    check_same_shape("mul", a, b);
    T out = fresh(a.rows(), a.cols(), {a, b});
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = a.values()[i] * b.values()[i];
    finish("mul", out, [a, b, out](Tape& t, GradMap<Real>& gm) {
      const T g = *gm.find(out);
      if (a.needs_grad()) gm.accumulate(t, a, t.mul(g, b));
      if (b.needs_grad()) gm.accumulate(t, b, t.mul(g, a));
    });
    return out;
  }

  T div(const T& a, const T& b) {
    check_same_shape("div", a, b);
    T out = fresh(a.rows(), a.cols(), {a, b});
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = a.values()[i] / b.values()[i];
    finish("div", out, [a, b, out](Tape& t, GradMap<Real>& gm) {
      const T g = *gm.find(out);
      if (a.needs_grad()) gm.accumulate(t, a, t.div(g, b));
      if (b.needs_grad())
        gm.accumulate(t, b, t.affine(t.div(t.mul(g, a), t.mul(b, b)), Real(-1), Real(0)));
    });
    return out;
  }

  /// s*a + o, elementwise with scalar constants.
  T affine(const T& a, Real s, Real o) {
    T out = fresh(a.rows(), a.cols(), {a});
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = s * a.values()[i] + o;
    finish("affine", out, [a, out, s](Tape& t, GradMap<Real>& gm) {
      gm.accumulate(t, a, t.affine(*gm.find(out), s, Real(0)));
    });
    return out;
  }

  T scale(const T& a, Real s) { return affine(a, s, Real(0)); }

  /// Elementwise product with a constant matrix (e.g. a mask); the constant
  /// scales the gradient as well.
  T const_mul(const T& a, const Mat& m) {
    check_shape("const_mul", a, m.rows(), m.cols());
    auto coeff = std::make_shared<std::vector<Real>>(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) (*coeff)[i] = Real(m[i]);
    T out = fresh(a.rows(), a.cols(), {a});
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = a.values()[i] * (*coeff)[i];
    finish("const_mul", out, [a, out, coeff](Tape& t, GradMap<Real>& gm) {
      gm.accumulate(t, a, t.const_mul_vec(*gm.find(out), coeff));
    });
    return out;
  }

  /// Straight-through masking: forward multiplies by the constant mask,
  /// backward passes the gradient through unscaled.
  T ste_mask(const T& a, const Mat& m) {
    check_shape("ste_mask", a, m.rows(), m.cols());
    T out = fresh(a.rows(), a.cols(), {a});
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = a.values()[i] * Real(m[i]);
    finish("ste_mask", out, [a, out](Tape& t, GradMap<Real>& gm) {
      gm.accumulate(t, a, *gm.find(out));
    });
    return out;
  }

  // ---- matrix products (Eigen-backed) ----

  T matmul(const T& a, const T& b) {
    if (a.cols() != b.rows()) shape_error("matmul", a, b);
    T out = fresh(a.rows(), b.cols(), {a, b});
    emap(out) = cmap(a) * cmap(b);
    finish("matmul", out, [a, b, out](Tape& t, GradMap<Real>& gm) {
      const T g = *gm.find(out);
      if (a.needs_grad()) gm.accumulate(t, a, t.matmul_nt(g, b));
      if (b.needs_grad()) gm.accumulate(t, b, t.matmul_tn(a, g));
    });
    return out;
  }

  /// a * b^T
  T matmul_nt(const T& a, const T& b) {
    if (a.cols() != b.cols()) shape_error("matmul_nt", a, b);
    T out = fresh(a.rows(), b.rows(), {a, b});
    emap(out) = cmap(a) * cmap(b).transpose();
    finish("matmul_nt", out, [a, b, out](Tape& t, GradMap<Real>& gm) {
      const T g = *gm.find(out);
      if (a.needs_grad()) gm.accumulate(t, a, t.matmul(g, b));
      if (b.needs_grad()) gm.accumulate(t, b, t.matmul_tn(g, a));
    });
    return out;
  }

  /// a^T * b
  T matmul_tn(const T& a, const T& b) {
    if (a.rows() != b.rows()) shape_error("matmul_tn", a, b);
    T out = fresh(a.cols(), b.cols(), {a, b});
    emap(out) = cmap(a).transpose() * cmap(b);
    finish("matmul_tn", out, [a, b, out](Tape& t, GradMap<Real>& gm) {
      const T g = *gm.find(out);
      if (a.needs_grad()) gm.accumulate(t, a, t.matmul_nt(b, g));
      if (b.needs_grad()) gm.accumulate(t, b, t.matmul(a, g));
    });
    return out;
  }

  // ---- reductions & broadcasts ----

  T sum(const T& a) {
    T out = fresh(1, 1, {a});
    Real s = 0;
    for (Real x : a.values()) s += x;
    out.values()[0] = s;
    finish("sum", out, [a, out](Tape& t, GradMap<Real>& gm) {
      gm.accumulate(t, a, t.bcast_scalar(*gm.find(out), a.rows(), a.cols()));
    });
    return out;
  }

  T rowsum(const T& a) {
    T out = fresh(a.rows(), 1, {a});
    for (std::size_t r = 0; r < a.rows(); ++r) {
      Real s = 0;
      for (std::size_t c = 0; c < a.cols(); ++c) s += a.values()[r * a.cols() + c];
      out.values()[r] = s;
    }
    finish("rowsum", out, [a, out](Tape& t, GradMap<Real>& gm) {
      gm.accumulate(t, a, t.bcast_col(*gm.find(out), a.cols()));
    });
    return out;
  }

  T colsum(const T& a) {
    T out = fresh(1, a.cols(), {a});
    std::fill(out.values().begin(), out.values().end(), Real(0));
    for (std::size_t r = 0; r < a.rows(); ++r)
      for (std::size_t c = 0; c < a.cols(); ++c) out.values()[c] += a.values()[r * a.cols() + c];
    finish("colsum", out, [a, out](Tape& t, GradMap<Real>& gm) {
      gm.accumulate(t, a, t.bcast_row(*gm.find(out), a.rows()));
    });
    return out;
  }

  /// [Rx1] -> [RxC], each column a copy.
  T bcast_col(const T& v, std::size_t cols) {
    if (v.cols() != 1) shape_error("bcast_col", v, v);
    T out = fresh(v.rows(), cols, {v});
    for (std::size_t r = 0; r < v.rows(); ++r)
      for (std::size_t c = 0; c < cols; ++c) out.values()[r * cols + c] = v.values()[r];
    finish("bcast_col", out, [v, out](Tape& t, GradMap<Real>& gm) {
      gm.accumulate(t, v, t.rowsum(*gm.find(out)));
    });
    return out;
  }

  /// [1xC] -> [RxC], each row a copy.
  T bcast_row(const T& v, std::size_t rows) {
    if (v.rows() != 1) shape_error("bcast_row", v, v);
    T out = fresh(rows, v.cols(), {v});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < v.cols(); ++c) out.values()[r * v.cols() + c] = v.values()[c];
    finish("bcast_row", out, [v, out](Tape& t, GradMap<Real>& gm) {
      gm.accumulate(t, v, t.colsum(*gm.find(out)));
    });
    return out;
  }

  T bcast_scalar(const T& s, std::size_t rows, std::size_t cols) {
    if (!s.is_scalar()) shape_error("bcast_scalar", s, s);
    T out = fresh(rows, cols, {s});
    const Real x = s.values()[0];
    for (auto& y : out.values()) y = x;
    finish("bcast_scalar", out, [s, out](Tape& t, GradMap<Real>& gm) {
      gm.accumulate(t, s, t.sum(*gm.find(out)));
    });
    return out;
  }

  // ---- nonlinearities ----

  T sigmoid(const T& a) {
    T out = fresh(a.rows(), a.cols(), {a});
    for (std::size_t i = 0; i < out.size(); ++i) {
      Real x = a.values()[i];
      out.values()[i] = x >= 0 ? Real(1) / (Real(1) + std::exp(-x))
                               : std::exp(x) / (Real(1) + std::exp(x));
    }
    finish("sigmoid", out, [a, out](Tape& t, GradMap<Real>& gm) {
      // y(1-y) * g
      gm.accumulate(t, a, t.mul(*gm.find(out), t.mul(out, t.affine(out, Real(-1), Real(1)))));
    });
    return out;
  }

  T tanh(const T& a) {
    T out = fresh(a.rows(), a.cols(), {a});
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = std::tanh(a.values()[i]);
    finish("tanh", out, [a, out](Tape& t, GradMap<Real>& gm) {
      gm.accumulate(t, a,
                    t.mul(*gm.find(out), t.affine(t.mul(out, out), Real(-1), Real(1))));
    });
    return out;
  }

  T exp(const T& a) {
    T out = fresh(a.rows(), a.cols(), {a});
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = std::exp(a.values()[i]);
    finish("exp", out, [a, out](Tape& t, GradMap<Real>& gm) {
      gm.accumulate(t, a, t.mul(*gm.find(out), out));
    });
    return out;
  }

  T log(const T& a) {
    T out = fresh(a.rows(), a.cols(), {a});
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = std::log(a.values()[i]);
    finish("log", out, [a, out](Tape& t, GradMap<Real>& gm) {
      gm.accumulate(t, a, t.div(*gm.find(out), a));
    });
    return out;
  }

  T sqrt(const T& a) {
    T out = fresh(a.rows(), a.cols(), {a});
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = std::sqrt(a.values()[i]);
    finish("sqrt", out, [a, out](Tape& t, GradMap<Real>& gm) {
      gm.accumulate(t, a, t.scale(t.div(*gm.find(out), out), Real(0.5)));
    });
    return out;
  }

  /// Standard normal CDF, for exact GELU.
  T norm_cdf(const T& a) {
    T out = fresh(a.rows(), a.cols(), {a});
    for (std::size_t i = 0; i < out.size(); ++i)
      out.values()[i] = Real(0.5) * std::erfc(-a.values()[i] * Real(0.7071067811865475244));
    finish("norm_cdf", out, [a, out](Tape& t, GradMap<Real>& gm) {
      gm.accumulate(t, a, t.mul(*gm.find(out), t.norm_pdf(a)));
    });
    return out;
  }

  T norm_pdf(const T& a) {
    T out = fresh(a.rows(), a.cols(), {a});
    for (std::size_t i = 0; i < out.size(); ++i)
      out.values()[i] = Real(0.3989422804014326779) * std::exp(Real(-0.5) * a.values()[i] * a.values()[i]);
    finish("norm_pdf", out, [a, out](Tape& t, GradMap<Real>& gm) {
      // d/dx phi = -x phi
      gm.accumulate(t, a, t.affine(t.mul(*gm.find(out), t.mul(a, out)), Real(-1), Real(0)));
    });
    return out;
  }

  // ---- structure ----

  T slice_cols(const T& a, std::size_t c0, std::size_t c1) {
    if (c0 >= c1 || c1 > a.cols()) shape_error("slice_cols", a, a);
    T out = fresh(a.rows(), c1 - c0, {a});
    for (std::size_t r = 0; r < a.rows(); ++r)
      for (std::size_t c = c0; c < c1; ++c)
        out.values()[r * (c1 - c0) + (c - c0)] = a.values()[r * a.cols() + c];
    finish("slice_cols", out, [a, out, c0](Tape& t, GradMap<Real>& gm) {
      gm.accumulate(t, a, t.pad_cols(*gm.find(out), c0, a.cols()));
    });
    return out;
  }

  /// Places a into columns [c0, c0+a.cols()) of a zero matrix with
  /// total_cols columns.
  T pad_cols(const T& a, std::size_t c0, std::size_t total_cols) {
    if (c0 + a.cols() > total_cols) shape_error("pad_cols", a, a);
    T out = fresh(a.rows(), total_cols, {a});
    std::fill(out.values().begin(), out.values().end(), Real(0));
    for (std::size_t r = 0; r < a.rows(); ++r)
      for (std::size_t c = 0; c < a.cols(); ++c)
        out.values()[r * total_cols + c0 + c] = a.values()[r * a.cols() + c];
    finish("pad_cols", out, [a, out, c0](Tape& t, GradMap<Real>& gm) {
      gm.accumulate(t, a, t.slice_cols(*gm.find(out), c0, c0 + a.cols()));
    });
    return out;
  }

  /// Row lookup: out[i] = table[ids[i]].
  T embedding(const T& table, const std::vector<int>& ids) {
    for (int id : ids)
      if (id < 0 || std::size_t(id) >= table.rows())
        throw std::invalid_argument("embedding: id out of range");
    T out = fresh(ids.size(), table.cols(), {table});
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t c = 0; c < table.cols(); ++c)
        out.values()[i * table.cols() + c] = table.values()[std::size_t(ids[i]) * table.cols() + c];
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    finish("embedding", out, [table, out, ids_copy](Tape& t, GradMap<Real>& gm) {
      gm.accumulate(t, table, t.scatter_rows(*gm.find(out), *ids_copy, table.rows()));
    });
    return out;
  }

  /// Scatter-add of rows: out[ids[i]] += a[i], out has out_rows rows.
  T scatter_rows(const T& a, const std::vector<int>& ids, std::size_t out_rows) {
    if (ids.size() != a.rows()) shape_error("scatter_rows", a, a);
    T out = fresh(out_rows, a.cols(), {a});
    std::fill(out.values().begin(), out.values().end(), Real(0));
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t c = 0; c < a.cols(); ++c)
        out.values()[std::size_t(ids[i]) * a.cols() + c] += a.values()[i * a.cols() + c];
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    finish("scatter_rows", out, [a, out, ids_copy](Tape& t, GradMap<Real>& gm) {
      gm.accumulate(t, a, t.embedding(*gm.find(out), *ids_copy));
    });
    return out;
  }

  // ---- rows of probabilities & losses ----

  T softmax_rows(const T& a) {
    T out = fresh(a.rows(), a.cols(), {a});
    for (std::size_t r = 0; r < a.rows(); ++r) {
      const Real* x = a.values().data() + r * a.cols();
      Real* y = out.values().data() + r * a.cols();
      Real m = x[0];
      for (std::size_t c = 1; c < a.cols(); ++c) m = std::max(m, x[c]);
      Real s = 0;
      for (std::size_t c = 0; c < a.cols(); ++c) {
        y[c] = std::exp(x[c] - m);
        s += y[c];
      }
      for (std::size_t c = 0; c < a.cols(); ++c) y[c] /= s;
    }
    finish("softmax_rows", out, [a, out](Tape& t, GradMap<Real>& gm) {
      const T g = *gm.find(out);
      // y * (g - rowsum(g*y))
      T inner = t.sub(g, t.bcast_col(t.rowsum(t.mul(g, out)), a.cols()));
      gm.accumulate(t, a, t.mul(out, inner));
    });
    return out;
  }

  /// Mean cross-entropy of integer targets against rows of logits.
  T cross_entropy(const T& logits, const std::vector<int>& targets) {
    if (targets.size() != logits.rows())
      throw std::invalid_argument("cross_entropy: one target per row required");
    const std::size_t R = logits.rows(), C = logits.cols();
    for (int y : targets)
      if (y < 0 || std::size_t(y) >= C) throw std::invalid_argument("cross_entropy: target out of range");
    T out = fresh(1, 1, {logits});
    Real total = 0;
    for (std::size_t r = 0; r < R; ++r) {
      const Real* x = logits.values().data() + r * C;
      Real m = x[0];
      for (std::size_t c = 1; c < C; ++c) m = std::max(m, x[c]);
      Real s = 0;
      for (std::size_t c = 0; c < C; ++c) s += std::exp(x[c] - m);
      total += m + std::log(s) - x[std::size_t(targets[r])];
    }
    out.values()[0] = total / Real(R);
    auto tgt = std::make_shared<std::vector<int>>(targets);
    finish("cross_entropy", out, [logits, out, tgt](Tape& t, GradMap<Real>& gm) {
      const std::size_t R = logits.rows(), C = logits.cols();
      Mat onehot(R, C, 0.0);
      for (std::size_t r = 0; r < R; ++r) onehot(r, std::size_t((*tgt)[r])) = 1.0;
      T diff = t.sub(t.softmax_rows(logits), T::constant(onehot));
      T g2 = t.bcast_scalar(*gm.find(out), R, C);
      gm.accumulate(t, logits, t.scale(t.mul(g2, diff), Real(1) / Real(R)));
    });
    return out;
  }

  /// Mean KL divergence between softened distributions of two logit rows.
  /// teacher_leading selects KL(teacher || student); the teacher side is
  /// never differentiated.
  T kl_divergence(const T& student, const T& teacher, Real temperature = 1,
                  bool teacher_leading = true) {
    check_same_shape("kl_divergence", student, teacher);
    if (teacher.needs_grad())
      throw std::invalid_argument("kl_divergence: teacher side is not differentiated");
    if (temperature <= 0) throw std::invalid_argument("kl_divergence: temperature must be > 0");
    const std::size_t R = student.rows(), C = student.cols();
    std::vector<Real> ls(R * C), lt(R * C);
    log_softmax_raw(student.values().data(), ls.data(), R, C, temperature);
    log_softmax_raw(teacher.values().data(), lt.data(), R, C, temperature);
    T out = fresh(1, 1, {student});
    Real total = 0;
    for (std::size_t i = 0; i < R * C; ++i) {
      if (teacher_leading)
        total += std::exp(lt[i]) * (lt[i] - ls[i]);
      else
        total += std::exp(ls[i]) * (ls[i] - lt[i]);
    }
    out.values()[0] = total / Real(R);
    const Real invT = Real(1) / temperature;
    finish("kl_divergence", out, [student, teacher, out, invT, teacher_leading](
                                     Tape& t, GradMap<Real>& gm) {
      const std::size_t R = student.rows(), C = student.cols();
      T ps = t.softmax_rows(t.scale(student, invT));
      T gs = t.bcast_scalar(*gm.find(out), R, C);
      T grad;
      if (teacher_leading) {
        T pt = t.softmax_rows(t.scale(teacher, invT));  // constant branch
        grad = t.sub(ps, pt);
      } else {
        T pt = t.softmax_rows(t.scale(teacher, invT));
        T ell = t.sub(t.log(ps), t.log(pt));
        T row_kl = t.rowsum(t.mul(ps, ell));
        grad = t.mul(ps, t.sub(ell, t.bcast_col(row_kl, C)));
      }
      gm.accumulate(t, student, t.scale(t.mul(gs, grad), invT / Real(R)));
    });
    return out;
  }

  // ---- reverse mode ----

  /// Gradients of a scalar loss with respect to wrt, as tape tensors (so the
  /// result is differentiable again). Missing dependencies yield zeros.
  std::vector<T> gradients(const T& loss, const std::vector<T>& wrt) {
    GradMap<Real> gm;
    run_backward(loss, gm);
    std::vector<T> out;
    out.reserve(wrt.size());
    for (const T& w : wrt) {
      const T* g = gm.find(w);
      out.push_back(g ? *g : T::zeros(w.rows(), w.cols()));
    }
    return out;
  }

  /// Accumulates d(loss)/d(leaf) into the .grad() buffer of every parameter
  /// leaf recorded on this tape. May be called once per tape generation.
  void backward(const T& loss) {
    if (backward_done_)
      throw std::logic_error("backward called twice without tape reset");
    GradMap<Real> gm;
    run_backward(loss, gm);
    for (const T& leaf : leaves_) {
      const T* g = gm.find(leaf);
      if (!g) continue;
      auto& acc = const_cast<T&>(leaf).grad();
      const auto& src = g->values();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += src[i];
    }
    backward_done_ = true;
  }

  const std::vector<T>& parameter_leaves() const { return leaves_; }

 private:
  struct Node {
    const char* name;
    T out;
    std::function<void(Tape&, GradMap<Real>&)> back;
  };

  using EMap = Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using CMap =
      Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  static EMap emap(T& t) {
    return EMap(t.values().data(), Eigen::Index(t.rows()), Eigen::Index(t.cols()));
  }
  static CMap cmap(const T& t) {
    return CMap(t.values().data(), Eigen::Index(t.rows()), Eigen::Index(t.cols()));
  }

  static void log_softmax_raw(const Real* x, Real* y, std::size_t rows, std::size_t cols,
                              Real temperature) {
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* xr = x + r * cols;
      Real* yr = y + r * cols;
      Real m = xr[0] / temperature;
      for (std::size_t c = 0; c < cols; ++c) m = std::max(m, xr[c] / temperature);
      Real s = 0;
      for (std::size_t c = 0; c < cols; ++c) s += std::exp(xr[c] / temperature - m);
      const Real lse = m + std::log(s);
      for (std::size_t c = 0; c < cols; ++c) yr[c] = xr[c] / temperature - lse;
    }
  }

  // Pooled output tensor; contents are stale garbage, every op must fully
  // overwrite (or explicitly clear) its output.
  T fresh(std::size_t r, std::size_t c, std::initializer_list<T> inputs) {
    T out;
    auto& list = free_lists_[r * c];
    if (!list.empty()) {
      out.d_ = std::move(list.back());
      list.pop_back();
      out.d_->rows = r;
      out.d_->cols = c;
      out.d_->requires_grad = false;
      out.d_->needs_grad = false;
      out.d_->g.clear();
    } else {
      out.d_ = std::make_shared<TensorData<Real>>();
      out.d_->rows = r;
      out.d_->cols = c;
      out.d_->v.resize(r * c);
    }
    out.d_->op_output = true;
    retained_.push_back(out.d_);
    for (const T& in : inputs) {
      if (in.needs_grad()) out.d_->needs_grad = true;
      if (in.requires_grad() && !in.d_->op_output && leaf_set_.insert(in.key()).second)
        leaves_.push_back(in);
    }
    return out;
  }

  void finish(const char* name, const T& out, std::function<void(Tape&, GradMap<Real>&)> back) {
    // |x| sums propagate any NaN/Inf; rescan on trigger to rule out benign
    // accumulator overflow
    Real acc = 0;
    for (Real x : out.values()) acc += std::abs(x);
    if (!std::isfinite(acc)) {
      for (Real x : out.values())
        if (!std::isfinite(x))
          throw std::runtime_error(std::string("non-finite output of op '") + name + "'");
    }
    if (out.needs_grad()) nodes_.push_back(Node{name, out, std::move(back)});
  }

  void run_backward(const T& loss, GradMap<Real>& gm) {
    if (!loss.is_scalar()) throw std::invalid_argument("backward: loss must be scalar");
    if (!loss.needs_grad()) return;
    gm.entries.emplace(loss.key(), T::filled(1, 1, Real(1)));
    // Recording order is a topological order; nodes appended by backward
    // closures land beyond the snapshot and are left for an outer pass.
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      const Node& n = nodes_[i];
      if (gm.entries.find(n.out.key()) == gm.entries.end()) continue;
      n.back(*this, gm);
    }
  }

  void check_same_shape(const char* op, const T& a, const T& b) const {
    if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(op, a, b);
  }
  void check_shape(const char* op, const T& a, std::size_t r, std::size_t c) const {
    if (a.rows() != r || a.cols() != c)
      throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
  [[noreturn]] static void shape_error(const char* op, const T& a, const T& b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) +
                                "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                                "x" + std::to_string(b.cols()) + ")");
  }

  // const_mul by a shared coefficient vector (used by its own backward)
  T const_mul_vec(const T& a, const std::shared_ptr<std::vector<Real>>& coeff) {
    T out = fresh(a.rows(), a.cols(), {a});
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = a.values()[i] * (*coeff)[i];
    finish("const_mul", out, [a, out, coeff](Tape& t, GradMap<Real>& gm) {
      gm.accumulate(t, a, t.const_mul_vec(*gm.find(out), coeff));
    });
    return out;
  }

  std::deque<Node> nodes_;
  std::vector<T> leaves_;
  std::unordered_set<const TensorData<Real>*> leaf_set_;
  std::vector<std::shared_ptr<TensorData<Real>>> retained_;
  std::unordered_map<std::size_t, std::vector<std::shared_ptr<TensorData<Real>>>> free_lists_;
  bool backward_done_ = false;
};

template <class Real>
void GradMap<Real>::accumulate(Tape<Real>& tape, const Tensor<Real>& t,
                               const Tensor<Real>& grad) {
  if (!t.needs_grad()) return;
  auto it = entries.find(t.key());
  if (it == entries.end())
    entries.emplace(t.key(), grad);
  else
    it->second = tape.add(it->second, grad);
}

// ---------------------------------------------------------------------------
// Composed operations
// ---------------------------------------------------------------------------

/// Row-wise layer normalization with learnable gain/offset, built from
/// primitives so second derivatives come for free.
template <class Real>
Tensor<Real> layer_norm(Tape<Real>& t, const Tensor<Real>& x, const Tensor<Real>& gamma,
                        const Tensor<Real>& beta, Real eps = Real(1e-5)) {
  const std::size_t C = x.cols();
  auto mean = t.scale(t.rowsum(x), Real(1) / Real(C));
  auto centered = t.sub(x, t.bcast_col(mean, C));
  auto var = t.scale(t.rowsum(t.mul(centered, centered)), Real(1) / Real(C));
  auto inv_std = t.div(Tensor<Real>::filled(x.rows(), 1, Real(1)),
                       t.sqrt(t.affine(var, Real(1), eps)));
  auto xhat = t.mul(centered, t.bcast_col(inv_std, C));
  return t.add(t.mul(xhat, t.bcast_row(gamma, x.rows())), t.bcast_row(beta, x.rows()));
}

/// Exact GELU: x * Phi(x).
template <class Real>
Tensor<Real> gelu(Tape<Real>& t, const Tensor<Real>& x) {
  return t.mul(x, t.norm_cdf(x));
}

template <class Real>
Tensor<Real> mean_all(Tape<Real>& t, const Tensor<Real>& x) {
  return t.scale(t.sum(x), Real(1) / Real(x.size()));
}

/// Mean squared error over all entries.
template <class Real>
Tensor<Real> mse(Tape<Real>& t, const Tensor<Real>& a, const Tensor<Real>& b) {
  auto d = t.sub(a, b);
  return mean_all(t, t.mul(d, d));
}

using TensorD = Tensor<double>;
using TapeD = Tape<double>;

}  // namespace maskanneal::ad
