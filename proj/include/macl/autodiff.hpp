#pragma once

// Matrix-level reverse-mode automatic differentiation.
//
// A Tape records every operation as a node holding its forward value and a
// backward closure. Parameters enter as leaves that reference externally
// owned matrices; after Tape::backward() their gradients are read back by
// slot, so several tapes can run over one parameter set without sharing any
// mutable state.

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "macl/error.hpp"

namespace macl::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Matrix value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var scalar_constant(double v) { return constant(Matrix::Constant(1, 1, v)); }

  // Leaf referencing an external matrix that must outlive the tape.
  Var parameter(const Matrix& value, std::size_t slot) {
    Node n;
    n.external = &value;
    n.requires_grad = grad_enabled_;
    n.slot = static_cast<long>(slot);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    if (grad_enabled_)
      for (const auto& in : inputs) needs = needs || node(in.id()).requires_grad;
    return record_with(std::move(value), needs, std::move(backward));
  }

  Var record_with(Matrix value, bool needs_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = needs_grad && grad_enabled_;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Matrix& value(std::size_t id) const {
    const auto& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Zero-initialised on first access.
  Matrix& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.size() == 0) {
      const auto& v = value(id);
      n.grad = Matrix::Zero(v.rows(), v.cols());
    }
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return nodes_[id].grad.size() != 0; }

  void backward(Var root) {
    if (!grad_enabled_) throw Error("backward on a tape without gradients");
    const auto& rv = value(root.id());
    if (rv.rows() != 1 || rv.cols() != 1) throw ShapeError("backward root must be a scalar");
    if (!nodes_[root.id()].requires_grad) return;
    grad(root.id())(0, 0) += 1.0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(*this, i);
    }
  }

  // Gradient of parameter `slot` summed over all its leaves; empty if unused.
  template <class Fn>
  void for_each_parameter_grad(Fn&& fn) const {
    for (const auto& n : nodes_)
      if (n.slot >= 0 && n.grad.size() != 0) fn(static_cast<std::size_t>(n.slot), n.grad);
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Matrix grad;
    bool requires_grad = false;
    long slot = -1;
    Backward backward;
  };
  const Node& node(std::size_t id) const { return nodes_[id]; }

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {
inline void accumulate(Tape& t, const Var& v, const Matrix& g) {
  if (v.requires_grad()) t.grad(v.id()) += g;
}
template <class Expr>
inline void accumulate_expr(Tape& t, const Var& v, const Expr& g) {
  if (v.requires_grad()) t.grad(v.id()) += g;
}
inline void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError(std::string(op) + ": shape mismatch");
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  Matrix out = a.value() * b.value();
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (a.requires_grad()) t.grad(a.id()).noalias() += g * b.value().transpose();
    if (b.requires_grad()) t.grad(b.id()).noalias() += a.value().transpose() * g;
  });
}

// a * b^T
inline Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
  Matrix out = a.value() * b.value().transpose();
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (a.requires_grad()) t.grad(a.id()).noalias() += g * b.value();
    if (b.requires_grad()) t.grad(b.id()).noalias() += g.transpose() * a.value();
  });
}

inline Var add(Var a, Var b) {
  detail::same_shape(a, b, "add");
  Matrix out = a.value() + b.value();
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    detail::accumulate(t, a, g);
    detail::accumulate(t, b, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::same_shape(a, b, "sub");
  Matrix out = a.value() - b.value();
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    detail::accumulate(t, a, g);
    if (b.requires_grad()) t.grad(b.id()) -= g;
  });
}

// Adds a 1 x n row to every row of a.
inline Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias shape");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.tape()->record(std::move(out), {a, row}, [a, row](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    detail::accumulate(t, a, g);
    if (row.requires_grad()) t.grad(row.id()) += g.colwise().sum();
  });
}

inline Var mul(Var a, Var b) {
  detail::same_shape(a, b, "mul");
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (a.requires_grad()) t.grad(a.id()) += g.cwiseProduct(b.value());
    if (b.requires_grad()) t.grad(b.id()) += g.cwiseProduct(a.value());
  });
}

// Elementwise product with a constant matrix (no gradient to the constant).
inline Var mul_const(Var a, Matrix c) {
  if (a.rows() != c.rows() || a.cols() != c.cols()) throw ShapeError("mul_const: shape mismatch");
  Matrix out = a.value().cwiseProduct(c);
  return a.tape()->record(std::move(out), {a}, [a, c = std::move(c)](Tape& t, std::size_t self) {
    detail::accumulate_expr(t, a, t.grad(self).cwiseProduct(c));
  });
}

// scale * a + shift
inline Var affine(Var a, double scale, double shift = 0.0) {
  Matrix out = (a.value().array() * scale + shift).matrix();
  return a.tape()->record(std::move(out), {a}, [a, scale](Tape& t, std::size_t self) {
    detail::accumulate_expr(t, a, t.grad(self) * scale);
  });
}

inline Var scale(Var a, double s) { return affine(a, s, 0.0); }
inline Var one_minus(Var a) { return affine(a, -1.0, 1.0); }

inline Var sum(Var a) {
  Matrix out = Matrix::Constant(1, 1, a.value().sum());
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const double g = t.grad(self)(0, 0);
    if (a.requires_grad()) t.grad(a.id()).array() += g;
  });
}

// Sum of a list of 1x1 scalars.
inline Var add_scalars(Tape& tape, const std::vector<Var>& xs) {
  double total = 0.0;
  bool needs = false;
  for (const auto& x : xs) {
    if (x.rows() != 1 || x.cols() != 1) throw ShapeError("add_scalars: expects 1x1 inputs");
    total += x.scalar();
    needs = needs || x.requires_grad();
  }
  return tape.record_with(Matrix::Constant(1, 1, total), needs, [xs](Tape& t, std::size_t self) {
    const double g = t.grad(self)(0, 0);
    for (const auto& x : xs)
      if (x.requires_grad()) t.grad(x.id())(0, 0) += g;
  });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

inline Var relu(Var a) {
  Matrix out = a.value().cwiseMax(0.0);
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, std::size_t self) {
    if (!a.requires_grad()) return;
    const Matrix& g = t.grad(self);
    t.grad(a.id()) += (a.value().array() > 0.0).select(g, 0.0).matrix();
  });
}

inline Var exp(Var a) {
  Matrix out = a.value().array().exp().matrix();
  return a.tape()->record(out, {a}, [a, out](Tape& t, std::size_t self) {
    detail::accumulate_expr(t, a, t.grad(self).cwiseProduct(out));
  });
}

// Natural log; any non-positive or non-finite input is a numeric error.
inline Var log(Var a) {
  const Matrix& v = a.value();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double x = v.data()[i];
    if (!(x > 0.0) || !std::isfinite(x)) throw NumericError("log of non-positive or non-finite value");
  }
  Matrix out = v.array().log().matrix();
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, std::size_t self) {
    detail::accumulate_expr(t, a, t.grad(self).cwiseQuotient(a.value()));
  });
}

// min(a, hi); the gradient is cut where the clamp is active.
inline Var clamp_max(Var a, double hi) {
  Matrix out = a.value().cwiseMin(hi);
  return a.tape()->record(std::move(out), {a}, [a, hi](Tape& t, std::size_t self) {
    if (!a.requires_grad()) return;
    const Matrix& g = t.grad(self);
    t.grad(a.id()) += (a.value().array() < hi).select(g, 0.0).matrix();
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Var slice_cols(Var a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || start + n > a.cols()) throw ShapeError("slice_cols out of range");
  Matrix out = a.value().middleCols(start, n);
  return a.tape()->record(std::move(out), {a}, [a, start, n](Tape& t, std::size_t self) {
    if (a.requires_grad()) t.grad(a.id()).middleCols(start, n) += t.grad(self);
  });
}

inline Var concat_cols(Tape& tape, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const auto rows = parts[0].rows();
  Eigen::Index cols = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.cols();
    needs = needs || p.requires_grad();
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return tape.record_with(std::move(out), needs, [parts](Tape& t, std::size_t self) {
    Eigen::Index c0 = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) t.grad(p.id()) += t.grad(self).middleCols(c0, p.cols());
      c0 += p.cols();
    }
  });
}

inline Var concat_rows(Tape& tape, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const auto cols = parts[0].cols();
  Eigen::Index rows = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
    needs = needs || p.requires_grad();
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return tape.record_with(std::move(out), needs, [parts](Tape& t, std::size_t self) {
    Eigen::Index r0 = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) t.grad(p.id()) += t.grad(self).middleRows(r0, p.rows());
      r0 += p.rows();
    }
  });
}

// Row lookup: out.row(i) = table.row(ids[i]).
inline Var gather_rows(Var table, std::vector<Eigen::Index> ids) {
  Matrix out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  return table.tape()->record(std::move(out), {table}, [table, ids = std::move(ids)](Tape& t, std::size_t self) {
    if (!table.requires_grad()) return;
    const Matrix& g = t.grad(self);
    Matrix& tg = t.grad(table.id());
    for (std::size_t i = 0; i < ids.size(); ++i) tg.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

// Leading rows [0, n).
inline Var top_rows(Var a, Eigen::Index n) {
  if (n > a.rows()) throw ShapeError("top_rows out of range");
  Matrix out = a.value().topRows(n);
  return a.tape()->record(std::move(out), {a}, [a, n](Tape& t, std::size_t self) {
    if (a.requires_grad()) t.grad(a.id()).topRows(n) += t.grad(self);
  });
}

// Column vector of selected entries a(r, c).
inline Var pick(Var a, std::vector<std::pair<Eigen::Index, Eigen::Index>> entries) {
  Matrix out(static_cast<Eigen::Index>(entries.size()), 1);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto [r, c] = entries[i];
    if (r < 0 || r >= a.rows() || c < 0 || c >= a.cols()) throw ShapeError("pick: index out of range");
    out(static_cast<Eigen::Index>(i), 0) = a.value()(r, c);
  }
  return a.tape()->record(std::move(out), {a}, [a, entries = std::move(entries)](Tape& t, std::size_t self) {
    if (!a.requires_grad()) return;
    const Matrix& g = t.grad(self);
    Matrix& ag = t.grad(a.id());
    for (std::size_t i = 0; i < entries.size(); ++i) ag(entries[i].first, entries[i].second) += g(static_cast<Eigen::Index>(i), 0);
  });
}

// ---------------------------------------------------------------------------
// Reductions and normalisation
// ---------------------------------------------------------------------------

inline Var mean_rows(Var a) {
  if (a.rows() == 0) throw ShapeError("mean_rows of empty matrix");
  Matrix out = a.value().colwise().mean();
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, std::size_t self) {
    if (!a.requires_grad()) return;
    const double inv = 1.0 / static_cast<double>(a.rows());
    t.grad(a.id()).rowwise() += t.grad(self).row(0) * inv;
  });
}

inline Var max_rows(Var a) {
  if (a.rows() == 0) throw ShapeError("max_rows of empty matrix");
  const Matrix& v = a.value();
  Matrix out(1, v.cols());
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(v.cols()), 0);
  for (Eigen::Index c = 0; c < v.cols(); ++c) {
    Eigen::Index r;
    out(0, c) = v.col(c).maxCoeff(&r);
    arg[static_cast<std::size_t>(c)] = r;
  }
  return a.tape()->record(std::move(out), {a}, [a, arg = std::move(arg)](Tape& t, std::size_t self) {
    if (!a.requires_grad()) return;
    const Matrix& g = t.grad(self);
    Matrix& ag = t.grad(a.id());
    for (std::size_t c = 0; c < arg.size(); ++c) ag(arg[c], static_cast<Eigen::Index>(c)) += g(0, static_cast<Eigen::Index>(c));
  });
}

inline constexpr double kLayerNormEps = 1e-5;

inline Var layer_norm(Var x, Var gamma, Var beta) {
  const Matrix& v = x.value();
  const auto n = v.cols();
  if (gamma.cols() != n || beta.cols() != n) throw ShapeError("layer_norm: parameter width");
  Matrix xhat(v.rows(), n);
  Eigen::VectorXd inv_std(v.rows());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const double mu = v.row(r).mean();
    const double var = (v.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + kLayerNormEps);
    xhat.row(r) = (v.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return x.tape()->record(std::move(out), {x, gamma, beta},
                          [x, gamma, beta, xhat, inv_std](Tape& t, std::size_t self) {
                            const Matrix& g = t.grad(self);
                            if (gamma.requires_grad()) t.grad(gamma.id()) += g.cwiseProduct(xhat).colwise().sum();
                            if (beta.requires_grad()) t.grad(beta.id()) += g.colwise().sum();
                            if (!x.requires_grad()) return;
                            Matrix dxhat = g.array().rowwise() * gamma.value().row(0).array();
                            Matrix& xg = t.grad(x.id());
                            for (Eigen::Index r = 0; r < g.rows(); ++r) {
                              const double m1 = dxhat.row(r).mean();
                              const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                              xg.row(r).array() +=
                                  inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                            }
                          });
}

// Row-wise softmax. With `causal`, entry (i, j) for j > i is masked out.
inline Var softmax_rows(Var a, bool causal = false) {
  const Matrix& v = a.value();
  Matrix out = Matrix::Zero(v.rows(), v.cols());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const Eigen::Index width = causal ? std::min<Eigen::Index>(r + 1, v.cols()) : v.cols();
    const auto row = v.row(r).head(width);
    const double mx = row.maxCoeff();
    auto e = (row.array() - mx).exp();
    out.row(r).head(width) = e / e.sum();
  }
  return a.tape()->record(out, {a}, [a, out](Tape& t, std::size_t self) {
    if (!a.requires_grad()) return;
    const Matrix& g = t.grad(self);
    Matrix& ag = t.grad(a.id());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const double dot = g.row(r).dot(out.row(r));
      ag.row(r).array() += out.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

// Cosine similarity of two 1 x d rows.
inline Var cosine(Var a, Var b) {
  if (a.rows() != 1 || b.rows() != 1 || a.cols() != b.cols()) throw ShapeError("cosine expects two 1 x d rows");
  const double na = a.value().norm();
  const double nb = b.value().norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericError("cosine of a zero-norm vector");
  const double dot = a.value().row(0).dot(b.value().row(0));
  const double c = dot / (na * nb);
  return a.tape()->record(Matrix::Constant(1, 1, c), {a, b}, [a, b, na, nb, c](Tape& t, std::size_t self) {
    const double g = t.grad(self)(0, 0);
    if (a.requires_grad())
      t.grad(a.id()) += g * (b.value() / (na * nb) - c * a.value() / (na * na));
    if (b.requires_grad())
      t.grad(b.id()) += g * (a.value() / (na * nb) - c * b.value() / (nb * nb));
  });
}

}  // namespace macl::ad
