// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <utility>
#include <vector>

#include "trajcast/core/error.hpp"

/// Reverse-mode differentiation over dense matrices.
///
/// Every primitive is overloaded twice: once on `Var` (recorded on a Tape,
/// differentiable) and once on plain matrices (immediate evaluation). Layers
/// are written as templates over the value type so the same code serves the
/// training path and the allocation-light inference path.
///
/// Batches are laid out row-major in the logical sense: one sample per row.
namespace trajcast::ad {

using Mat = Eigen::MatrixXd;
using MatRef = Eigen::Ref<const Mat>;

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  [[nodiscard]] const Mat& value() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  [[nodiscard]] Tape* tape() const { return tape_; }
  [[nodiscard]] std::size_t id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat&)>;

  Var constant(Mat value) { return push(std::move(value), false, nullptr); }
  Var variable(Mat value) { return push(std::move(value), true, nullptr); }

  /// Records a node whose gradient flows to `parents` via `back`.
  Var record(Mat value, std::initializer_list<Var> parents, Backward back) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || nodes_[p.id()].requires_grad;
    return push(std::move(value), needs, needs ? std::move(back) : nullptr);
  }
  Var record(Mat value, std::span<const Var> parents, Backward back) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || nodes_[p.id()].requires_grad;
    return push(std::move(value), needs, needs ? std::move(back) : nullptr);
  }

  [[nodiscard]] const Mat& value(std::size_t id) const { return nodes_[id].value; }
  [[nodiscard]] bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }

  /// Gradient accumulator of a node; zero-initialized on first access.
  Mat& grad_ref(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Gradient of the last `backward` root with respect to `v` (zeros if unused).
  [[nodiscard]] Mat grad(const Var& v) const {
    const Node& n = nodes_[v.id()];
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void backward(const Var& root) {
    if (root.rows() != 1 || root.cols() != 1) {
      throw DimensionError("backward() requires a scalar (1x1) root");
    }
    for (Node& n : nodes_) n.grad.resize(0, 0);
    grad_ref(root.id()).setOnes();
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      // No node is appended during the sweep, so references stay valid.
      if (n.back && n.grad.size() != 0) n.back(*this, n.grad);
    }
  }

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    Backward back;
    bool requires_grad = false;
  };

  Var push(Mat value, bool requires_grad, Backward back) {
    nodes_.push_back(Node{std::move(value), Mat(), std::move(back), requires_grad});
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Mat& Var::value() const { return tape_->value(id_); }

namespace detail {
inline void accumulate(Tape& t, const Var& v, const Mat& g) {
  if (t.requires_grad(v)) t.grad_ref(v.id()) += g;
}
inline void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch");
  }
}
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace detail

// ---- plain-matrix primitives ----------------------------------------------

inline Mat matmul(const MatRef& a, const MatRef& b) { return a * b; }
inline Mat add(const MatRef& a, const MatRef& b) { return a + b; }
inline Mat sub(const MatRef& a, const MatRef& b) { return a - b; }
inline Mat mul(const MatRef& a, const MatRef& b) { return a.cwiseProduct(b); }
inline Mat add_row(const MatRef& a, const MatRef& row) { return a.rowwise() + row.row(0); }
inline Mat mul_row(const MatRef& a, const MatRef& row) {
  return a.array().rowwise() * row.row(0).array();
}
inline Mat scale(const MatRef& a, double s) { return a * s; }
inline Mat add_scalar(const MatRef& a, double s) { return a.array() + s; }
inline Mat sigmoid(const MatRef& a) { return a.unaryExpr(&detail::sigmoid); }
inline Mat tanh(const MatRef& a) { return a.array().tanh(); }
inline Mat exp(const MatRef& a) { return a.array().exp(); }
inline Mat square(const MatRef& a) { return a.array().square(); }
inline Mat clamp(const MatRef& a, double lo, double hi) { return a.cwiseMax(lo).cwiseMin(hi); }
inline Mat sum(const MatRef& a) { return Mat::Constant(1, 1, a.sum()); }
inline Mat slice_cols(const MatRef& a, Eigen::Index start, Eigen::Index n) {
  return a.middleCols(start, n);
}
inline Mat concat_cols(std::initializer_list<MatRef> parts) {
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.begin()->rows();
  for (const auto& p : parts) cols += p.cols();
  Mat out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p;
    c += p.cols();
  }
  return out;
}

// ---- recorded primitives ---------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
  Tape& t = *a.tape();
  Mat v = a.value() * b.value();
  return t.record(std::move(v), {a, b}, [a, b](Tape& tp, const Mat& g) {
    if (tp.requires_grad(a)) tp.grad_ref(a.id()).noalias() += g * b.value().transpose();
    if (tp.requires_grad(b)) tp.grad_ref(b.id()).noalias() += a.value().transpose() * g;
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::same_shape(a, b, "add");
  return a.tape()->record(a.value() + b.value(), {a, b}, [a, b](Tape& tp, const Mat& g) {
    detail::accumulate(tp, a, g);
    detail::accumulate(tp, b, g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_shape(a, b, "sub");
  return a.tape()->record(a.value() - b.value(), {a, b}, [a, b](Tape& tp, const Mat& g) {
    detail::accumulate(tp, a, g);
    detail::accumulate(tp, b, -g);
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::same_shape(a, b, "mul");
  return a.tape()->record(a.value().cwiseProduct(b.value()), {a, b},
                          [a, b](Tape& tp, const Mat& g) {
                            detail::accumulate(tp, a, g.cwiseProduct(b.value()));
                            detail::accumulate(tp, b, g.cwiseProduct(a.value()));
                          });
}

/// a + row, with `row` (1 x n) broadcast over the rows of `a`.
inline Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw DimensionError("add_row: bad row shape");
  Mat v = a.value().rowwise() + row.value().row(0);
  return a.tape()->record(std::move(v), {a, row}, [a, row](Tape& tp, const Mat& g) {
    detail::accumulate(tp, a, g);
    if (tp.requires_grad(row)) tp.grad_ref(row.id()) += g.colwise().sum();
  });
}

/// a * row elementwise, with `row` (1 x n) broadcast over the rows of `a`.
inline Var mul_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw DimensionError("mul_row: bad row shape");
  Mat v = a.value().array().rowwise() * row.value().row(0).array();
  return a.tape()->record(std::move(v), {a, row}, [a, row](Tape& tp, const Mat& g) {
    if (tp.requires_grad(a)) {
      tp.grad_ref(a.id()).array() += g.array().rowwise() * row.value().row(0).array();
    }
    if (tp.requires_grad(row)) {
      tp.grad_ref(row.id()) += g.cwiseProduct(a.value()).colwise().sum();
    }
  });
}

inline Var scale(const Var& a, double s) {
  return a.tape()->record(a.value() * s, {a},
                          [a, s](Tape& tp, const Mat& g) { detail::accumulate(tp, a, g * s); });
}

inline Var add_scalar(const Var& a, double s) {
  return a.tape()->record(a.value().array() + s, {a},
                          [a](Tape& tp, const Mat& g) { detail::accumulate(tp, a, g); });
}

// Backward closures for these read the node's own output through its id,
// which is the tape size at the moment of recording.
inline Var sigmoid(const Var& a) {
  Tape& t = *a.tape();
  const std::size_t oid = t.size();
  return t.record(a.value().unaryExpr(&detail::sigmoid), {a}, [a, oid](Tape& tp, const Mat& g) {
    const Mat& y = tp.value(oid);
    detail::accumulate(tp, a, (g.array() * y.array() * (1.0 - y.array())).matrix());
  });
}

inline Var tanh(const Var& a) {
  Tape& t = *a.tape();
  const std::size_t oid = t.size();
  return t.record(a.value().array().tanh(), {a}, [a, oid](Tape& tp, const Mat& g) {
    const Mat& y = tp.value(oid);
    detail::accumulate(tp, a, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

inline Var exp(const Var& a) {
  Tape& t = *a.tape();
  const std::size_t oid = t.size();
  return t.record(a.value().array().exp(), {a}, [a, oid](Tape& tp, const Mat& g) {
    detail::accumulate(tp, a, g.cwiseProduct(tp.value(oid)));
  });
}

inline Var square(const Var& a) {
  return a.tape()->record(a.value().array().square(), {a}, [a](Tape& tp, const Mat& g) {
    detail::accumulate(tp, a, 2.0 * g.cwiseProduct(a.value()));
  });
}

/// Elementwise clamp; the gradient is zero where the input was clipped.
inline Var clamp(const Var& a, double lo, double hi) {
  Mat v = a.value().cwiseMax(lo).cwiseMin(hi);
  return a.tape()->record(std::move(v), {a}, [a, lo, hi](Tape& tp, const Mat& g) {
    const Mat& x = a.value();
    Mat gi = g;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      if (x.data()[i] < lo || x.data()[i] > hi) gi.data()[i] = 0.0;
    }
    detail::accumulate(tp, a, gi);
  });
}

/// Sum of all entries, as a 1x1 node.
inline Var sum(const Var& a) {
  Mat v(1, 1);
  v(0, 0) = a.value().sum();
  return a.tape()->record(std::move(v), {a}, [a](Tape& tp, const Mat& g) {
    if (tp.requires_grad(a)) tp.grad_ref(a.id()).array() += g(0, 0);
  });
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || start + n > a.cols()) throw DimensionError("slice_cols: out of range");
  return a.tape()->record(a.value().middleCols(start, n), {a},
                          [a, start, n](Tape& tp, const Mat& g) {
                            if (tp.requires_grad(a)) tp.grad_ref(a.id()).middleCols(start, n) += g;
                          });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  const std::vector<Var> ps(parts);
  Tape& t = *ps.front().tape();
  const Eigen::Index rows = ps.front().rows();
  Eigen::Index cols = 0;
  for (const Var& p : ps) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Mat v(rows, cols);
  Eigen::Index c = 0;
  for (const Var& p : ps) {
    v.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return t.record(std::move(v), std::span<const Var>(ps), [ps](Tape& tp, const Mat& g) {
    Eigen::Index off = 0;
    for (const Var& p : ps) {
      if (tp.requires_grad(p)) tp.grad_ref(p.id()) += g.middleCols(off, p.cols());
      off += p.cols();
    }
  });
}

}  // namespace trajcast::ad
