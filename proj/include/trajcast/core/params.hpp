// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "trajcast/core/autodiff.hpp"
#include "trajcast/core/error.hpp"
#include "trajcast/core/rng.hpp"

namespace trajcast {

/// A named, contiguous block of a flat parameter vector holding one matrix
/// (column-major).
struct Segment {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  std::size_t offset = 0;

  [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
  friend bool operator==(const Segment&, const Segment&) = default;
};

/// Ordered segments that tile a parameter vector without gaps or overlap.
class ParamLayout {
 public:
  std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    for (const Segment& s : segments_) {
      if (s.name == name) throw ConfigError("duplicate parameter segment '" + name + "'");
    }
    segments_.push_back(Segment{std::move(name), rows, cols, size_});
    size_ += static_cast<std::size_t>(rows * cols);
    return segments_.size() - 1;
  }

  [[nodiscard]] const std::vector<Segment>& segments() const { return segments_; }
  [[nodiscard]] const Segment& segment(std::size_t i) const { return segments_.at(i); }
  [[nodiscard]] std::size_t size() const { return size_; }

  [[nodiscard]] std::size_t find(const std::string& name) const {
    for (std::size_t i = 0; i < segments_.size(); ++i) {
      if (segments_[i].name == name) return i;
    }
    throw ConfigError("no parameter segment named '" + name + "'");
  }

  /// Segments are disjoint and cover [0, size()).
  [[nodiscard]] bool is_tiling() const {
    std::size_t expect = 0;
    for (const Segment& s : segments_) {
      if (s.offset != expect) return false;
      expect += s.size();
    }
    return expect == size_;
  }

  friend bool operator==(const ParamLayout&, const ParamLayout&) = default;

 private:
  std::vector<Segment> segments_;
  std::size_t size_ = 0;
};

class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(ParamLayout layout)
      : layout_(std::move(layout)), values_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(layout_.size()))) {}
  ParamVector(ParamLayout layout, Eigen::VectorXd values) : layout_(std::move(layout)), values_(std::move(values)) {
    if (static_cast<std::size_t>(values_.size()) != layout_.size()) {
      throw DimensionError("parameter values do not match layout size");
    }
  }

  [[nodiscard]] const ParamLayout& layout() const { return layout_; }
  [[nodiscard]] const Eigen::VectorXd& values() const { return values_; }
  Eigen::VectorXd& values() { return values_; }
  [[nodiscard]] std::size_t size() const { return layout_.size(); }

  [[nodiscard]] Eigen::Map<const ad::Mat> matrix(std::size_t segment) const {
    const Segment& s = layout_.segment(segment);
    return {values_.data() + s.offset, s.rows, s.cols};
  }
  Eigen::Map<ad::Mat> matrix(std::size_t segment) {
    const Segment& s = layout_.segment(segment);
    return {values_.data() + s.offset, s.rows, s.cols};
  }

  /// Name of the first segment containing a non-finite value, or empty.
  [[nodiscard]] std::string first_nonfinite_segment() const { return first_nonfinite(values_); }

  [[nodiscard]] std::string first_nonfinite(const Eigen::VectorXd& v) const {
    for (const Segment& s : layout_.segments()) {
      if (!v.segment(static_cast<Eigen::Index>(s.offset), static_cast<Eigen::Index>(s.size())).allFinite()) {
        return s.name;
      }
    }
    return {};
  }

  friend bool operator==(const ParamVector& a, const ParamVector& b) {
    return a.layout_ == b.layout_ && a.values_.size() == b.values_.size() && a.values_ == b.values_;
  }

 private:
  ParamLayout layout_;
  Eigen::VectorXd values_;
};

/// Read-only weight access for plain evaluation.
class EvalWeights {
 public:
  explicit EvalWeights(const ParamVector& p) : params_(&p) {}
  [[nodiscard]] Eigen::Map<const ad::Mat> operator()(std::size_t segment) const {
    return params_->matrix(segment);
  }

 private:
  const ParamVector* params_;
};

/// Binds every segment of a parameter vector as a differentiable leaf.
class TapeWeights {
 public:
  TapeWeights(ad::Tape& tape, const ParamVector& p) : params_(&p) {
    leaves_.reserve(p.layout().segments().size());
    for (std::size_t i = 0; i < p.layout().segments().size(); ++i) {
      leaves_.push_back(tape.variable(ad::Mat(p.matrix(i))));
    }
  }
  [[nodiscard]] const ad::Var& operator()(std::size_t segment) const { return leaves_.at(segment); }

  /// Flat gradient after `tape.backward`, laid out like the parameters.
  [[nodiscard]] Eigen::VectorXd gradient(const ad::Tape& tape) const {
    Eigen::VectorXd g(static_cast<Eigen::Index>(params_->size()));
    const auto& segs = params_->layout().segments();
    for (std::size_t i = 0; i < segs.size(); ++i) {
      const ad::Mat gi = tape.grad(leaves_[i]);
      g.segment(static_cast<Eigen::Index>(segs[i].offset), static_cast<Eigen::Index>(segs[i].size())) =
          Eigen::Map<const Eigen::VectorXd>(gi.data(), gi.size());
    }
    return g;
  }

 private:
  const ParamVector* params_;
  std::vector<ad::Var> leaves_;
};

/// Value and exact reverse-mode gradient of a scalar computation.
///
/// `fn(tape, weights)` builds the computation from `weights(segment)` leaves
/// and returns a 1x1 Var. Throws NumericError naming the offending segment if
/// the value or any gradient entry is not finite.
template <class Fn>
std::pair<double, Eigen::VectorXd> value_and_grad(Fn&& fn, const ParamVector& params) {
  ad::Tape tape;
  TapeWeights weights(tape, params);
  ad::Var loss = fn(tape, weights);
  const double value = loss.value()(0, 0);
  if (!std::isfinite(value)) throw NumericError("non-finite objective value");
  tape.backward(loss);
  Eigen::VectorXd g = weights.gradient(tape);
  if (std::string bad = params.first_nonfinite(g); !bad.empty()) {
    throw NumericError("non-finite gradient in segment '" + bad + "'");
  }
  return {value, std::move(g)};
}

template <class Fn>
Eigen::VectorXd grad(Fn&& fn, const ParamVector& params) {
  return value_and_grad(std::forward<Fn>(fn), params).second;
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for matrices, zeros for 1-row biases.
inline void init_uniform_fan_in(ParamVector& p, RngStream& rng) {
  for (std::size_t i = 0; i < p.layout().segments().size(); ++i) {
    const Segment& s = p.layout().segment(i);
    auto m = p.matrix(i);
    if (s.rows == 1) {
      m.setZero();
      continue;
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.rows));
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = rng.uniform(-bound, bound);
  }
}

}  // namespace trajcast
