// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "trajcast/core/autodiff.hpp"
#include "trajcast/core/error.hpp"
#include "trajcast/core/params.hpp"

namespace trajcast::nn {

using ad::Mat;
using Eigen::Index;

/// Range every Gaussian head's log-variance is clamped to.
inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 4.0;

/// y = x W + b
struct Dense {
  std::size_t w = 0;
  std::size_t b = 0;
  Index in = 0;
  Index out = 0;

  static Dense add_to(ParamLayout& layout, const std::string& prefix, Index in, Index out) {
    Dense d;
    d.in = in;
    d.out = out;
    d.w = layout.add(prefix + ".w", in, out);
    d.b = layout.add(prefix + ".b", 1, out);
    return d;
  }

  template <class W, class T>
  T operator()(const W& weights, const T& x) const {
    return ad::add_row(ad::matmul(x, weights(w)), weights(b));
  }
};

/// Gated recurrent cell with update/reset gates; the reset gate is applied
/// after the recurrent projection:
///
///   z  = sigmoid(x Wz + h Uz + bz)
///   r  = sigmoid(x Wr + h Ur + br)
///   n  = tanh(x Wn + bn_x + r * (h Un + bn_h))
///   h' = n + z * (h - n)
struct GruCell {
  std::size_t wx = 0;
  std::size_t wh = 0;
  std::size_t bx = 0;
  std::size_t bh = 0;
  Index in = 0;
  Index hidden = 0;

  static GruCell add_to(ParamLayout& layout, const std::string& prefix, Index in, Index hidden) {
    GruCell c;
    c.in = in;
    c.hidden = hidden;
    c.wx = layout.add(prefix + ".wx", in, 3 * hidden);
    c.wh = layout.add(prefix + ".wh", hidden, 3 * hidden);
    c.bx = layout.add(prefix + ".bx", 1, 3 * hidden);
    c.bh = layout.add(prefix + ".bh", 1, 3 * hidden);
    return c;
  }

  template <class W, class T>
  T step(const W& w, const T& x, const T& h) const {
    const Index H = hidden;
    T gx = ad::add_row(ad::matmul(x, w(wx)), w(bx));
    T gh = ad::add_row(ad::matmul(h, w(wh)), w(bh));
    T z = ad::sigmoid(ad::add(ad::slice_cols(gx, 0, H), ad::slice_cols(gh, 0, H)));
    T r = ad::sigmoid(ad::add(ad::slice_cols(gx, H, H), ad::slice_cols(gh, H, H)));
    T n = ad::tanh(ad::add(ad::slice_cols(gx, 2 * H, H), ad::mul(r, ad::slice_cols(gh, 2 * H, H))));
    return ad::add(n, ad::mul(z, ad::sub(h, n)));
  }
};

/// Output layer reading both the recurrent state and the raw step input:
/// y = h Wh + x Wx + b. The direct input path lets linear dynamics be
/// represented exactly.
struct SkipHead {
  std::size_t wh = 0;
  std::size_t wx = 0;
  std::size_t b = 0;
  Index hidden = 0;
  Index in = 0;
  Index out = 0;

  static SkipHead add_to(ParamLayout& layout, const std::string& prefix, Index hidden, Index in,
                         Index out) {
    SkipHead s;
    s.hidden = hidden;
    s.in = in;
    s.out = out;
    s.wh = layout.add(prefix + ".wh", hidden, out);
    s.wx = layout.add(prefix + ".wx", in, out);
    s.b = layout.add(prefix + ".b", 1, out);
    return s;
  }

  template <class W, class T>
  T operator()(const W& w, const T& h, const T& x) const {
    return ad::add_row(ad::add(ad::matmul(h, w(wh)), ad::matmul(x, w(wx))), w(b));
  }
};

/// Stack of tanh layers.
struct TanhStack {
  std::vector<Dense> layers;

  static TanhStack add_to(ParamLayout& layout, const std::string& prefix, Index in,
                          const std::vector<Index>& widths) {
    TanhStack s;
    Index prev = in;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      s.layers.push_back(Dense::add_to(layout, prefix + "." + std::to_string(i), prev, widths[i]));
      prev = widths[i];
    }
    return s;
  }

  [[nodiscard]] Index out(Index in) const { return layers.empty() ? in : layers.back().out; }

  template <class W, class T>
  T operator()(const W& w, T x) const {
    for (const Dense& d : layers) x = ad::tanh(d(w, x));
    return x;
  }
};

// ---- Gaussian heads --------------------------------------------------------

/// Diagonal Gaussian given by mean and natural-log variance.
struct GaussianHead {
  Eigen::VectorXd mean;
  Eigen::VectorXd logvar;

  void validate() const {
    if (mean.size() != logvar.size()) throw DimensionError("GaussianHead: mean/logvar length differ");
  }
  /// Copy with logvar clamped to [kLogVarMin, kLogVarMax].
  [[nodiscard]] GaussianHead clamped() const {
    return {mean, logvar.cwiseMax(kLogVarMin).cwiseMin(kLogVarMax)};
  }
};

template <class T>
T reparameterize(const T& mean, const T& logvar, const T& noise) {
  return ad::add(mean, ad::mul(ad::exp(ad::scale(logvar, 0.5)), noise));
}

/// Elementwise 0.5 * (mean^2 + exp(logvar) - 1 - logvar).
template <class T>
T kl_terms(const T& mean, const T& logvar) {
  return ad::scale(ad::sub(ad::add(ad::square(mean), ad::exp(logvar)), ad::add_scalar(logvar, 1.0)), 0.5);
}

/// mean + exp(0.5 * logvar) * noise
inline Eigen::VectorXd reparameterize(const GaussianHead& head, const Eigen::VectorXd& noise) {
  head.validate();
  if (noise.size() != head.mean.size()) throw DimensionError("reparameterize: noise length differs from head");
  return head.mean.array() + (0.5 * head.logvar.array()).exp() * noise.array();
}

/// KL(N(mean, exp(logvar)) || N(0, I)); non-negative.
inline double kl_to_standard_normal(const GaussianHead& head) {
  head.validate();
  return 0.5 * (head.mean.array().square() + head.logvar.array().exp() - 1.0 - head.logvar.array()).sum();
}

}  // namespace trajcast::nn
