// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>

#include "trajcast/core/params.hpp"
#include "trajcast/core/rng.hpp"
#include "trajcast/env/environments.hpp"

namespace trajcast::testing {

/// Central finite-difference gradient of `f` over the parameter values.
inline Eigen::VectorXd numeric_gradient(const std::function<double(const ParamVector&)>& f, const ParamVector& p,
                                        double h = 1e-5) {
  ParamVector q = p;
  Eigen::VectorXd g(p.values().size());
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const double x = q.values()[i];
    q.values()[i] = x + h;
    const double up = f(q);
    q.values()[i] = x - h;
    const double down = f(q);
    q.values()[i] = x;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// max_i |a_i − b_i| / max(|a_i|, |b_i|, floor). The floor keeps entries whose
/// true gradient is zero from turning finite-difference noise into a ratio.
inline double max_relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double floor = 1e-6) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

inline ParamVector random_params(const ParamLayout& layout, std::uint64_t seed, double scale = 0.5) {
  ParamVector p(layout);
  RngStream r(seed, 77);
  for (Eigen::Index i = 0; i < p.values().size(); ++i) p.values()[i] = r.uniform(-scale, scale);
  return p;
}

inline Mat random_mat(Eigen::Index r, Eigen::Index c, RngStream& rng) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

/// Linear toy env with the given process noise and horizon.
inline EnvConfig linear_env(double sigma, int horizon) {
  EnvConfig c = default_env_config(EnvKind::LinearToy);
  c.process_noise_std = sigma;
  c.horizon = horizon;
  return c;
}

inline double sample_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace trajcast::testing
