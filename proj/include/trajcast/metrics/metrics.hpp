// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "trajcast/core/error.hpp"
#include "trajcast/env/types.hpp"
#include "trajcast/forecast/forecast.hpp"

namespace trajcast {

inline constexpr double kBandwidthFloor = 1e-6;

namespace detail {

/// Σ_i Σ_j k(a_i, b_j) with k(x, y) = exp(−(x − y)² / (2 h²)).
inline double kernel_sum(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double inv_two_h2) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) s += ((b.array() - a[i]).square() * -inv_two_h2).exp().sum();
  return s;
}

/// kernel_sum(a, a) from the pairs i < j and the unit diagonal.
inline double kernel_sum_self(const Eigen::VectorXd& a, double inv_two_h2) {
  const Eigen::Index n = a.size();
  double s = 0.0;
  for (Eigen::Index i = 0; i + 1 < n; ++i) s += ((a.tail(n - i - 1).array() - a[i]).square() * -inv_two_h2).exp().sum();
  return 2.0 * s + static_cast<double>(n);
}

/// Canonical operand order so the cross term, and hence the estimate, does not
/// depend on argument order.
inline bool before(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) return a.size() < b.size();
  return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
}

/// Number of pairs i < j of the sorted sample with z_j − z_i ≤ d.
inline std::size_t pairs_within(const std::vector<double>& z, double d) {
  std::size_t count = 0, lo = 0;
  for (std::size_t j = 1; j < z.size(); ++j) {
    while (z[j] - z[lo] > d) ++lo;
    count += j - lo;
  }
  return count;
}

/// k-th smallest (1-based) pairwise distance of the sorted sample, found by
/// bisection over the ordered bit patterns of non-negative doubles.
inline double kth_pair_distance(const std::vector<double>& z, std::size_t k) {
  std::uint64_t lo = 0, hi = std::bit_cast<std::uint64_t>(z.back() - z.front());
  while (lo < hi) {
    const std::uint64_t mid = lo + (hi - lo) / 2;
    if (pairs_within(z, std::bit_cast<double>(mid)) >= k) {
      hi = mid;
    } else {
      lo = mid + 1;
    }
  }
  return std::bit_cast<double>(lo);
}

/// Smallest pairwise distance strictly greater than `d`.
inline double next_pair_distance(const std::vector<double>& z, double d) {
  double best = std::numeric_limits<double>::infinity();
  std::size_t lo = 0;
  for (std::size_t j = 1; j < z.size(); ++j) {
    while (lo + 1 < j && z[j] - z[lo + 1] > d) ++lo;
    if (z[j] - z[lo] > d) best = std::min(best, z[j] - z[lo]);
  }
  return best;
}

}  // namespace detail

/// Biased (V-statistic) squared MMD with a Gaussian kernel of width `bandwidth`:
/// mean_XX k + mean_YY k − 2 mean_XY k over all ordered pairs.
inline double mmd_squared(const Eigen::VectorXd& X, const Eigen::VectorXd& Y, double bandwidth) {
  if (X.size() < 1 || Y.size() < 1) throw DimensionError("mmd_squared: both sample sets must be non-empty");
  if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) throw RangeError("mmd_squared: bandwidth must be > 0");
  const double c = 1.0 / (2.0 * bandwidth * bandwidth);
  const double nx = static_cast<double>(X.size()), ny = static_cast<double>(Y.size());
  const double xy = detail::before(Y, X) ? detail::kernel_sum(Y, X, c) : detail::kernel_sum(X, Y, c);
  return detail::kernel_sum_self(X, c) / (nx * nx) + detail::kernel_sum_self(Y, c) / (ny * ny) - 2.0 * xy / (nx * ny);
}

/// Median of |z_i − z_j| over distinct pairs of the pooled sample (mean of
/// the two middle values for an even pair count), floored at 1e-6.
inline double median_bandwidth(const Eigen::VectorXd& X, const Eigen::VectorXd& Y) {
  std::vector<double> z(X.data(), X.data() + X.size());
  z.insert(z.end(), Y.data(), Y.data() + Y.size());
  if (z.size() < 2) return kBandwidthFloor;
  std::sort(z.begin(), z.end());
  const std::size_t m = z.size() * (z.size() - 1) / 2;
  const std::size_t k = (m + 1) / 2;
  double med = detail::kth_pair_distance(z, k);
  if (m % 2 == 0) {
    const double upper = detail::pairs_within(z, med) > k ? med : detail::next_pair_distance(z, med);
    med = 0.5 * (med + upper);
  }
  return std::max(med, kBandwidthFloor);
}

struct MmdCurve {
  Eigen::VectorXd values;  // t = 1..T, mean over dimensions
  Mat bandwidth;           // T x D_s
  std::size_t n_forecast = 0;
  std::size_t n_observed = 0;
};

/// Per-(t, d) squared MMD between forecast and observed marginals, averaged
/// over d. Observed trajectories hold s_0..s_T; forecasts hold s_1..s_T.
inline MmdCurve trajectory_mmd(const ForecastBundle& b, const std::vector<Trajectory>& observed) {
  b.validate();
  if (observed.size() < 2) throw InsufficientSamplesError("trajectory_mmd: need at least 2 observed trajectories");
  const Eigen::Index T = b.horizon(), D = b.state_dim();
  for (const auto& tr : observed) {
    if (tr.states.rows() != T + 1 || tr.states.cols() != D) {
      throw DimensionError("trajectory_mmd: observed trajectory shape differs from the forecasts");
    }
  }
  MmdCurve c;
  c.values = Eigen::VectorXd::Zero(T);
  c.bandwidth = Mat(T, D);
  c.n_forecast = b.size();
  c.n_observed = observed.size();
  Eigen::VectorXd X(static_cast<Eigen::Index>(b.size())), Y(static_cast<Eigen::Index>(observed.size()));
  for (Eigen::Index t = 0; t < T; ++t) {
    for (Eigen::Index d = 0; d < D; ++d) {
      for (std::size_t i = 0; i < b.size(); ++i) X[static_cast<Eigen::Index>(i)] = b.forecasts[i](t, d);
      for (std::size_t i = 0; i < observed.size(); ++i) Y[static_cast<Eigen::Index>(i)] = observed[i].states(t + 1, d);
      const double h = median_bandwidth(X, Y);
      c.bandwidth(t, d) = h;
      c.values[t] += mmd_squared(X, Y, h);
    }
    c.values[t] /= static_cast<double>(D);
  }
  return c;
}

struct BrierResult {
  double score = 0.0;
  std::vector<std::pair<double, bool>> pairs;
};

/// Mean of (p − o)² over (probability, outcome) pairs.
inline BrierResult brier(const std::vector<std::pair<double, bool>>& pairs) {
  if (pairs.empty()) throw InsufficientSamplesError("brier: no pairs");
  BrierResult r;
  r.pairs = pairs;
  double s = 0.0;
  for (const auto& [p, o] : pairs) {
    if (!(p >= 0.0 && p <= 1.0)) throw RangeError("brier: probability " + std::to_string(p) + " outside [0, 1]");
    const double e = p - (o ? 1.0 : 0.0);
    s += e * e;
  }
  r.score = s / static_cast<double>(pairs.size());
  return r;
}

// ---- exports -------------------------------------------------------------------

inline void write_mmd_curve(const std::string& path, const Eigen::VectorXd& values, const std::string& comment = "") {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  if (!comment.empty()) out << "# " << comment << '\n';
  out << "t,mmd\n" << std::setprecision(17);
  for (Eigen::Index t = 0; t < values.size(); ++t) out << t + 1 << ',' << values[t] << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

/// Summary line then one row per (probability, outcome) pair; `scenario`
/// optionally labels each pair with its scenario index.
inline void write_brier(const std::string& path, const BrierResult& r, const std::vector<std::size_t>& scenario = {},
                        const std::string& comment = "") {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  if (!comment.empty()) out << "# " << comment << '\n';
  out << std::setprecision(17) << "# brier=" << r.score << " n=" << r.pairs.size() << '\n';
  out << "scenario,probability,outcome\n";
  for (std::size_t i = 0; i < r.pairs.size(); ++i) {
    out << (i < scenario.size() ? scenario[i] : i) << ',' << r.pairs[i].first << ',' << (r.pairs[i].second ? 1 : 0) << '\n';
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace trajcast
