// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "trajcast/core/error.hpp"

namespace trajcast {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

enum class EnvKind { PusherLite, DroneLite, LinearToy };

inline std::string to_string(EnvKind k) {
  switch (k) {
    case EnvKind::PusherLite: return "pusher-lite";
    case EnvKind::DroneLite: return "drone-lite";
    case EnvKind::LinearToy: return "linear-toy";
  }
  return "?";
}

inline EnvKind env_kind_from_string(const std::string& s) {
  if (s == "pusher-lite") return EnvKind::PusherLite;
  if (s == "drone-lite") return EnvKind::DroneLite;
  if (s == "linear-toy") return EnvKind::LinearToy;
  throw ConfigError("unknown env_id '" + s + "'");
}

inline Eigen::Index state_dim(EnvKind k) {
  switch (k) {
    case EnvKind::PusherLite: return 8;
    case EnvKind::DroneLite: return 10;
    case EnvKind::LinearToy: return 2;
  }
  return 0;
}

inline Eigen::Index action_dim(EnvKind k) {
  switch (k) {
    case EnvKind::PusherLite: return 2;
    case EnvKind::DroneLite: return 3;
    case EnvKind::LinearToy: return 2;
  }
  return 0;
}

/// Ranges the scenario sampler draws initial conditions and targets from.
struct ScenarioRanges {
  double start_half_width = 0.5;   // agent start box (tip / vehicle / linear state)
  double object_half_width = 0.2;  // ball start box (pusher-lite)
  std::array<double, 2> target_distance{0.3, 0.6};
  double wind_max = 0.5;           // drone-lite
};

struct EnvConfig {
  EnvKind env = EnvKind::PusherLite;
  double action_noise_std = 0.05;
  /// Additive Gaussian noise on the next state; only the linear toy uses it.
  double process_noise_std = 0.0;
  std::array<double, 2> hidden_param_range{0.0, 0.0};
  double dt = 0.05;
  int horizon = 120;
  /// Floor for the per-dimension innovation scale, as a fraction of the state scale.
  double innovation_floor = 1e-2;
  ScenarioRanges ranges;

  void validate() const {
    std::vector<std::string> bad;
    if (!(dt > 0.0)) bad.emplace_back("env.dt must be > 0");
    if (horizon < 1) bad.emplace_back("env.horizon must be >= 1");
    if (action_noise_std < 0.0) bad.emplace_back("env.action_noise_std must be >= 0");
    if (process_noise_std < 0.0) bad.emplace_back("env.process_noise_std must be >= 0");
    if (hidden_param_range[0] > hidden_param_range[1]) bad.emplace_back("env.hidden_param_range is inverted");
    if (!(innovation_floor > 0.0)) bad.emplace_back("env.innovation_floor must be > 0");
    if (!bad.empty()) {
      std::string msg;
      for (const auto& b : bad) msg += (msg.empty() ? "" : "; ") + b;
      throw ConfigError(msg);
    }
  }
};

/// Defaults per environment. Horizons are 120 (pusher-lite) and 60 (drone-lite).
inline EnvConfig default_env_config(EnvKind k) {
  EnvConfig c;
  c.env = k;
  switch (k) {
    case EnvKind::PusherLite:
      c.action_noise_std = 0.05;
      c.dt = 0.05;
      c.horizon = 120;
      c.ranges = {0.5, 0.2, {0.3, 0.6}, 0.0};
      break;
    case EnvKind::DroneLite:
      c.action_noise_std = 0.05;
      c.hidden_param_range = {0.0, 1.0};
      c.dt = 0.1;
      c.horizon = 60;
      c.ranges = {1.0, 0.0, {2.0, 3.5}, 0.5};
      break;
    case EnvKind::LinearToy:
      c.action_noise_std = 0.0;
      c.process_noise_std = 0.1;
      c.dt = 1.0;
      c.horizon = 20;
      c.ranges = {1.0, 0.0, {0.5, 1.0}, 0.0};
      break;
  }
  return c;
}

/// One episode: states s_0..s_T (rows) and actions a_0..a_{T-1} (rows).
struct Trajectory {
  Mat states;
  Mat actions;
  double hidden_param = 0.0;

  [[nodiscard]] int horizon() const { return static_cast<int>(actions.rows()); }

  void validate() const {
    if (states.rows() != actions.rows() + 1) {
      throw DimensionError("trajectory must hold one more state than actions");
    }
    if (!states.allFinite() || !actions.allFinite()) throw NumericError("trajectory has non-finite entries");
  }

  friend bool operator==(const Trajectory& a, const Trajectory& b) {
    return a.hidden_param == b.hidden_param && a.states.rows() == b.states.rows() &&
           a.states.cols() == b.states.cols() && a.actions.rows() == b.actions.rows() &&
           a.actions.cols() == b.actions.cols() && a.states == b.states && a.actions == b.actions;
  }
};

/// Per-dimension affine maps used by every model.
///
/// States and actions are standardized (mean/scale). One-step deltas are only
/// scaled, so a zero network output means "no change". `innovation_scale` is
/// the RMS one-step residual of a least-squares linear predictor; sequence
/// models measure their reconstruction error in these units.
struct Normalization {
  RowVec state_mean;
  RowVec state_scale;
  RowVec action_mean;
  RowVec action_scale;
  RowVec delta_scale;
  RowVec innovation_scale;

  [[nodiscard]] Mat normalize_states(const Mat& s) const {
    return (s.rowwise() - state_mean).array().rowwise() / state_scale.array();
  }
  [[nodiscard]] Mat denormalize_states(const Mat& s) const {
    return (s.array().rowwise() * state_scale.array()).matrix().rowwise() + state_mean;
  }
  [[nodiscard]] Mat normalize_actions(const Mat& a) const {
    return (a.rowwise() - action_mean).array().rowwise() / action_scale.array();
  }

  friend bool operator==(const Normalization&, const Normalization&) = default;
};

struct TrajectoryDataset {
  std::vector<Trajectory> trajectories;
  Normalization normalization;
  EnvKind env = EnvKind::PusherLite;
  std::uint64_t generation_seed = 0;

  [[nodiscard]] std::size_t size() const { return trajectories.size(); }
  [[nodiscard]] Eigen::Index state_dim() const { return trajectories.at(0).states.cols(); }
  [[nodiscard]] Eigen::Index action_dim() const { return trajectories.at(0).actions.cols(); }
  [[nodiscard]] int horizon() const { return trajectories.at(0).horizon(); }

  void validate() const {
    if (trajectories.empty()) throw ConfigError("dataset is empty");
    for (const auto& t : trajectories) {
      t.validate();
      if (t.states.cols() != state_dim() || t.actions.cols() != action_dim() || t.horizon() != horizon()) {
        throw DimensionError("dataset trajectories differ in shape");
      }
    }
    if ((normalization.state_scale.array() <= 0).any() || (normalization.action_scale.array() <= 0).any() ||
        (normalization.delta_scale.array() <= 0).any() || (normalization.innovation_scale.array() <= 0).any()) {
      throw NumericError("normalization scales must be strictly positive");
    }
  }
};

/// Success means the task position comes within `radius` of `target` at some
/// time index t <= deadline (inclusive).
struct OutcomeSpec {
  Vec target;
  double radius = 0.1;
  int deadline = 1;

  void validate(int horizon) const {
    if (!(radius > 0.0)) throw ConfigError("outcome radius must be > 0");
    if (deadline <= 0) throw ConfigError("outcome deadline must be > 0");
    if (deadline > horizon) {
      throw RangeError("outcome deadline " + std::to_string(deadline) + " exceeds horizon " +
                       std::to_string(horizon));
    }
  }
};

}  // namespace trajcast
