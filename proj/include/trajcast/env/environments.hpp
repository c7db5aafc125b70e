// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "trajcast/core/error.hpp"
#include "trajcast/core/rng.hpp"
#include "trajcast/env/types.hpp"

namespace trajcast {

namespace pusher {
// State layout: tip_x, tip_y, tip_vx, tip_vy, ball_x, ball_y, ball_vx, ball_vy.
inline constexpr double kTipGain = 4.0;
inline constexpr double kTipDamping = 2.0;
inline constexpr double kBallFriction = 1.0;
inline constexpr double kContactRadius = 0.1;
inline constexpr double kTipMass = 1.0;
inline constexpr double kBallMass = 0.5;
}  // namespace pusher

namespace drone {
// State layout: px, py, pz, vx, vy, vz, battery, wx, wy, wz.
inline constexpr double kThrustGain = 1.5;
inline constexpr double kWindCoupling = 0.5;
inline constexpr double kIdleDrain = 0.005;
inline constexpr double kThrustDrain = 0.01;
}  // namespace drone

namespace linear_toy {
inline constexpr double kStateGain = 0.9;
inline constexpr double kActionGain = 0.1;
}  // namespace linear_toy

namespace detail {

inline void check_state(const Vec& s, const Vec& a, const EnvConfig& cfg) {
  if (s.size() != state_dim(cfg.env) || a.size() != action_dim(cfg.env)) {
    throw DimensionError("step: expected state/action of size " + std::to_string(state_dim(cfg.env)) + "/" +
                         std::to_string(action_dim(cfg.env)) + " for " + to_string(cfg.env) + ", got " +
                         std::to_string(s.size()) + "/" + std::to_string(a.size()));
  }
  if (!s.allFinite() || !a.allFinite()) throw NumericError("step: non-finite state or action");
}

/// Commanded action clipped to the actuator range, plus Gaussian actuation noise.
inline Vec applied_action(const Vec& cmd, double noise_std, RngStream& rng) {
  Vec u = cmd.cwiseMax(-1.0).cwiseMin(1.0);
  if (noise_std > 0.0) {
    for (Eigen::Index i = 0; i < u.size(); ++i) u[i] += noise_std * rng.normal();
  }
  return u;
}

inline Vec step_pusher(const Vec& s, const Vec& u, double dt) {
  using namespace pusher;
  Vec n(8);
  const Eigen::Vector2d tp = s.segment<2>(0), tv = s.segment<2>(2);
  const Eigen::Vector2d bp = s.segment<2>(4), bv = s.segment<2>(6);

  Eigen::Vector2d tp1 = tp + dt * tv;
  Eigen::Vector2d tv1 = tv + dt * (kTipGain * u.head<2>() - kTipDamping * tv);
  Eigen::Vector2d bp1 = bp + dt * bv;
  Eigen::Vector2d bv1 = bv - dt * kBallFriction * bv;

  const Eigen::Vector2d d = bp1 - tp1;
  const double dist = d.norm();
  if (dist < kContactRadius && dist > 0.0) {
    const Eigen::Vector2d normal = d / dist;
    const double closing = (tv1 - bv1).dot(normal);
    if (closing > 0.0) {
      // Perfectly inelastic along the contact normal.
      const double impulse = closing * kTipMass * kBallMass / (kTipMass + kBallMass);
      tv1 -= (impulse / kTipMass) * normal;
      bv1 += (impulse / kBallMass) * normal;
    }
  }
  n << tp1, tv1, bp1, bv1;
  return n;
}

inline Vec step_drone(const Vec& s, const Vec& u, double hidden_param, double dt) {
  using namespace drone;
  const Eigen::Vector3d p = s.segment<3>(0), v = s.segment<3>(3), w = s.segment<3>(7);
  const Eigen::Vector3d accel = (kThrustGain * u.head<3>() + kWindCoupling * (w - v)) / (1.0 + hidden_param);
  Vec n(10);
  n.segment<3>(0) = p + dt * v;
  n.segment<3>(3) = v + dt * accel;
  n[6] = s[6] - dt * (kIdleDrain + kThrustDrain * u.squaredNorm() * (1.0 + hidden_param));
  n.segment<3>(7) = w;
  return n;
}

}  // namespace detail

/// Drone acceleration for a given applied action; exposed for tests.
inline Eigen::Vector3d drone_acceleration(const Vec& s, const Vec& applied, double hidden_param) {
  const Eigen::Vector3d v = s.segment<3>(3), w = s.segment<3>(7);
  return (drone::kThrustGain * applied.head<3>() + drone::kWindCoupling * (w - v)) / (1.0 + hidden_param);
}

/// One environment transition. Randomness comes only from `rng`.
inline Vec step(const Vec& state, const Vec& action, double hidden_param, RngStream& rng, const EnvConfig& cfg) {
  detail::check_state(state, action, cfg);
  const Vec u = detail::applied_action(action, cfg.action_noise_std, rng);
  Vec next;
  switch (cfg.env) {
    case EnvKind::PusherLite: next = detail::step_pusher(state, u, cfg.dt); break;
    case EnvKind::DroneLite: next = detail::step_drone(state, u, hidden_param, cfg.dt); break;
    case EnvKind::LinearToy: {
      next = linear_toy::kStateGain * state + linear_toy::kActionGain * u;
      if (cfg.process_noise_std > 0.0) {
        for (Eigen::Index i = 0; i < next.size(); ++i) next[i] += cfg.process_noise_std * rng.normal();
      }
      break;
    }
  }
  if (!next.allFinite()) throw NumericError("step: environment produced a non-finite state");
  return next;
}

/// Task coordinates the outcome is judged in.
inline Vec task_position(EnvKind k, const Eigen::Ref<const RowVec>& s) {
  switch (k) {
    case EnvKind::PusherLite: return s.segment(4, 2).transpose();
    case EnvKind::DroneLite: return s.segment(0, 3).transpose();
    case EnvKind::LinearToy: return s.transpose();
  }
  return {};
}

/// True iff the task position is within `radius` of the target at some
/// t in [0, deadline].
inline bool label_outcome(EnvKind k, const Mat& states, const OutcomeSpec& spec) {
  spec.validate(static_cast<int>(states.rows()) - 1);
  for (int t = 0; t <= spec.deadline; ++t) {
    const Vec p = task_position(k, states.row(t));
    if (p.size() != spec.target.size()) throw DimensionError("label_outcome: target dimension mismatch");
    if ((p - spec.target).norm() <= spec.radius) return true;
  }
  return false;
}

inline bool label_outcome(EnvKind k, const Trajectory& traj, const OutcomeSpec& spec) {
  return label_outcome(k, traj.states, spec);
}

// ---- scripted policies -----------------------------------------------------

enum class PolicyKind { PusherPush, DroneWaypoint, RandomUniform };

inline std::string to_string(PolicyKind p) {
  switch (p) {
    case PolicyKind::PusherPush: return "pusher-push";
    case PolicyKind::DroneWaypoint: return "drone-waypoint";
    case PolicyKind::RandomUniform: return "random-uniform";
  }
  return "?";
}

inline PolicyKind policy_kind_from_string(const std::string& s) {
  if (s == "pusher-push") return PolicyKind::PusherPush;
  if (s == "drone-waypoint") return PolicyKind::DroneWaypoint;
  if (s == "random-uniform") return PolicyKind::RandomUniform;
  throw ConfigError("unknown policy '" + s + "'");
}

inline PolicyKind default_policy(EnvKind k) {
  switch (k) {
    case EnvKind::PusherLite: return PolicyKind::PusherPush;
    case EnvKind::DroneLite: return PolicyKind::DroneWaypoint;
    case EnvKind::LinearToy: return PolicyKind::RandomUniform;
  }
  return PolicyKind::RandomUniform;
}

struct PolicyConfig {
  PolicyKind kind = PolicyKind::PusherPush;
  /// Std of the exploration dither added to the commanded action.
  double dither_std = 0.1;
};

inline PolicyConfig default_policy_config(EnvKind k) {
  return {default_policy(k), k == EnvKind::LinearToy ? 0.0 : (k == EnvKind::PusherLite ? 0.1 : 0.05)};
}

namespace detail {

inline Vec pusher_command(const Eigen::Ref<const RowVec>& s, const Vec& target) {
  const Eigen::Vector2d tip = s.segment(0, 2).transpose(), tv = s.segment(2, 2).transpose();
  const Eigen::Vector2d ball = s.segment(4, 2).transpose();
  Eigen::Vector2d dir = target.head<2>() - ball;
  dir = dir.norm() > 1e-9 ? Eigen::Vector2d(dir.normalized()) : Eigen::Vector2d(1.0, 0.0);

  const Eigen::Vector2d offset = tip - ball;
  const double along = offset.dot(dir);
  const Eigen::Vector2d lateral = offset - along * dir;
  Eigen::Vector2d v_des;
  if (along < -0.5 * pusher::kContactRadius && lateral.norm() < 0.4 * pusher::kContactRadius) {
    // Lined up behind the ball: push along the line, slowing near the target.
    const double speed = std::clamp(1.5 * (target.head<2>() - ball).norm(), 0.15, 0.6);
    v_des = speed * dir - 3.0 * lateral;
  } else {
    Eigen::Vector2d aim = ball - 2.0 * pusher::kContactRadius * dir;
    if (along > -pusher::kContactRadius && lateral.norm() < 1.5 * pusher::kContactRadius) {
      // Go around the ball instead of through it.
      const Eigen::Vector2d perp(-dir.y(), dir.x());
      aim += (lateral.dot(perp) >= 0.0 ? 1.0 : -1.0) * 2.0 * pusher::kContactRadius * perp;
    }
    v_des = 3.0 * (aim - tip);
    if (v_des.norm() > 1.0) v_des.normalize();
  }
  return (pusher::kTipDamping / pusher::kTipGain) * v_des + 2.0 * (v_des - tv);
}

inline Vec drone_command(const Eigen::Ref<const RowVec>& s, const Vec& target) {
  constexpr double kMaxSpeed = 1.5;
  const Eigen::Vector3d p = s.segment(0, 3).transpose(), v = s.segment(3, 3).transpose(),
                        w = s.segment(7, 3).transpose();
  Eigen::Vector3d v_des = target.head<3>() - p;
  if (v_des.norm() > kMaxSpeed) v_des *= kMaxSpeed / v_des.norm();
  // Velocity tracking plus wind-drag feed-forward; the payload is unknown to the policy.
  return (v_des - v) - (drone::kWindCoupling / drone::kThrustGain) * (w - v);
}

}  // namespace detail

/// Action of a scripted policy at state `s` for the task target.
inline Vec policy_action(const PolicyConfig& policy, EnvKind env, const Eigen::Ref<const RowVec>& s,
                         const Vec& target, RngStream& rng) {
  const Eigen::Index da = action_dim(env);
  Vec cmd;
  switch (policy.kind) {
    case PolicyKind::PusherPush:
      if (env != EnvKind::PusherLite) throw ConfigError("policy pusher-push requires pusher-lite");
      cmd = detail::pusher_command(s, target);
      break;
    case PolicyKind::DroneWaypoint:
      if (env != EnvKind::DroneLite) throw ConfigError("policy drone-waypoint requires drone-lite");
      cmd = detail::drone_command(s, target);
      break;
    case PolicyKind::RandomUniform:
      cmd.resize(da);
      for (Eigen::Index i = 0; i < da; ++i) cmd[i] = rng.uniform(-1.0, 1.0);
      return cmd;
  }
  cmd = cmd.cwiseMax(-1.0).cwiseMin(1.0);
  if (policy.dither_std > 0.0) {
    for (Eigen::Index i = 0; i < da; ++i) cmd[i] += policy.dither_std * rng.normal();
    cmd = cmd.cwiseMax(-1.0).cwiseMin(1.0);
  }
  return cmd;
}

/// Where forecast actions come from: a fixed sequence, or the scripted policy
/// applied to each forecast's own predicted states.
struct ActionSource {
  enum class Mode { Fixed, Policy };
  Mode mode = Mode::Fixed;
  Mat actions;
  PolicyConfig policy;
  EnvKind env = EnvKind::PusherLite;
  Vec target;
  int horizon = 0;

  static ActionSource fixed(Mat actions) {
    ActionSource s;
    s.mode = Mode::Fixed;
    s.horizon = static_cast<int>(actions.rows());
    s.actions = std::move(actions);
    return s;
  }
  static ActionSource closed_loop(const PolicyConfig& policy, EnvKind env, Vec target, int horizon) {
    ActionSource s;
    s.mode = Mode::Policy;
    s.policy = policy;
    s.env = env;
    s.target = std::move(target);
    s.horizon = horizon;
    return s;
  }

  [[nodiscard]] Vec action(int t, const Eigen::Ref<const RowVec>& state, RngStream& rng) const {
    if (mode == Mode::Fixed) return actions.row(t).transpose();
    return policy_action(policy, env, state, target, rng);
  }
};

// ---- scenarios and episodes --------------------------------------------------

/// Initial state plus the task target the policy steers toward.
struct Scenario {
  Vec s0;
  Vec target;
};

inline Scenario sample_scenario(const EnvConfig& cfg, RngStream& rng) {
  const ScenarioRanges& r = cfg.ranges;
  const auto unit = [&](int dims) {
    Vec d(dims);
    do {
      for (int i = 0; i < dims; ++i) d[i] = rng.normal();
    } while (d.norm() < 1e-9);
    return Vec(d.normalized());
  };
  Scenario sc;
  switch (cfg.env) {
    case EnvKind::PusherLite: {
      sc.s0 = Vec::Zero(8);
      const Eigen::Vector2d ball(rng.uniform(-r.object_half_width, r.object_half_width),
                                 rng.uniform(-r.object_half_width, r.object_half_width));
      Eigen::Vector2d tip;
      do {
        tip = {rng.uniform(-r.start_half_width, r.start_half_width), rng.uniform(-r.start_half_width, r.start_half_width)};
      } while ((tip - ball).norm() < 2.0 * pusher::kContactRadius);
      sc.s0.segment<2>(0) = tip;
      sc.s0.segment<2>(4) = ball;
      sc.target = ball + rng.uniform(r.target_distance[0], r.target_distance[1]) * unit(2);
      break;
    }
    case EnvKind::DroneLite: {
      sc.s0 = Vec::Zero(10);
      for (int i = 0; i < 3; ++i) sc.s0[i] = rng.uniform(-r.start_half_width, r.start_half_width);
      sc.s0[6] = rng.uniform(0.8, 1.0);
      for (int i = 7; i < 10; ++i) sc.s0[i] = rng.uniform(-r.wind_max, r.wind_max);
      sc.target = sc.s0.head<3>() + rng.uniform(r.target_distance[0], r.target_distance[1]) * unit(3);
      break;
    }
    case EnvKind::LinearToy: {
      sc.s0.resize(2);
      for (int i = 0; i < 2; ++i) sc.s0[i] = rng.uniform(-r.start_half_width, r.start_half_width);
      sc.target = sc.s0 + rng.uniform(r.target_distance[0], r.target_distance[1]) * unit(2);
      break;
    }
  }
  return sc;
}

inline double sample_hidden_param(const EnvConfig& cfg, RngStream& rng) {
  const auto& [lo, hi] = cfg.hidden_param_range;
  return lo == hi ? lo : rng.uniform(lo, hi);
}

/// Closed-loop episode of `cfg.horizon` steps. `env_rng` drives the
/// environment noise and `policy_rng` the policy dither.
inline Trajectory rollout_policy(const EnvConfig& cfg, const PolicyConfig& policy, const Scenario& sc,
                                 double hidden_param, RngStream& env_rng, RngStream& policy_rng) {
  Trajectory tr;
  tr.hidden_param = hidden_param;
  tr.states.resize(cfg.horizon + 1, state_dim(cfg.env));
  tr.actions.resize(cfg.horizon, action_dim(cfg.env));
  tr.states.row(0) = sc.s0.transpose();
  for (int t = 0; t < cfg.horizon; ++t) {
    const Vec a = policy_action(policy, cfg.env, tr.states.row(t), sc.target, policy_rng);
    tr.actions.row(t) = a.transpose();
    tr.states.row(t + 1) = step(tr.states.row(t).transpose(), a, hidden_param, env_rng, cfg).transpose();
  }
  return tr;
}

/// Open-loop episode under a fixed action sequence.
inline Trajectory rollout_actions(const EnvConfig& cfg, const Vec& s0, const Mat& actions, double hidden_param,
                                  RngStream& env_rng) {
  Trajectory tr;
  tr.hidden_param = hidden_param;
  tr.actions = actions;
  tr.states.resize(actions.rows() + 1, s0.size());
  tr.states.row(0) = s0.transpose();
  for (Eigen::Index t = 0; t < actions.rows(); ++t) {
    tr.states.row(t + 1) =
        step(tr.states.row(t).transpose(), actions.row(t).transpose(), hidden_param, env_rng, cfg).transpose();
  }
  return tr;
}

/// Episode `index` of a dataset generated with `seed`; streams are derived
/// per episode so episodes can be produced in any order.
inline Trajectory generate_episode(const EnvConfig& cfg, const PolicyConfig& policy, std::uint64_t seed,
                                   std::uint64_t index) {
  const RngStream base(seed, index);
  RngStream scenario_rng = base.split(0), hidden_rng = base.split(1), env_rng = base.split(2),
            policy_rng = base.split(3);
  const Scenario sc = sample_scenario(cfg, scenario_rng);
  const double hp = sample_hidden_param(cfg, hidden_rng);
  return rollout_policy(cfg, policy, sc, hp, env_rng, policy_rng);
}

// ---- normalization -------------------------------------------------------------

/// Population statistics of the given trajectories. Scales are floored so
/// they are strictly positive; see Normalization for the meaning of each.
inline Normalization compute_normalization(const std::vector<Trajectory>& trajs, double innovation_floor) {
  if (trajs.empty()) throw ConfigError("compute_normalization: no trajectories");
  const Eigen::Index ds = trajs[0].states.cols(), da = trajs[0].actions.cols();
  Eigen::Index ns = 0, na = 0;
  for (const auto& t : trajs) {
    ns += t.states.rows();
    na += t.actions.rows();
  }
  Mat S(ns, ds), A(na, da), S0(na, ds), D(na, ds);
  Eigen::Index is = 0, ia = 0;
  for (const auto& t : trajs) {
    S.middleRows(is, t.states.rows()) = t.states;
    is += t.states.rows();
    const Eigen::Index T = t.actions.rows();
    A.middleRows(ia, T) = t.actions;
    S0.middleRows(ia, T) = t.states.topRows(T);
    D.middleRows(ia, T) = t.states.bottomRows(T) - t.states.topRows(T);
    ia += T;
  }
  constexpr double kTiny = 1e-6;
  const auto stddev = [](const Mat& X, const RowVec& mean) {
    return RowVec(((X.rowwise() - mean).array().square().colwise().sum() / static_cast<double>(X.rows())).sqrt());
  };
  Normalization n;
  n.state_mean = S.colwise().mean();
  n.state_scale = stddev(S, n.state_mean).cwiseMax(kTiny);
  n.action_mean = A.colwise().mean();
  n.action_scale = stddev(A, n.action_mean).cwiseMax(kTiny);
  const RowVec floor = innovation_floor * n.state_scale;
  n.delta_scale = RowVec((D.array().square().colwise().sum() / static_cast<double>(na)).sqrt()).cwiseMax(floor);

  // Least-squares linear one-step predictor of the delta on [s, a, 1].
  Mat X(na, ds + da + 1);
  X << n.normalize_states(S0), n.normalize_actions(A), Mat::Ones(na, 1);
  Mat XtX = X.transpose() * X;
  XtX.diagonal().array() += 1e-9;
  const Mat coef = XtX.ldlt().solve(X.transpose() * D);
  const Mat resid = D - X * coef;
  n.innovation_scale =
      RowVec((resid.array().square().colwise().sum() / static_cast<double>(na)).sqrt()).cwiseMax(floor);
  return n;
}

inline TrajectoryDataset generate_dataset(const EnvConfig& cfg, const PolicyConfig& policy, int n,
                                          std::uint64_t seed) {
  cfg.validate();
  if (n < 1) throw ConfigError("generate_dataset: n must be >= 1");
  TrajectoryDataset ds;
  ds.env = cfg.env;
  ds.generation_seed = seed;
  ds.trajectories.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    ds.trajectories.push_back(generate_episode(cfg, policy, seed, static_cast<std::uint64_t>(i)));
  }
  ds.normalization = compute_normalization(ds.trajectories, cfg.innovation_floor);
  ds.validate();
  return ds;
}

/// First `n` trajectories with normalization recomputed from them alone.
inline TrajectoryDataset subset(const TrajectoryDataset& ds, std::size_t n, double innovation_floor) {
  if (n == 0 || n > ds.size()) throw ConfigError("subset: size out of range");
  TrajectoryDataset out;
  out.env = ds.env;
  out.generation_seed = ds.generation_seed;
  out.trajectories.assign(ds.trajectories.begin(), ds.trajectories.begin() + static_cast<std::ptrdiff_t>(n));
  out.normalization = compute_normalization(out.trajectories, innovation_floor);
  return out;
}

}  // namespace trajcast
