// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "trajcast/env/dataset_io.hpp"
#include "trajcast/env/environments.hpp"

namespace trajcast {
namespace {

EnvConfig quiet(EnvKind k) {
  EnvConfig c = default_env_config(k);
  c.action_noise_std = 0.0;
  return c;
}

TEST(Step, PusherMatchesClosedFormEulerWithoutContact) {
  const EnvConfig cfg = quiet(EnvKind::PusherLite);
  const int T = 30;
  Vec s = Vec::Zero(8);
  s << 0.1, -0.2, 0.3, 0.05, 5.0, 5.0, 0.0, 0.0;  // ball far away
  const Eigen::Vector2d u(0.6, -0.4);

  // Per axis the tip follows x' = A x + B u with x = (position, velocity).
  const double dt = cfg.dt;
  Eigen::Matrix2d A;
  A << 1.0, dt, 0.0, 1.0 - dt * pusher::kTipDamping;
  const Eigen::Vector2d B(0.0, dt * pusher::kTipGain);
  Eigen::Matrix2d Ak = Eigen::Matrix2d::Identity(), acc = Eigen::Matrix2d::Zero();
  for (int k = 0; k < T; ++k) {
    acc += Ak;
    Ak = A * Ak;
  }

  RngStream rng(1, 1);
  Vec x = s;
  for (int t = 0; t < T; ++t) x = step(x, u, 0.0, rng, cfg);
  for (int axis = 0; axis < 2; ++axis) {
    const Eigen::Vector2d x0(s[axis], s[2 + axis]);
    const Eigen::Vector2d expect = Ak * x0 + acc * B * u[axis];
    EXPECT_NEAR(x[axis], expect[0], 1e-12);
    EXPECT_NEAR(x[2 + axis], expect[1], 1e-12);
  }
  EXPECT_EQ(x.segment<4>(4), s.segment<4>(4));
}

TEST(Step, DeterministicGivenRngState) {
  for (EnvKind k : {EnvKind::PusherLite, EnvKind::DroneLite, EnvKind::LinearToy}) {
    const EnvConfig cfg = default_env_config(k);
    RngStream sr(2, 2);
    const Scenario sc = sample_scenario(cfg, sr);
    const Vec a = Vec::Constant(action_dim(k), 0.3);
    RngStream r1(7, 3), r2(7, 3);
    EXPECT_EQ(step(sc.s0, a, 0.4, r1, cfg), step(sc.s0, a, 0.4, r2, cfg)) << to_string(k);
  }
}

TEST(Step, DroneHiddenParamHalvesAcceleration) {
  const EnvConfig cfg = default_env_config(EnvKind::DroneLite);
  Vec s = Vec::Zero(10);
  s << 0.0, 0.0, 0.0, 0.2, -0.1, 0.0, 1.0, 0.3, 0.1, -0.2;
  const Vec a = Eigen::Vector3d(0.5, -0.3, 0.8);
  RngStream r0(3, 3), r1(3, 3);
  const Vec n0 = step(s, a, 0.0, r0, cfg), n1 = step(s, a, 1.0, r1, cfg);
  const Eigen::Vector3d acc0 = (n0.segment<3>(3) - s.segment<3>(3)) / cfg.dt;
  const Eigen::Vector3d acc1 = (n1.segment<3>(3) - s.segment<3>(3)) / cfg.dt;
  EXPECT_LT((acc1 - 0.5 * acc0).cwiseAbs().maxCoeff(), 1e-12);

  RngStream q(3, 3);
  const Vec applied = detail::applied_action(a, cfg.action_noise_std, q);
  EXPECT_EQ(drone_acceleration(s, applied, 1.0), 0.5 * drone_acceleration(s, applied, 0.0));
}

TEST(Step, DimensionMismatchThrows) {
  const EnvConfig cfg = default_env_config(EnvKind::PusherLite);
  RngStream r(1, 1);
  EXPECT_THROW((void)step(Vec::Zero(7), Vec::Zero(2), 0.0, r, cfg), DimensionError);
  EXPECT_THROW((void)step(Vec::Zero(8), Vec::Zero(3), 0.0, r, cfg), DimensionError);
}

TEST(Step, NonFiniteStateThrows) {
  const EnvConfig cfg = default_env_config(EnvKind::DroneLite);
  Vec s = Vec::Zero(10);
  s[2] = std::numeric_limits<double>::infinity();
  RngStream r(1, 1);
  EXPECT_THROW((void)step(s, Vec::Zero(3), 0.0, r, cfg), NumericError);
}

TEST(Step, NoiselessRolloutIsFunctionOfStartAndActions) {
  const EnvConfig cfg = quiet(EnvKind::PusherLite);
  RngStream sr(4, 4);
  const Scenario sc = sample_scenario(cfg, sr);
  Mat actions(cfg.horizon, 2);
  RngStream ar(5, 5);
  for (Eigen::Index i = 0; i < actions.size(); ++i) actions.data()[i] = ar.uniform(-1.0, 1.0);
  RngStream e1(1, 1), e2(99, 3);
  EXPECT_EQ(rollout_actions(cfg, sc.s0, actions, 0.0, e1), rollout_actions(cfg, sc.s0, actions, 0.0, e2));
}

TEST(GenerateDataset, Shape) {
  const EnvConfig cfg = default_env_config(EnvKind::PusherLite);
  const TrajectoryDataset ds = generate_dataset(cfg, default_policy_config(cfg.env), 10, 1);
  ASSERT_EQ(ds.size(), 10u);
  for (const auto& t : ds.trajectories) {
    EXPECT_EQ(t.states.rows(), 121);
    EXPECT_EQ(t.actions.rows(), 120);
    EXPECT_EQ(t.states.cols(), 8);
    EXPECT_EQ(t.actions.cols(), 2);
  }
}

TEST(GenerateDataset, SameSeedBitIdentical) {
  const EnvConfig cfg = default_env_config(EnvKind::DroneLite);
  const auto a = generate_dataset(cfg, default_policy_config(cfg.env), 5, 3);
  const auto b = generate_dataset(cfg, default_policy_config(cfg.env), 5, 3);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a.trajectories[i] == b.trajectories[i]);
  EXPECT_TRUE(a.normalization == b.normalization);
}

TEST(GenerateDataset, DifferentSeedsDiffer) {
  const EnvConfig cfg = default_env_config(EnvKind::PusherLite);
  const auto a = generate_dataset(cfg, default_policy_config(cfg.env), 3, 1);
  const auto b = generate_dataset(cfg, default_policy_config(cfg.env), 3, 2);
  bool differ = false;
  for (std::size_t i = 0; i < a.size(); ++i) differ = differ || !(a.trajectories[i].states == b.trajectories[i].states);
  EXPECT_TRUE(differ);
}

TEST(GenerateDataset, RejectsNonPositiveCount) {
  const EnvConfig cfg = default_env_config(EnvKind::PusherLite);
  EXPECT_THROW((void)generate_dataset(cfg, default_policy_config(cfg.env), 0, 1), ConfigError);
}

TEST(GenerateDataset, NormalizationStandardizesStates) {
  for (EnvKind k : {EnvKind::PusherLite, EnvKind::DroneLite}) {
    const EnvConfig cfg = default_env_config(k);
    const TrajectoryDataset ds = generate_dataset(cfg, default_policy_config(k), 20, 4);
    Eigen::Index rows = 0;
    for (const auto& t : ds.trajectories) rows += t.states.rows();
    Mat all(rows, ds.state_dim());
    Eigen::Index r = 0;
    for (const auto& t : ds.trajectories) {
      all.middleRows(r, t.states.rows()) = ds.normalization.normalize_states(t.states);
      r += t.states.rows();
    }
    const RowVec mean = all.colwise().mean();
    const RowVec sd = ((all.rowwise() - mean).array().square().colwise().sum() / static_cast<double>(rows)).sqrt();
    for (Eigen::Index d = 0; d < ds.state_dim(); ++d) {
      // Dimensions constant across the dataset (pusher-lite starts at rest) have their scale floored.
      if (ds.normalization.state_scale[d] <= 1e-6) continue;
      EXPECT_LT(std::abs(mean[d]), 1e-9) << to_string(k) << " dim " << d;
      EXPECT_LT(std::abs(sd[d] - 1.0), 1e-9) << to_string(k) << " dim " << d;
    }
  }
}

TEST(Drone, HiddenParamChangesTrajectories) {
  const EnvConfig cfg = default_env_config(EnvKind::DroneLite);
  const PolicyConfig pol = default_policy_config(cfg.env);
  RngStream sr(6, 6);
  const Scenario sc = sample_scenario(cfg, sr);
  RngStream e1(1, 2), p1(1, 3), e2(1, 2), p2(1, 3);
  const Trajectory light = rollout_policy(cfg, pol, sc, 0.0, e1, p1);
  const Trajectory heavy = rollout_policy(cfg, pol, sc, 1.0, e2, p2);
  EXPECT_GT((light.states - heavy.states).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Pusher, ContactBifurcatesNoisyRollouts) {
  // Tip heads straight for a ball offset sideways by just under the contact
  // radius, so actuation noise decides whether the two touch.
  EnvConfig cfg = default_env_config(EnvKind::PusherLite);
  cfg.horizon = 40;
  Vec s0 = Vec::Zero(8);
  s0[4] = 0.5;
  s0[5] = 0.09;
  Mat actions = Mat::Zero(cfg.horizon, 2);
  actions.col(0).setConstant(0.5);
  int contacts = 0;
  for (int i = 0; i < 1000; ++i) {
    RngStream r(11, static_cast<std::uint64_t>(i));
    const Trajectory tr = rollout_actions(cfg, s0, actions, 0.0, r);
    contacts += (tr.states.col(6).array() != 0.0).any() ? 1 : 0;
  }
  EXPECT_GE(contacts, 50);
  EXPECT_LE(contacts, 950);
}

Trajectory line_trajectory(int T, const Eigen::Vector2d& from, const Eigen::Vector2d& to) {
  Trajectory tr;
  tr.states = Mat::Zero(T + 1, 8);
  tr.actions = Mat::Zero(T, 2);
  for (int t = 0; t <= T; ++t) {
    const double f = static_cast<double>(t) / T;
    tr.states.row(t).segment(4, 2) = ((1.0 - f) * from + f * to).transpose();
  }
  return tr;
}

TEST(LabelOutcome, BallOnTargetAtStart) {
  const Trajectory tr = line_trajectory(10, {0.3, 0.3}, {1.0, 1.0});
  const OutcomeSpec spec{Eigen::Vector2d(0.3, 0.3), 0.01, 5};
  EXPECT_TRUE(label_outcome(EnvKind::PusherLite, tr, spec));
}

TEST(LabelOutcome, UnreachableTarget) {
  const Trajectory tr = line_trajectory(10, {0.0, 0.0}, {1.0, 0.0});
  const OutcomeSpec spec{Eigen::Vector2d(100.0, 100.0), 0.01, 10};
  EXPECT_FALSE(label_outcome(EnvKind::PusherLite, tr, spec));
}

TEST(LabelOutcome, DeadlineIsInclusive) {
  // Ball moves 0.125 per step along x; at t = 4 it is exactly 0.25 from the
  // target (all values are exact in binary).
  const Trajectory tr = line_trajectory(8, {0.0, 0.0}, {1.0, 0.0});
  const OutcomeSpec on{Eigen::Vector2d(0.75, 0.0), 0.25, 4};
  EXPECT_TRUE(label_outcome(EnvKind::PusherLite, tr, on));
  const OutcomeSpec early{Eigen::Vector2d(0.75, 0.0), 0.25, 3};
  EXPECT_FALSE(label_outcome(EnvKind::PusherLite, tr, early));
}

TEST(LabelOutcome, DeadlineBeyondHorizonThrows) {
  const Trajectory tr = line_trajectory(10, {0.0, 0.0}, {1.0, 0.0});
  const OutcomeSpec spec{Eigen::Vector2d(0.0, 0.0), 0.1, 11};
  EXPECT_THROW((void)label_outcome(EnvKind::PusherLite, tr, spec), RangeError);
}

TEST(LabelOutcome, DroneUsesVehiclePosition) {
  Trajectory tr;
  tr.states = Mat::Zero(3, 10);
  tr.actions = Mat::Zero(2, 3);
  tr.states.row(2).head(3) << 1.0, 2.0, 3.0;
  EXPECT_TRUE(label_outcome(EnvKind::DroneLite, tr, OutcomeSpec{Eigen::Vector3d(1.0, 2.0, 3.0), 0.05, 2}));
  EXPECT_FALSE(label_outcome(EnvKind::DroneLite, tr, OutcomeSpec{Eigen::Vector3d(1.0, 2.0, 3.0), 0.05, 1}));
}

TEST(DatasetIo, RoundTripIsExact) {
  const EnvConfig cfg = default_env_config(EnvKind::DroneLite);
  const TrajectoryDataset ds = generate_dataset(cfg, default_policy_config(cfg.env), 3, 8);
  const std::string path = ::testing::TempDir() + "/ds_roundtrip.jsonl";
  write_dataset(path, ds);
  const DatasetFile f = read_dataset(path);
  ASSERT_EQ(f.dataset.size(), ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_TRUE(f.dataset.trajectories[i] == ds.trajectories[i]);
  EXPECT_TRUE(f.dataset.normalization == ds.normalization);
}

}  // namespace
}  // namespace trajcast
