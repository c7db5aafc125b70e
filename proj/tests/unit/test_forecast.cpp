// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "helpers.hpp"
#include "trajcast/env/environments.hpp"
#include "trajcast/forecast/forecast.hpp"

namespace trajcast {
namespace {

Normalization unit_normalization(Eigen::Index ds, Eigen::Index da) {
  Normalization n;
  n.state_mean = RowVec::Zero(ds);
  n.state_scale = RowVec::Ones(ds);
  n.action_mean = RowVec::Zero(da);
  n.action_scale = RowVec::Ones(da);
  n.delta_scale = RowVec::Ones(ds);
  n.innovation_scale = RowVec::Ones(ds);
  return n;
}

/// Members whose skip path is exactly the linear toy map; they differ only in
/// GRU weights that never reach the output.
DynamicsEnsemble exact_linear_ensemble(int members) {
  DynamicsEnsemble ens;
  ens.arch = {2, 2, 3};
  ens.normalization = unit_normalization(2, 2);
  const MemberNet net(ens.arch);
  for (int m = 0; m < members; ++m) {
    ParamVector p(net.layout);
    auto wx = p.matrix(net.head.wx);
    for (int d = 0; d < 2; ++d) {
      wx(d, d) = linear_toy::kStateGain - 1.0;
      wx(2 + d, d) = linear_toy::kActionGain;
    }
    p.matrix(net.cell.wh)(0, 0) = 0.1 * (m + 1);
    ens.members.push_back(p);
  }
  return ens;
}

ResidualCVAE collapsed_cvae(const DynamicsEnsemble& ens) {
  ResidualCVAE c;
  c.arch = {2, 2, 4, 2};
  c.normalization = ens.normalization;
  const VaeNets nets(c.arch);
  c.encoder = ParamVector(nets.enc_layout);
  c.decoder = ParamVector(nets.dec_layout);
  return c;
}

struct Trained {
  TrajectoryDataset data;
  DynamicsEnsemble ens;
  ResidualCVAE cvae;
};

const Trained& trained() {
  static const Trained t = [] {
    const EnvConfig cfg = testing::linear_env(0.1, 12);
    Trained r;
    r.data = generate_dataset(cfg, default_policy_config(cfg.env), 16, 9);
    EnsembleTrainConfig ec;
    ec.members = 3;
    ec.hidden = 6;
    ec.epochs = 1;
    ec.min_steps = 40;
    ec.batch_size = 4;
    r.ens = train_ensemble(r.data, ec, 2);
    VaeTrainConfig vc;
    vc.hidden = 6;
    vc.latent_dim = 2;
    vc.epochs = 1;
    vc.min_steps = 40;
    vc.batch_size = 4;
    r.cvae = train_residual_cvae(r.data, r.ens, vc, 2);
    return r;
  }();
  return t;
}

TEST(Forecast, ShapeOfBundle) {
  const Trained& t = trained();
  RngStream rng(1, 1);
  const ForecastBundle b = forecast(t.ens, t.cvae, Eigen::Vector2d(0.1, -0.2), Mat::Zero(60, 2), 16, rng);
  ASSERT_EQ(b.size(), 16u);
  for (const Mat& f : b.forecasts) {
    EXPECT_EQ(f.rows(), 60);
    EXPECT_EQ(f.cols(), 2);
  }
  EXPECT_EQ(b.residual_samples.size(), 16u);
  EXPECT_EQ(b.n_members, 3u);
}

TEST(Forecast, ExactEnsembleAndCollapsedCvaeReproduceTruth) {
  const DynamicsEnsemble ens = exact_linear_ensemble(3);
  ens.validate();
  const ResidualCVAE cvae = collapsed_cvae(ens);
  EnvConfig cfg = testing::linear_env(0.0, 30);
  RngStream arng(5, 5);
  Mat actions(30, 2);
  for (Eigen::Index i = 0; i < actions.size(); ++i) actions.data()[i] = arng.uniform(-1.0, 1.0);
  const Vec s0 = Eigen::Vector2d(0.6, -0.3);
  RngStream env_rng(1, 1);
  const Trajectory truth = rollout_actions(cfg, s0, actions, 0.0, env_rng);
  RngStream rng(2, 2);
  const ForecastBundle b = forecast(ens, cvae, s0, actions, 20, rng);
  for (const Mat& f : b.forecasts) EXPECT_LT((f - truth.states.bottomRows(30)).cwiseAbs().maxCoeff(), 1e-12);
  for (const auto& r : b.residual_samples) EXPECT_LT(r.residuals.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forecast, MemberFrequencies) {
  const DynamicsEnsemble ens = exact_linear_ensemble(5);
  const ResidualCVAE cvae = collapsed_cvae(ens);
  RngStream rng(3, 3);
  const ForecastBundle b = forecast(ens, cvae, Eigen::Vector2d(0.0, 0.0), Mat::Zero(1, 2), 10000, rng);
  std::vector<int> counts(5, 0);
  for (auto m : b.member_indices) ++counts.at(m);
  for (int c : counts) {
    EXPECT_GE(c / 1e4, 0.17);
    EXPECT_LE(c / 1e4, 0.23);
  }
}

TEST(Forecast, Determinism) {
  const Trained& t = trained();
  const Vec s0 = t.data.trajectories[0].states.row(0).transpose();
  RngStream r1(7, 1), r2(7, 1);
  const ForecastBundle a = forecast(t.ens, t.cvae, s0, t.data.trajectories[0].actions, 32, r1);
  const ForecastBundle b = forecast(t.ens, t.cvae, s0, t.data.trajectories[0].actions, 32, r2);
  EXPECT_EQ(a.member_indices, b.member_indices);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.forecasts[i], b.forecasts[i]);
}

TEST(Forecast, Errors) {
  const Trained& t = trained();
  RngStream rng(1, 1);
  EXPECT_THROW((void)forecast(t.ens, t.cvae, Vec::Zero(2), Mat::Zero(5, 2), 0, rng), ConfigError);
  DynamicsEnsemble other = t.ens;
  other.normalization.state_mean(0) += 1.0;
  EXPECT_THROW((void)forecast(other, t.cvae, Vec::Zero(2), Mat::Zero(5, 2), 3, rng), ConfigError);
}

TEST(Forecast, UncertaintyAtFirstStep) {
  const Trained& t = trained();
  RngStream rng(4, 4);
  const ForecastBundle b = forecast(t.ens, t.cvae, Eigen::Vector2d(0.2, 0.2), Mat::Zero(3, 2), 1000, rng);
  const DecompositionCurve c = decompose(b);
  for (Eigen::Index d = 0; d < 2; ++d) EXPECT_GT(c.total(0, d), 1e-8);
}

ForecastBundle manual_bundle(std::size_t members, const std::vector<std::size_t>& idx, const std::vector<Mat>& fs) {
  ForecastBundle b;
  b.model = "residual-vae";
  b.n_members = members;
  b.s0 = Vec::Zero(fs[0].cols());
  b.forecasts = fs;
  b.member_indices = idx;
  return b;
}

TEST(Decompose, IdenticalForecastsGiveZero) {
  const ForecastBundle b = manual_bundle(2, {0, 1, 0, 1}, std::vector<Mat>(4, Mat::Constant(3, 2, 0.7)));
  const DecompositionCurve c = decompose(b);
  EXPECT_EQ(c.total, Mat::Zero(3, 2));
  EXPECT_EQ(c.epistemic, Mat::Zero(3, 2));
  EXPECT_EQ(c.aleatoric, Mat::Zero(3, 2));
}

TEST(Decompose, MemberConstantsGivePureEpistemic) {
  const std::vector<double> k{1.0, 2.0, 6.0};
  std::vector<Mat> fs;
  std::vector<std::size_t> idx;
  for (std::size_t m = 0; m < 3; ++m) {
    for (int r = 0; r < 3; ++r) {
      fs.push_back(Mat::Constant(2, 1, k[m]));
      idx.push_back(m);
    }
  }
  const DecompositionCurve c = decompose(manual_bundle(3, idx, fs));
  // Population variance of {1, 2, 6}: mean 3, (4 + 1 + 9) / 3.
  EXPECT_NEAR(c.epistemic(1, 0), 14.0 / 3.0, 1e-12);
  EXPECT_EQ(c.aleatoric(1, 0), 0.0);
}

TEST(Decompose, MatchesTwoPassGroupedVariance) {
  RngStream rng(6, 6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t M = 2 + static_cast<std::size_t>(rng.index(3));
    std::vector<Mat> fs;
    std::vector<std::size_t> idx;
    for (std::size_t m = 0; m < M; ++m) {
      const int n = 2 + static_cast<int>(rng.index(5));
      for (int r = 0; r < n; ++r) {
        fs.push_back(testing::random_mat(4, 3, rng) + Mat::Constant(4, 3, static_cast<double>(m)));
        idx.push_back(m);
      }
    }
    const DecompositionCurve c = decompose(manual_bundle(M, idx, fs));
    const double N = static_cast<double>(fs.size());
    for (Eigen::Index t = 0; t < 4; ++t) {
      for (Eigen::Index d = 0; d < 3; ++d) {
        double grand = 0.0;
        for (const Mat& f : fs) grand += f(t, d);
        grand /= N;
        double total = 0.0, between = 0.0, within = 0.0;
        for (const Mat& f : fs) total += (f(t, d) - grand) * (f(t, d) - grand);
        for (std::size_t m = 0; m < M; ++m) {
          double mu = 0.0, n = 0.0;
          for (std::size_t i = 0; i < fs.size(); ++i) {
            if (idx[i] == m) {
              mu += fs[i](t, d);
              n += 1.0;
            }
          }
          mu /= n;
          double ss = 0.0;
          for (std::size_t i = 0; i < fs.size(); ++i) {
            if (idx[i] == m) ss += (fs[i](t, d) - mu) * (fs[i](t, d) - mu);
          }
          between += n * (mu - grand) * (mu - grand);
          within += ss;
        }
        EXPECT_NEAR(c.total(t, d), total / N, 1e-12);
        EXPECT_NEAR(c.epistemic(t, d), between / N, 1e-12);
        EXPECT_NEAR(c.aleatoric(t, d), within / N, 1e-12);
        EXPECT_NEAR(c.total(t, d), c.epistemic(t, d) + c.aleatoric(t, d), 1e-9);
      }
    }
  }
}

TEST(Decompose, MemberWithOneSampleIsInsufficient) {
  const ForecastBundle b = manual_bundle(2, {0, 0, 1}, std::vector<Mat>(3, Mat::Zero(2, 2)));
  EXPECT_THROW((void)decompose(b), InsufficientSamplesError);
  const ForecastBundle c = manual_bundle(3, {0, 0, 1, 1}, std::vector<Mat>(4, Mat::Zero(2, 2)));
  EXPECT_THROW((void)decompose(c), InsufficientSamplesError);
}

TEST(OutcomeProbability, Fractions) {
  const Mat hit = Mat::Constant(5, 2, 1.0), miss = Mat::Constant(5, 2, -1.0);
  const OutcomeSpec spec{Eigen::Vector2d(1.0, 1.0), 0.1, 5};
  EXPECT_EQ(outcome_probability(manual_bundle(1, {0, 0, 0, 0}, {hit, hit, hit, hit}), EnvKind::LinearToy, spec), 1.0);
  EXPECT_EQ(outcome_probability(manual_bundle(1, {0, 0, 0, 0}, {miss, miss, miss, miss}), EnvKind::LinearToy, spec), 0.0);
  EXPECT_EQ(outcome_probability(manual_bundle(1, {0, 0, 0, 0}, {hit, miss, hit, hit}), EnvKind::LinearToy, spec), 0.75);
}

TEST(OutcomeProbability, DeadlineBeyondHorizonThrows) {
  const ForecastBundle b = manual_bundle(1, {0}, {Mat::Zero(5, 2)});
  EXPECT_THROW((void)outcome_probability(b, EnvKind::LinearToy, {Eigen::Vector2d(0.0, 0.0), 0.1, 6}), RangeError);
}

}  // namespace
}  // namespace trajcast
