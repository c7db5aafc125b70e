// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "gradient_suite.hpp"
#include "helpers.hpp"
#include "trajcast/core/autodiff.hpp"
#include "trajcast/core/hash.hpp"
#include "trajcast/core/layers.hpp"
#include "trajcast/core/optim.hpp"
#include "trajcast/core/params.hpp"
#include "trajcast/core/rng.hpp"

namespace trajcast {
namespace {

using testing::max_relative_error;
using testing::numeric_gradient;
using testing::random_params;

nn::GaussianHead head1(double mean, double logvar) {
  return {Eigen::VectorXd::Constant(1, mean), Eigen::VectorXd::Constant(1, logvar)};
}

TEST(Reparameterize, ZeroNoiseReturnsMean) {
  EXPECT_EQ(nn::reparameterize(head1(2.0, 0.0), Eigen::VectorXd::Constant(1, 0.0))[0], 2.0);
}

TEST(Reparameterize, UnitVarianceShift) {
  EXPECT_EQ(nn::reparameterize(head1(0.0, 0.0), Eigen::VectorXd::Constant(1, 1.0))[0], 1.0);
}

TEST(Reparameterize, ScaledNoise) {
  const double v = nn::reparameterize(head1(1.0, 2.0 * std::log(3.0)), Eigen::VectorXd::Constant(1, -2.0))[0];
  EXPECT_NEAR(v, -5.0, 1e-12);
}

TEST(Reparameterize, LengthMismatchIsDimensionError) {
  EXPECT_THROW((void)nn::reparameterize(head1(0.0, 0.0), Eigen::VectorXd::Zero(2)), DimensionError);
}

TEST(Reparameterize, SampleMomentsMatchHead) {
  const double mean = 0.7, logvar = -0.4;
  RngStream rng(5, 1);
  const int n = 100000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = nn::reparameterize(head1(mean, logvar), Eigen::VectorXd::Constant(1, rng.normal()))[0];
    s += x;
    s2 += x * x;
  }
  const double m = s / n, var = (s2 - n * m * m) / (n - 1);
  const double se = std::sqrt(std::exp(logvar) / n);
  EXPECT_LT(std::abs(m - mean), 3.0 * se);
  EXPECT_LT(std::abs(var / std::exp(logvar) - 1.0), 0.05);
}

TEST(KlToStandardNormal, PosteriorEqualsPrior) { EXPECT_EQ(nn::kl_to_standard_normal(head1(0.0, 0.0)), 0.0); }

TEST(KlToStandardNormal, MeanShift) { EXPECT_NEAR(nn::kl_to_standard_normal(head1(1.0, 0.0)), 0.5, 1e-15); }

TEST(KlToStandardNormal, LogVarOne) {
  EXPECT_NEAR(nn::kl_to_standard_normal(head1(0.0, 1.0)), 0.5 * (std::exp(1.0) - 2.0), 1e-15);
  EXPECT_NEAR(nn::kl_to_standard_normal(head1(0.0, 1.0)), 0.3591, 5e-5);
}

TEST(KlToStandardNormal, NonNegativeOnRandomHeads) {
  RngStream rng(9, 2);
  for (int i = 0; i < 10000; ++i) {
    nn::GaussianHead h{Eigen::VectorXd(3), Eigen::VectorXd(3)};
    for (int d = 0; d < 3; ++d) {
      h.mean[d] = rng.uniform(-5.0, 5.0);
      h.logvar[d] = rng.uniform(-6.0, 4.0);
    }
    ASSERT_GE(nn::kl_to_standard_normal(h), 0.0);
  }
}

TEST(GaussianHead, ClampedBoundsLogVar) {
  const nn::GaussianHead h{Eigen::Vector2d(0.0, 0.0), Eigen::Vector2d(-50.0, 50.0)};
  const auto c = h.clamped();
  EXPECT_EQ(c.logvar[0], nn::kLogVarMin);
  EXPECT_EQ(c.logvar[1], nn::kLogVarMax);
}

TEST(Grad, SquareAtThree) {
  ParamLayout layout;
  layout.add("x", 1, 1);
  ParamVector p(layout);
  p.values()[0] = 3.0;
  const auto fn = [](ad::Tape&, const TapeWeights& w) { return ad::sum(ad::square(w(0))); };
  const Eigen::VectorXd g = grad(fn, p);
  ASSERT_EQ(g.size(), 1);
  EXPECT_EQ(g[0], 6.0);
  const Eigen::VectorXd fd = numeric_gradient([&](const ParamVector& q) { return q.values()[0] * q.values()[0]; }, p);
  EXPECT_NEAR(g[0], fd[0], 1e-8);
}

TEST(Grad, DenseLayerSquaredLoss) {
  ParamLayout layout;
  const nn::Dense dense = nn::Dense::add_to(layout, "fc", 4, 3);
  const ParamVector p = random_params(layout, 3);
  RngStream rng(3, 4);
  const Mat x = testing::random_mat(5, 4, rng), y = testing::random_mat(5, 3, rng);
  const auto loss = [&](ad::Tape& t, const TapeWeights& w) {
    return ad::sum(ad::square(ad::sub(dense(w, t.constant(x)), t.constant(y))));
  };
  const Eigen::VectorXd g = grad(loss, p);
  const Eigen::VectorXd fd = numeric_gradient(
      [&](const ParamVector& q) { return (dense(EvalWeights(q), x) - y).squaredNorm(); }, p);
  EXPECT_LT(max_relative_error(g, fd, 1e-8), 1e-6);
}

TEST(Grad, GruUnrolledFiveSteps) {
  for (std::uint64_t seed : {1, 2, 3}) {
    ParamLayout layout;
    const nn::GruCell cell = nn::GruCell::add_to(layout, "gru", 3, 4);
    const ParamVector p = random_params(layout, seed);
    RngStream rng(seed, 5);
    std::vector<Mat> xs;
    for (int t = 0; t < 5; ++t) xs.push_back(testing::random_mat(2, 3, rng));
    const Mat y = testing::random_mat(2, 4, rng);
    const auto loss = [&](ad::Tape& t, const TapeWeights& w) {
      ad::Var h = t.constant(Mat::Zero(2, 4));
      for (const Mat& x : xs) h = cell.step(w, t.constant(x), h);
      return ad::sum(ad::square(ad::sub(h, t.constant(y))));
    };
    const Eigen::VectorXd g = grad(loss, p);
    const Eigen::VectorXd fd = numeric_gradient(
        [&](const ParamVector& q) {
          const EvalWeights w(q);
          Mat h = Mat::Zero(2, 4);
          for (const Mat& x : xs) h = cell.step(w, x, h);
          return (h - y).squaredNorm();
        },
        p);
    EXPECT_LT(max_relative_error(g, fd, testing::kGradientFloor), 1e-4) << "seed " << seed;
  }
}

TEST(Grad, NonFiniteObjectiveIsNumericError) {
  ParamLayout layout;
  layout.add("x", 1, 1);
  ParamVector p(layout);
  p.values()[0] = 1000.0;
  const auto fn = [](ad::Tape&, const TapeWeights& w) { return ad::sum(ad::exp(w(0))); };
  EXPECT_THROW((void)grad(fn, p), NumericError);
}

// Every network the models deploy, three seeds each.
TEST(GradientSuite, AllArchitecturesMatchFiniteDifferences) {
  for (const auto& c : testing::run_gradient_suite()) {
    EXPECT_LT(c.max_rel_error, 1e-4) << c.network << " seed " << c.seed;
  }
}

ParamVector scalar_params(double v) {
  ParamLayout layout;
  layout.add("w", 1, 1);
  ParamVector p(layout);
  p.values()[0] = v;
  return p;
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  ParamVector p = random_params([] {
    ParamLayout l;
    l.add("a", 2, 3);
    l.add("b", 1, 3);
    return l;
  }(), 4);
  const ParamVector before = p;
  AdamState s = AdamState::zeros(p.size());
  adam_step(p, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.size())), s, AdamConfig{});
  EXPECT_TRUE(p == before);
}

TEST(Adam, FirstStepHandEvaluation) {
  ParamVector p = scalar_params(0.0);
  AdamState s = AdamState::zeros(1);
  AdamConfig cfg;
  cfg.lr = 0.001;
  adam_step(p, Eigen::VectorXd::Constant(1, 1.0), s, cfg);
  EXPECT_NEAR(p.values()[0], -0.001 / (1.0 + 1e-8), 1e-18);
  EXPECT_NEAR(p.values()[0], -9.99999990e-4, 1e-12);
}

TEST(Adam, Deterministic) {
  ParamVector a = scalar_params(0.3), b = a;
  AdamState sa = AdamState::zeros(1), sb = sa;
  for (int i = 0; i < 3; ++i) {
    const Eigen::VectorXd g = Eigen::VectorXd::Constant(1, 0.1 * (i + 1));
    adam_step(a, g, sa, AdamConfig{});
    adam_step(b, g, sb, AdamConfig{});
  }
  EXPECT_TRUE(a == b);
  EXPECT_EQ(sa.m, sb.m);
  EXPECT_EQ(sa.v, sb.v);
}

TEST(Adam, NonFiniteGradientNamesSegment) {
  ParamLayout layout;
  layout.add("first", 1, 2);
  layout.add("second", 1, 2);
  ParamVector p(layout);
  AdamState s = AdamState::zeros(p.size());
  Eigen::VectorXd g = Eigen::VectorXd::Zero(4);
  g[3] = std::numeric_limits<double>::quiet_NaN();
  try {
    adam_step(p, g, s, AdamConfig{});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("second"), std::string::npos);
  }
}

TEST(Adam, LengthMismatchIsDimensionError) {
  ParamVector p = scalar_params(0.0);
  AdamState s = AdamState::zeros(1);
  EXPECT_THROW(adam_step(p, Eigen::VectorXd::Zero(2), s, AdamConfig{}), DimensionError);
}

TEST(Optim, EffectiveEpochsReachesMinSteps) {
  EXPECT_EQ(effective_epochs(10, 0, 100, 10), 10);
  EXPECT_EQ(effective_epochs(10, 500, 100, 10), 50);
  EXPECT_EQ(effective_epochs(10, 501, 100, 10), 51);
}

TEST(Optim, CosineScheduleEndpoints) {
  AdamConfig c;
  c.lr = 0.01;
  c.final_lr_fraction = 0.1;
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 0, 11), 0.01);
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 10, 11), 0.001);
  EXPECT_NEAR(scheduled_lr(c, 5, 11), 0.0055, 1e-15);
}

TEST(RngStream, SameKeySameSequence) {
  RngStream a(42, 7), b(42, 7);
  for (int i = 0; i < 100; ++i) ASSERT_EQ(a(), b());
}

TEST(RngStream, DrawDependsOnlyOnKeyAndCounter) {
  RngStream a(42, 7);
  RngStream other(1, 1);
  for (int i = 0; i < 10; ++i) (void)other();
  RngStream b(42, 7);
  EXPECT_EQ(a.normal(), b.normal());
}

TEST(RngStream, SplitStreamsDiffer) {
  const RngStream root(3, 0);
  RngStream a = root.split(0), b = root.split(1);
  EXPECT_NE(a(), b());
  EXPECT_EQ(root.split(5), root.split(5));
}

TEST(RngStream, UniformAndIndexRanges) {
  RngStream r(1, 1);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(r.index(7), 7u);
  }
}

TEST(ParamLayout, SegmentsTileTheVector) {
  ParamLayout l;
  l.add("a", 2, 3);
  l.add("b", 1, 3);
  EXPECT_EQ(l.size(), 9u);
  EXPECT_TRUE(l.is_tiling());
  EXPECT_EQ(l.find("b"), 1u);
  ParamVector p(l);
  p.matrix(1)(0, 2) = 5.0;
  EXPECT_EQ(p.values()[8], 5.0);
}

TEST(ParamVector, ValueLengthMustMatchLayout) {
  ParamLayout l;
  l.add("a", 2, 2);
  EXPECT_THROW(ParamVector(l, Eigen::VectorXd::Zero(3)), DimensionError);
}

TEST(Hash, Fnv1aKnownValues) {
  // Reference values of 64-bit FNV-1a.
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
}

}  // namespace
}  // namespace trajcast
