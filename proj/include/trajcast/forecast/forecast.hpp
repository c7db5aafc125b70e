// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <string>
#include <vector>

#include "trajcast/core/error.hpp"
#include "trajcast/core/rng.hpp"
#include "trajcast/env/dataset_io.hpp"
#include "trajcast/env/environments.hpp"
#include "trajcast/env/types.hpp"
#include "trajcast/models/baselines.hpp"
#include "trajcast/models/dynamics_ensemble.hpp"
#include "trajcast/models/sequence_vae.hpp"

namespace trajcast {

/// N forecast trajectories from one initial state.
struct ForecastBundle {
  std::string model;                 // residual-vae, full-vae or prob-mlp
  std::size_t n_members = 1;         // M for the residual model, 1 otherwise
  Vec s0;
  std::vector<Mat> forecasts;        // N x (T x D_s), ŝ_pred,1..T
  std::vector<std::size_t> member_indices;
  std::vector<ResidualSample> residual_samples;  // residual model only
  std::vector<Mat> actions;          // N x (T x D_a), actions each sample was rolled out under
  Json provenance = Json::object();

  [[nodiscard]] std::size_t size() const { return forecasts.size(); }
  [[nodiscard]] Eigen::Index horizon() const { return forecasts.empty() ? 0 : forecasts[0].rows(); }
  [[nodiscard]] Eigen::Index state_dim() const { return s0.size(); }

  /// Sample `i` with s0 prepended, (T+1) x D_s.
  [[nodiscard]] Mat full_states(std::size_t i) const {
    Mat m(horizon() + 1, state_dim());
    m.row(0) = s0.transpose();
    m.bottomRows(horizon()) = forecasts.at(i);
    return m;
  }

  void validate() const {
    if (forecasts.empty()) throw DimensionError("forecast bundle is empty");
    if (member_indices.size() != forecasts.size()) throw DimensionError("forecast bundle: member index count differs");
    for (std::size_t i = 0; i < forecasts.size(); ++i) {
      if (forecasts[i].rows() != horizon() || forecasts[i].cols() != state_dim()) {
        throw DimensionError("forecast bundle: forecasts differ in shape");
      }
      if (member_indices[i] >= n_members) throw RangeError("forecast bundle: member index out of range");
    }
  }
};

namespace detail {

inline std::vector<RngStream> sample_streams(RngStream& rng, std::size_t n) {
  std::vector<RngStream> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(rng.split(rng()));
  return out;
}

inline Json action_provenance(const ActionSource& src) {
  if (src.mode == ActionSource::Mode::Fixed) return {{"mode", "fixed"}, {"horizon", src.horizon}};
  return {{"mode", "policy"}, {"policy", to_string(src.policy.kind)}, {"horizon", src.horizon},
          {"target", io::to_json(src.target)}};
}

inline void check_source(const ActionSource& src) {
  if (src.horizon < 1) throw ConfigError("forecast horizon must be >= 1");
  if (src.mode == ActionSource::Mode::Fixed && src.actions.rows() != src.horizon) {
    throw DimensionError("forecast: action rows differ from horizon");
  }
}

}  // namespace detail

/// Residual-model forecast: each sample draws a member uniformly, rolls it out
/// closed-loop and adds a residual sequence sampled for that rollout.
inline ForecastBundle forecast(const DynamicsEnsemble& ens, const ResidualCVAE& cvae, const Vec& s0,
                               const ActionSource& src, std::size_t N, RngStream& rng) {
  if (N < 1) throw ConfigError("forecast: N must be >= 1");
  if (cvae.kind != VaeKind::Residual) throw ConfigError("forecast: model is not a residual CVAE");
  if (!(ens.normalization == cvae.normalization)) throw ConfigError("forecast: ensemble and CVAE normalizations differ");
  detail::check_source(src);
  ForecastBundle b;
  b.model = "residual-vae";
  b.n_members = ens.size();
  b.s0 = s0;
  b.member_indices = sample_member_indices(rng, ens.size(), N);
  auto streams = detail::sample_streams(rng, N);
  b.forecasts.resize(N);
  b.actions.resize(N);
  b.residual_samples.resize(N);
  for (std::size_t m = 0; m < ens.size(); ++m) {
    std::vector<std::size_t> idx;
    std::vector<RngStream> group;
    for (std::size_t i = 0; i < N; ++i) {
      if (b.member_indices[i] == m) {
        idx.push_back(i);
        group.push_back(streams[i]);
      }
    }
    if (idx.empty()) continue;
    const VaeSampleSet set = run_sequence_vae(cvae, &ens, m, s0, src, group);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const std::size_t i = idx[k];
      b.forecasts[i] = set.states[k];
      b.actions[i] = set.actions[k];
      b.residual_samples[i] = {set.states[k] - set.guides[k], set.guides[k], s0, set.actions[k], m};
    }
  }
  b.provenance = {{"model", b.model},
                  {"ensemble_seed", ens.train_meta.value("seed", Json())},
                  {"cvae_seed", cvae.train_meta.value("seed", Json())},
                  {"rng_master_seed", rng.master_seed()},
                  {"s0", io::to_json(s0)},
                  {"actions", detail::action_provenance(src)}};
  b.validate();
  return b;
}

inline ForecastBundle forecast(const DynamicsEnsemble& ens, const ResidualCVAE& cvae, const Vec& s0,
                               const Mat& actions, std::size_t N, RngStream& rng) {
  return forecast(ens, cvae, s0, ActionSource::fixed(actions), N, rng);
}

/// Full-VAE baseline: N closed-loop decoder rollouts with z drawn from the prior.
inline ForecastBundle forecast_full_vae(const FullVAE& vae, const Vec& s0, const ActionSource& src, std::size_t N,
                                        RngStream& rng) {
  if (N < 1) throw ConfigError("forecast: N must be >= 1");
  if (vae.kind != VaeKind::Full) throw ConfigError("forecast_full_vae: model is not a full VAE");
  detail::check_source(src);
  auto streams = detail::sample_streams(rng, N);
  const VaeSampleSet set = run_sequence_vae(vae, nullptr, 0, s0, src, streams);
  ForecastBundle b;
  b.model = "full-vae";
  b.s0 = s0;
  b.forecasts = set.states;
  b.actions = set.actions;
  b.member_indices.assign(N, 0);
  b.provenance = {{"model", b.model},
                  {"vae_seed", vae.train_meta.value("seed", Json())},
                  {"rng_master_seed", rng.master_seed()},
                  {"s0", io::to_json(s0)},
                  {"actions", detail::action_provenance(src)}};
  b.validate();
  return b;
}

/// Probabilistic-MLP baseline: N autoregressive Gaussian rollouts.
inline ForecastBundle forecast_prob_mlp(const ProbMLP& mlp, const Vec& s0, const ActionSource& src, std::size_t N,
                                        RngStream& rng) {
  if (N < 1) throw ConfigError("forecast: N must be >= 1");
  detail::check_source(src);
  auto streams = detail::sample_streams(rng, N);
  const VaeSampleSet set = run_prob_mlp(mlp, s0, src, streams);
  ForecastBundle b;
  b.model = "prob-mlp";
  b.s0 = s0;
  b.forecasts = set.states;
  b.actions = set.actions;
  b.member_indices.assign(N, 0);
  b.provenance = {{"model", b.model},
                  {"mlp_seed", mlp.train_meta.value("seed", Json())},
                  {"rng_master_seed", rng.master_seed()},
                  {"s0", io::to_json(s0)},
                  {"actions", detail::action_provenance(src)}};
  b.validate();
  return b;
}

// ---- decomposition -------------------------------------------------------------

/// Per (t, d) variance split; rows are t = 1..T, columns state dimensions.
struct DecompositionCurve {
  Mat total;
  Mat epistemic;
  Mat aleatoric;
};

/// Grouped-variance split of the bundle's samples by member:
///   epistemic = Σ_m w_m (μ_m − μ)²,  aleatoric = Σ_m w_m v_m,  w_m = n_m / N,
/// with v_m the within-member population variance, so total (the population
/// variance of all samples) equals their sum.
inline DecompositionCurve decompose(const ForecastBundle& b) {
  b.validate();
  const Eigen::Index T = b.horizon(), D = b.state_dim();
  const double N = static_cast<double>(b.size());
  std::vector<std::size_t> counts(b.n_members, 0);
  for (auto m : b.member_indices) ++counts[m];
  for (std::size_t m = 0; m < b.n_members; ++m) {
    if (counts[m] < 2) {
      throw InsufficientSamplesError("decompose: member " + std::to_string(m) + " has " + std::to_string(counts[m]) +
                                     " samples, need at least 2");
    }
  }
  Mat mean = Mat::Zero(T, D);
  std::vector<Mat> mmean(b.n_members, Mat::Zero(T, D));
  for (std::size_t i = 0; i < b.size(); ++i) {
    mean += b.forecasts[i];
    mmean[b.member_indices[i]] += b.forecasts[i];
  }
  mean /= N;
  for (std::size_t m = 0; m < b.n_members; ++m) mmean[m] /= static_cast<double>(counts[m]);

  DecompositionCurve c{Mat::Zero(T, D), Mat::Zero(T, D), Mat::Zero(T, D)};
  for (std::size_t i = 0; i < b.size(); ++i) {
    c.total += (b.forecasts[i] - mean).array().square().matrix();
    c.aleatoric += (b.forecasts[i] - mmean[b.member_indices[i]]).array().square().matrix();
  }
  c.total /= N;
  c.aleatoric /= N;
  for (std::size_t m = 0; m < b.n_members; ++m) {
    c.epistemic += (static_cast<double>(counts[m]) / N) * (mmean[m] - mean).array().square().matrix();
  }
  return c;
}

/// Fraction of the bundle's forecasts that satisfy the outcome.
inline double outcome_probability(const ForecastBundle& b, EnvKind env, const OutcomeSpec& spec) {
  b.validate();
  spec.validate(static_cast<int>(b.horizon()));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < b.size(); ++i) hits += label_outcome(env, b.full_states(i), spec) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(b.size());
}

// ---- exports -------------------------------------------------------------------

/// Header line, then one record per sample mirroring the trajectory format
/// plus member_index. `limit` caps the number of records (0 = all); `extra`
/// is merged into the header.
inline void write_bundle(const std::string& path, const ForecastBundle& b, std::size_t limit = 0,
                         const Json& extra = Json::object()) {
  b.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  const std::size_t n = limit == 0 ? b.size() : std::min(limit, b.size());
  Json header = {{"model", b.model}, {"N", b.size()}, {"records", n}, {"horizon", b.horizon()},
                 {"D_s", b.state_dim()}, {"n_members", b.n_members}, {"provenance", b.provenance}};
  header.update(extra);
  out << header.dump() << '\n';
  for (std::size_t i = 0; i < n; ++i) {
    Json rec = {{"states", io::to_json(b.full_states(i))}, {"member_index", b.member_indices[i]}};
    if (i < b.actions.size()) rec["actions"] = io::to_json(b.actions[i]);
    out << rec.dump() << '\n';
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

/// Columns t, dim, total, epistemic, aleatoric; t counts from 1. A non-empty
/// `comment` is written first as a "# " line.
inline void write_decomposition(const std::string& path, const DecompositionCurve& c, const std::string& comment = "") {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  if (!comment.empty()) out << "# " << comment << '\n';
  out << "t,dim,total,epistemic,aleatoric\n" << std::setprecision(17);
  for (Eigen::Index t = 0; t < c.total.rows(); ++t) {
    for (Eigen::Index d = 0; d < c.total.cols(); ++d) {
      out << t + 1 << ',' << d << ',' << c.total(t, d) << ',' << c.epistemic(t, d) << ',' << c.aleatoric(t, d) << '\n';
    }
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace trajcast
