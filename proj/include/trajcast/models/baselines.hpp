// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <tuple>
#include <vector>

#include "trajcast/core/autodiff.hpp"
#include "trajcast/core/error.hpp"
#include "trajcast/core/layers.hpp"
#include "trajcast/core/optim.hpp"
#include "trajcast/core/params.hpp"
#include "trajcast/core/rng.hpp"
#include "trajcast/env/environments.hpp"
#include "trajcast/env/types.hpp"
#include "trajcast/models/dynamics_ensemble.hpp"
#include "trajcast/models/sequence_vae.hpp"

namespace trajcast {

/// Feed-forward Gaussian one-step model on x = [s_t, a_t] (normalized):
/// mean and log-variance of the normalized delta.
struct ProbMlpArch {
  Eigen::Index state_dim = 0;
  Eigen::Index action_dim = 0;
  std::vector<Eigen::Index> widths{64, 64};

  [[nodiscard]] Json to_json() const {
    return {{"state_dim", state_dim}, {"action_dim", action_dim}, {"widths", widths}};
  }
  static ProbMlpArch from_json(const Json& j) {
    return {j.at("state_dim").get<Eigen::Index>(), j.at("action_dim").get<Eigen::Index>(),
            j.at("widths").get<std::vector<Eigen::Index>>()};
  }
  friend bool operator==(const ProbMlpArch&, const ProbMlpArch&) = default;
};

struct ProbMlpNet {
  ParamLayout layout;
  nn::TanhStack body;
  nn::SkipHead mean;
  nn::Dense logvar;

  explicit ProbMlpNet(const ProbMlpArch& a) {
    if (a.widths.empty()) throw ConfigError("prob-mlp needs at least one hidden layer");
    const Eigen::Index in = a.state_dim + a.action_dim;
    body = nn::TanhStack::add_to(layout, "body", in, a.widths);
    mean = nn::SkipHead::add_to(layout, "mean", a.widths.back(), in, a.state_dim);
    logvar = nn::Dense::add_to(layout, "logvar", a.widths.back(), a.state_dim);
  }

  /// (mean, clamped logvar) of the normalized delta.
  template <class W, class T>
  std::pair<T, T> operator()(const W& w, const T& x) const {
    const T h = body(w, x);
    return {mean(w, h, x), ad::clamp(logvar(w, h), nn::kLogVarMin, nn::kLogVarMax)};
  }
};

struct ProbMlpTrainConfig {
  std::vector<Eigen::Index> widths{64, 64};
  int epochs = 40;
  int batch_size = 256;
  long min_steps = 2000;
  double validation_fraction = 0.2;
  AdamConfig adam;

  void validate() const {
    if (widths.empty()) throw ConfigError("prob-mlp widths must be non-empty");
    for (auto w : widths) {
      if (w < 1) throw ConfigError("prob-mlp widths must be >= 1");
    }
    if (epochs < 1 || batch_size < 1 || min_steps < 0) throw ConfigError("prob-mlp epochs/batch_size/min_steps invalid");
    if (validation_fraction < 0.0 || validation_fraction >= 1.0) {
      throw ConfigError("prob-mlp validation_fraction must be in [0, 1)");
    }
  }
};

struct ProbMLP {
  ProbMlpArch arch;
  ParamVector params;
  Normalization normalization;
  Json train_meta = Json::object();

  void validate() const {
    const ProbMlpNet net(arch);
    if (!(params.layout() == net.layout)) throw DimensionError("prob-mlp parameters do not match architecture");
    if (std::string bad = params.first_nonfinite_segment(); !bad.empty()) {
      throw NumericError("prob-mlp has non-finite values in '" + bad + "'");
    }
  }

  /// Predictive Gaussian over the raw next-state delta for one (s, a).
  [[nodiscard]] nn::GaussianHead head(const Vec& s, const Vec& a) const {
    const ProbMlpNet net(arch);
    Mat x(1, arch.state_dim + arch.action_dim);
    x << normalization.normalize_states(s.transpose()), normalization.normalize_actions(a.transpose());
    const auto [mu, lv] = net(EvalWeights(params), x);
    const RowVec sc = normalization.delta_scale;
    nn::GaussianHead h;
    h.mean = (mu.array() * sc.array()).transpose();
    h.logvar = (lv.array() + 2.0 * sc.array().log()).transpose();
    return h;
  }
};

/// Mean over batch rows and dimensions of 0.5 (logvar + (y − mean)² e^{−logvar}).
inline ad::Var gaussian_nll(const ad::Var& mean, const ad::Var& logvar, const ad::Var& target) {
  const ad::Var se = ad::square(ad::sub(target, mean));
  const ad::Var terms = ad::add(logvar, ad::mul(se, ad::exp(ad::scale(logvar, -1.0))));
  return ad::scale(ad::sum(terms), 0.5 / static_cast<double>(mean.value().size()));
}

namespace detail {

/// All transitions of the selected trajectories as normalized (x, delta) rows.
inline std::pair<Mat, Mat> stack_transitions(const std::vector<SequenceData>& seqs,
                                             const std::vector<std::size_t>& idx) {
  Eigen::Index rows = 0;
  for (auto i : idx) rows += seqs[i].actions.rows();
  const Eigen::Index ds = seqs.front().states.cols(), da = seqs.front().actions.cols();
  Mat x(rows, ds + da), y(rows, ds);
  Eigen::Index r = 0;
  for (auto i : idx) {
    const auto& s = seqs[i];
    const Eigen::Index T = s.actions.rows();
    x.block(r, 0, T, ds) = s.states.topRows(T);
    x.block(r, ds, T, da) = s.actions;
    y.middleRows(r, T) = s.deltas;
    r += T;
  }
  return {x, y};
}

}  // namespace detail

/// Minimizes the Gaussian negative log-likelihood of teacher-forced one-step
/// normalized deltas.
inline ProbMLP train_prob_mlp(const TrajectoryDataset& data, const ProbMlpTrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  data.validate();
  ProbMLP model;
  model.arch = {data.state_dim(), data.action_dim(), cfg.widths};
  model.normalization = data.normalization;
  const ProbMlpNet net(model.arch);
  const auto seqs = detail::prepare_sequences(data);

  const RngStream root(seed, 0x70726f626d6c70ULL);  // "probmlp"
  RngStream init_rng = root.split(0), shuffle_rng = root.split(1), split_rng = root.split(2);
  model.params = ParamVector(net.layout);
  init_uniform_fan_in(model.params, init_rng);

  std::vector<std::size_t> train_idx, val_idx;
  {
    const auto order = detail::shuffled_indices(seqs.size(), split_rng);
    std::size_t n_val = 0;
    if (cfg.validation_fraction > 0.0 && seqs.size() >= 2) {
      n_val = std::clamp<std::size_t>(
          static_cast<std::size_t>(std::floor(cfg.validation_fraction * static_cast<double>(seqs.size()))), 1,
          seqs.size() - 1);
    }
    val_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    train_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  }
  const auto [X, Y] = detail::stack_transitions(seqs, train_idx);
  Mat Xv, Yv;
  if (!val_idx.empty()) std::tie(Xv, Yv) = detail::stack_transitions(seqs, val_idx);

  const auto n = static_cast<std::size_t>(X.rows());
  const int epochs = effective_epochs(cfg.epochs, cfg.min_steps, n, cfg.batch_size);
  AdamState opt = AdamState::zeros(model.params.size());
  ParamVector best = model.params;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = epochs - 1;
  Json epoch_losses = Json::array();
  for (int e = 0; e < epochs; ++e) {
    AdamConfig step_cfg = cfg.adam;
    step_cfg.lr = scheduled_lr(cfg.adam, e, epochs);
    const auto perm = detail::shuffled_indices(n, shuffle_rng);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      const auto B = static_cast<Eigen::Index>(stop - start);
      Mat xb(B, X.cols()), yb(B, Y.cols());
      for (Eigen::Index b = 0; b < B; ++b) {
        const auto r = static_cast<Eigen::Index>(perm[start + static_cast<std::size_t>(b)]);
        xb.row(b) = X.row(r);
        yb.row(b) = Y.row(r);
      }
      std::pair<double, Eigen::VectorXd> vg;
      try {
        vg = value_and_grad(
            [&](ad::Tape& tape, const TapeWeights& w) {
              const auto [mu, lv] = net(w, tape.constant(xb));
              return gaussian_nll(mu, lv, tape.constant(yb));
            },
            model.params);
      } catch (const NumericError& err) {
        throw TrainingError(std::string("prob-mlp diverged: ") + err.what());
      }
      clip_gradient_norm(vg.second, cfg.adam.clip_norm);
      adam_step(model.params, vg.second, opt, step_cfg);
      sum += vg.first;
      ++batches;
    }
    epoch_losses.push_back(sum / static_cast<double>(batches));
    if (!val_idx.empty()) {
      ad::Tape tape;
      const TapeWeights w(tape, model.params);
      const auto [mu, lv] = net(w, tape.constant(Xv));
      const double v = gaussian_nll(mu, lv, tape.constant(Yv)).value()(0, 0);
      if (v < best_val) {
        best_val = v;
        best = model.params;
        best_epoch = e;
      }
    }
  }
  if (!val_idx.empty()) model.params = std::move(best);
  model.train_meta = {{"seed", seed},
                      {"epochs", epochs},
                      {"batch_size", cfg.batch_size},
                      {"epoch_losses", epoch_losses},
                      {"best_epoch", best_epoch},
                      {"n_train", train_idx.size()},
                      {"n_validation", val_idx.size()},
                      {"dataset_seed", data.generation_seed}};
  model.validate();
  return model;
}

/// Autoregressive sampling for `rngs.size()` samples; each sample draws its
/// noise (and policy dither) from its own stream.
inline VaeSampleSet run_prob_mlp(const ProbMLP& model, const Vec& s0, const ActionSource& src,
                                 std::vector<RngStream>& rngs) {
  const Eigen::Index D = model.arch.state_dim, A = model.arch.action_dim;
  if (s0.size() != D) throw DimensionError("prob-mlp rollout: s0 has wrong dimension");
  if (src.mode == ActionSource::Mode::Fixed && src.actions.cols() != A) {
    throw DimensionError("prob-mlp rollout: actions have wrong dimension");
  }
  const auto B = static_cast<Eigen::Index>(rngs.size());
  const int T = src.horizon;
  const ProbMlpNet net(model.arch);
  const EvalWeights w(model.params);
  const Normalization& nz = model.normalization;
  VaeSampleSet out;
  out.states.assign(rngs.size(), Mat(T, D));
  out.guides.assign(rngs.size(), Mat(T, D));
  out.actions.assign(rngs.size(), Mat(T, A));
  Mat S = s0.transpose().replicate(B, 1), act(B, A), eps(B, D), x(B, D + A);
  for (int t = 0; t < T; ++t) {
    for (Eigen::Index b = 0; b < B; ++b) {
      auto& r = rngs[static_cast<std::size_t>(b)];
      act.row(b) = src.action(t, S.row(b), r).transpose();
      for (Eigen::Index d = 0; d < D; ++d) eps(b, d) = r.normal();
    }
    x << nz.normalize_states(S), nz.normalize_actions(act);
    const auto [mu, lv] = net(w, x);
    const Mat delta = mu.array() + (0.5 * lv.array()).exp() * eps.array();
    const Mat prev = S;
    S += (delta.array().rowwise() * nz.delta_scale.array()).matrix();
    if (!S.allFinite()) throw NumericError("prob-mlp rollout produced a non-finite state");
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto k = static_cast<std::size_t>(b);
      out.states[k].row(t) = S.row(b);
      out.guides[k].row(t) = prev.row(b);
      out.actions[k].row(t) = act.row(b);
    }
  }
  return out;
}

/// One sampled trajectory ŝ_1..T under fixed actions. Consumes one draw from
/// `rng` to key the sample's own stream.
inline Mat prob_mlp_rollout(const ProbMLP& model, const Vec& s0, const Mat& actions, RngStream& rng) {
  std::vector<RngStream> rngs{rng.split(rng())};
  return run_prob_mlp(model, s0, ActionSource::fixed(actions), rngs).states[0];
}

}  // namespace trajcast
