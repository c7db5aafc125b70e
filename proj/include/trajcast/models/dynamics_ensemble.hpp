// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <type_traits>
#include <string>
#include <vector>

#include "trajcast/core/autodiff.hpp"
#include "trajcast/core/error.hpp"
#include "trajcast/core/layers.hpp"
#include "trajcast/core/optim.hpp"
#include "trajcast/core/params.hpp"
#include "trajcast/core/rng.hpp"
#include "trajcast/env/types.hpp"

namespace trajcast {

using Json = nlohmann::json;

/// Recurrent one-step model: x_t = [s_t, a_t] (normalized), h_{t+1} = GRU(x_t, h_t),
/// normalized delta = SkipHead(h_{t+1}, x_t).
struct MemberArch {
  Eigen::Index state_dim = 0;
  Eigen::Index action_dim = 0;
  Eigen::Index hidden = 32;

  [[nodiscard]] Json to_json() const { return {{"state_dim", state_dim}, {"action_dim", action_dim}, {"hidden", hidden}}; }
  static MemberArch from_json(const Json& j) {
    return {j.at("state_dim").get<Eigen::Index>(), j.at("action_dim").get<Eigen::Index>(),
            j.at("hidden").get<Eigen::Index>()};
  }
  friend bool operator==(const MemberArch&, const MemberArch&) = default;
};

struct MemberNet {
  ParamLayout layout;
  nn::GruCell cell;
  nn::SkipHead head;

  explicit MemberNet(const MemberArch& a) {
    const Eigen::Index in = a.state_dim + a.action_dim;
    cell = nn::GruCell::add_to(layout, "gru", in, a.hidden);
    head = nn::SkipHead::add_to(layout, "head", a.hidden, in, a.state_dim);
  }

  /// Advances `h` in place and returns the normalized delta.
  template <class W, class T>
  T step(const W& w, const T& x, T& h) const {
    h = cell.step(w, x, h);
    return head(w, h, x);
  }
};

struct EnsembleTrainConfig {
  int members = 5;
  Eigen::Index hidden = 32;
  int epochs = 40;
  int batch_size = 16;
  /// Lower bound on gradient steps; small datasets get more epochs.
  long min_steps = 1000;
  /// Fraction of trajectories held out; each member keeps the parameters of
  /// its best held-out epoch. 0 trains on everything and keeps the last epoch.
  double validation_fraction = 0.2;
  AdamConfig adam;

  void validate() const {
    if (members < 2) throw ConfigError("ensemble needs M >= 2 members, got " + std::to_string(members));
    if (hidden < 1 || epochs < 1 || batch_size < 1) throw ConfigError("ensemble hidden/epochs/batch_size must be >= 1");
    if (min_steps < 0) throw ConfigError("ensemble min_steps must be >= 0");
    if (validation_fraction < 0.0 || validation_fraction >= 1.0) {
      throw ConfigError("ensemble validation_fraction must be in [0, 1)");
    }
  }
};

struct DynamicsEnsemble {
  MemberArch arch;
  std::vector<ParamVector> members;
  Normalization normalization;
  Json train_meta = Json::object();

  [[nodiscard]] std::size_t size() const { return members.size(); }

  void validate() const {
    if (members.size() < 2) throw ConfigError("ensemble must hold at least 2 members");
    const MemberNet net(arch);
    bool differ = false;
    for (const ParamVector& m : members) {
      if (!(m.layout() == net.layout)) throw DimensionError("ensemble member layout differs from architecture");
      if (std::string bad = m.first_nonfinite_segment(); !bad.empty()) {
        throw NumericError("ensemble member has non-finite values in '" + bad + "'");
      }
      differ = differ || !(m.values() == members.front().values());
    }
    if (!differ) throw ConfigError("ensemble members are identical");
  }
};

/// Point forecast ŝ_1..ŝ_T of one member (rows are time steps).
struct MemberForecast {
  std::size_t member_index = 0;
  Mat states;
};

namespace detail {

/// Normalized per-trajectory arrays used by every sequence trainer.
struct SequenceData {
  Mat states;   // (T+1) x D_s, normalized
  Mat actions;  // T x D_a, normalized
  Mat deltas;   // T x D_s, (s_{t+1} - s_t) / delta_scale
};

inline std::vector<SequenceData> prepare_sequences(const TrajectoryDataset& data) {
  const Normalization& n = data.normalization;
  std::vector<SequenceData> out;
  out.reserve(data.size());
  for (const Trajectory& t : data.trajectories) {
    const Eigen::Index T = t.actions.rows();
    out.push_back({n.normalize_states(t.states), n.normalize_actions(t.actions),
                   (t.states.bottomRows(T) - t.states.topRows(T)).array().rowwise() / n.delta_scale.array()});
  }
  return out;
}

/// Rows `t` of the selected sequences stacked into a batch matrix.
template <class Get>
Mat gather_rows(const std::vector<std::size_t>& idx, Eigen::Index cols, Get&& get) {
  Mat m(static_cast<Eigen::Index>(idx.size()), cols);
  for (std::size_t b = 0; b < idx.size(); ++b) m.row(static_cast<Eigen::Index>(b)) = get(idx[b]);
  return m;
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, RngStream& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.index(i)]);
  return p;
}

inline bool same_normalization_shape(const Normalization& a, const Normalization& b) {
  return a.state_mean.size() == b.state_mean.size() && a.action_mean.size() == b.action_mean.size();
}

}  // namespace detail

/// Teacher-forced mean squared one-step error (normalized deltas) of one
/// member over a batch of sequences.
template <class W>
auto member_sequence_loss(ad::Tape& tape, const W& w, const MemberNet& net,
                          const std::vector<detail::SequenceData>& seqs, const std::vector<std::size_t>& batch) {
  // Recorded on the tape for TapeWeights, evaluated directly for EvalWeights.
  constexpr bool kRecord = std::is_same_v<W, TapeWeights>;
  using T = std::conditional_t<kRecord, ad::Var, Mat>;
  const auto lift = [&](Mat m) -> T {
    if constexpr (kRecord) {
      return tape.constant(std::move(m));
    } else {
      return m;
    }
  };
  const Eigen::Index ds = seqs[batch[0]].states.cols(), da = seqs[batch[0]].actions.cols();
  const Eigen::Index steps = seqs[batch[0]].actions.rows();
  const auto B = static_cast<Eigen::Index>(batch.size());
  T h = lift(Mat::Zero(B, net.cell.hidden));
  T total;
  for (Eigen::Index t = 0; t < steps; ++t) {
    Mat x(B, ds + da), y(B, ds);
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto& s = seqs[batch[static_cast<std::size_t>(b)]];
      x.row(b) << s.states.row(t), s.actions.row(t);
      y.row(b) = s.deltas.row(t);
    }
    const T out = net.step(w, lift(std::move(x)), h);
    const T err = ad::sum(ad::square(ad::sub(out, lift(std::move(y)))));
    total = t == 0 ? err : ad::add(total, err);
  }
  const T mean = ad::scale(total, 1.0 / static_cast<double>(B * steps * ds));
  if constexpr (kRecord) {
    return mean;
  } else {
    return mean(0, 0);
  }
}

/// Trains M members independently: member m uses its own initialization and
/// shuffle streams derived from (seed, m).
inline DynamicsEnsemble train_ensemble(const TrajectoryDataset& data, const EnsembleTrainConfig& cfg,
                                       std::uint64_t seed) {
  cfg.validate();
  data.validate();
  DynamicsEnsemble ens;
  ens.arch = {data.state_dim(), data.action_dim(), cfg.hidden};
  ens.normalization = data.normalization;
  const MemberNet net(ens.arch);
  const auto seqs = detail::prepare_sequences(data);
  const RngStream root(seed, 0x656e73656d626c65ULL);  // "ensemble"

  // Held-out trajectories shared by all members.
  std::vector<std::size_t> train_idx, val_idx;
  {
    RngStream split_rng = root.split(0xffff);
    auto order = detail::shuffled_indices(seqs.size(), split_rng);
    auto n_val = static_cast<std::size_t>(std::floor(cfg.validation_fraction * static_cast<double>(seqs.size())));
    if (cfg.validation_fraction > 0.0) n_val = std::clamp<std::size_t>(n_val, 1, seqs.size() - 1);
    if (seqs.size() < 2) n_val = 0;
    val_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    train_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    std::sort(val_idx.begin(), val_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
  }

  const int epochs = effective_epochs(cfg.epochs, cfg.min_steps, train_idx.size(), cfg.batch_size);
  Json losses = Json::array(), val_losses = Json::array(), best_epochs = Json::array();
  for (int m = 0; m < cfg.members; ++m) {
    RngStream init_rng = root.split(static_cast<std::uint64_t>(m)).split(0);
    RngStream shuffle_rng = root.split(static_cast<std::uint64_t>(m)).split(1);
    ParamVector p(net.layout);
    init_uniform_fan_in(p, init_rng);
    AdamState opt = AdamState::zeros(p.size());
    ParamVector best = p;
    double best_val = std::numeric_limits<double>::infinity();
    int best_epoch = epochs - 1;
    double epoch_loss = 0.0;
    for (int e = 0; e < epochs; ++e) {
      const auto perm = detail::shuffled_indices(train_idx.size(), shuffle_rng);
      AdamConfig step_cfg = cfg.adam;
      step_cfg.lr = scheduled_lr(cfg.adam, e, epochs);
      double sum = 0.0;
      std::size_t batches = 0;
      for (std::size_t start = 0; start < perm.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t stop = std::min(perm.size(), start + static_cast<std::size_t>(cfg.batch_size));
        std::vector<std::size_t> batch;
        for (std::size_t k = start; k < stop; ++k) batch.push_back(train_idx[perm[k]]);
        std::pair<double, Eigen::VectorXd> vg;
        try {
          vg = value_and_grad(
              [&](ad::Tape& tape, const TapeWeights& w) { return member_sequence_loss(tape, w, net, seqs, batch); }, p);
        } catch (const NumericError& err) {
          throw TrainingError("ensemble member " + std::to_string(m) + " diverged: " + err.what());
        }
        clip_gradient_norm(vg.second, cfg.adam.clip_norm);
        adam_step(p, vg.second, opt, step_cfg);
        sum += vg.first;
        ++batches;
      }
      epoch_loss = sum / static_cast<double>(batches);
      if (!std::isfinite(epoch_loss)) throw TrainingError("ensemble member " + std::to_string(m) + " diverged");
      if (!val_idx.empty()) {
        ad::Tape tape;
        const EvalWeights w(p);
        const double v = member_sequence_loss(tape, w, net, seqs, val_idx);
        if (v < best_val) {
          best_val = v;
          best = p;
          best_epoch = e;
        }
      }
    }
    if (val_idx.empty()) best = p;
    losses.push_back(epoch_loss);
    val_losses.push_back(val_idx.empty() ? Json(nullptr) : Json(best_val));
    best_epochs.push_back(best_epoch);
    ens.members.push_back(std::move(best));
  }
  ens.train_meta = {{"seed", seed},
                    {"epochs", epochs},
                    {"batch_size", cfg.batch_size},
                    {"members", cfg.members},
                    {"final_losses", losses},
                    {"best_validation_losses", val_losses},
                    {"best_epochs", best_epochs},
                    {"n_train", train_idx.size()},
                    {"n_validation", val_idx.size()},
                    {"dataset_seed", data.generation_seed}};
  ens.validate();
  return ens;
}

/// Batched closed-loop stepping of one member; rows are independent samples.
class MemberStepper {
 public:
  MemberStepper(const DynamicsEnsemble& ens, std::size_t member, Eigen::Index batch)
      : ens_(&ens), net_(ens.arch), weights_(ens.members.at(member)), h_(Mat::Zero(batch, ens.arch.hidden)) {}

  /// Next raw states from raw states `s` and raw actions `a` (B x D each).
  Mat step(const Mat& s, const Mat& a) {
    const Normalization& n = ens_->normalization;
    Mat x(s.rows(), s.cols() + a.cols());
    x << n.normalize_states(s), n.normalize_actions(a);
    const Mat d = net_.step(weights_, x, h_);
    return s + (d.array().rowwise() * n.delta_scale.array()).matrix();
  }

  /// Keeps only the given rows of the recurrent state.
  void select_rows(const std::vector<Eigen::Index>& rows) {
    Mat h(static_cast<Eigen::Index>(rows.size()), h_.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) h.row(static_cast<Eigen::Index>(i)) = h_.row(rows[i]);
    h_ = std::move(h);
  }

 private:
  const DynamicsEnsemble* ens_;
  MemberNet net_;
  EvalWeights weights_;
  Mat h_;
};

/// Closed-loop rollout: ŝ_{t+1} = ŝ_t + predicted delta, recurrent state carried.
inline MemberForecast rollout(const DynamicsEnsemble& ens, std::size_t member, const Vec& s0, const Mat& actions) {
  if (member >= ens.size()) {
    throw RangeError("member index " + std::to_string(member) + " out of range [0, " + std::to_string(ens.size()) + ")");
  }
  if (s0.size() != ens.arch.state_dim || actions.cols() != ens.arch.action_dim) {
    throw DimensionError("rollout: state/action dimension mismatch");
  }
  MemberStepper stepper(ens, member, 1);
  MemberForecast f{member, Mat(actions.rows(), s0.size())};
  Mat s = s0.transpose();
  for (Eigen::Index t = 0; t < actions.rows(); ++t) {
    s = stepper.step(s, actions.row(t));
    f.states.row(t) = s;
  }
  return f;
}

inline Mat ensemble_mean(const std::vector<MemberForecast>& forecasts) {
  if (forecasts.empty()) throw DimensionError("ensemble_mean: no forecasts");
  Mat mean = Mat::Zero(forecasts[0].states.rows(), forecasts[0].states.cols());
  for (const auto& f : forecasts) {
    if (f.states.rows() != mean.rows() || f.states.cols() != mean.cols()) {
      throw DimensionError("ensemble_mean: forecasts differ in shape");
    }
    mean += f.states;
  }
  return mean / static_cast<double>(forecasts.size());
}

namespace detail {
inline void same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError(std::string(op) + ": shape mismatch");
}
}  // namespace detail

/// ε_epist = ŷ_m − mean_m ŷ_m
inline Mat epistemic_residual(const MemberForecast& forecast, const Mat& mean) {
  detail::same_shape(forecast.states, mean, "epistemic_residual");
  return forecast.states - mean;
}

/// ε_alea = y_true − ŷ_m
inline Mat aleatoric_residual(const Mat& y_true, const Mat& y_hat_m) {
  detail::same_shape(y_true, y_hat_m, "aleatoric_residual");
  return y_true - y_hat_m;
}

/// ε_total = y_true − mean_m ŷ_m
inline Mat total_residual(const Mat& y_true, const Mat& mean) {
  detail::same_shape(y_true, mean, "total_residual");
  return y_true - mean;
}

}  // namespace trajcast
