// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
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

/// Recurrent conditional VAE over state sequences, in two flavours.
///
/// Residual: conditioned on an ensemble member m. Per step the decoder sees
///   c_t = [ŝ_t, a_t, g_{t+1}, q_{t+1}]   (all normalized)
/// where g is the member's closed-loop forecast ŝ^m and q is the member's
/// one-step prediction from ŝ_t. It emits o and
///   y_pred = q_{t+1} + innovation_scale ⊙ o,   ε̂_alea,t+1 = y_pred − g_{t+1}.
/// During training ŝ_t is the recorded state s_t; when sampling it is the
/// model's own previous prediction.
///
/// Full: the same networks without an ensemble; g = q = ŝ_t and
///   y_pred = ŝ_t + delta_scale ⊙ o.
///
/// The encoder reads [c_t, (s_{t+1} − base)/scale] and emits q_φ(z_t | ·).
/// Reconstruction error is measured in innovation-scale units.
namespace trajcast {

enum class VaeKind { Residual, Full };

inline std::string to_string(VaeKind k) { return k == VaeKind::Residual ? "residual-cvae" : "full-vae"; }

struct VaeArch {
  Eigen::Index state_dim = 0;
  Eigen::Index action_dim = 0;
  Eigen::Index hidden = 32;
  Eigen::Index latent_dim = 8;

  [[nodiscard]] Eigen::Index cond_dim() const { return 3 * state_dim + action_dim; }

  [[nodiscard]] Json to_json() const {
    return {{"state_dim", state_dim}, {"action_dim", action_dim}, {"hidden", hidden}, {"latent_dim", latent_dim}};
  }
  static VaeArch from_json(const Json& j) {
    return {j.at("state_dim").get<Eigen::Index>(), j.at("action_dim").get<Eigen::Index>(),
            j.at("hidden").get<Eigen::Index>(), j.at("latent_dim").get<Eigen::Index>()};
  }
  friend bool operator==(const VaeArch&, const VaeArch&) = default;
};

struct VaeNets {
  ParamLayout enc_layout;
  ParamLayout dec_layout;
  nn::GruCell enc_cell;
  nn::Dense enc_head;
  nn::GruCell dec_cell;
  nn::SkipHead dec_head;
  Eigen::Index latent = 0;

  explicit VaeNets(const VaeArch& a) : latent(a.latent_dim) {
    if (a.latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
    enc_cell = nn::GruCell::add_to(enc_layout, "enc.gru", a.cond_dim() + a.state_dim, a.hidden);
    enc_head = nn::Dense::add_to(enc_layout, "enc.head", a.hidden, 2 * a.latent_dim);
    dec_cell = nn::GruCell::add_to(dec_layout, "dec.gru", a.cond_dim() + a.latent_dim, a.hidden);
    dec_head = nn::SkipHead::add_to(dec_layout, "dec.head", a.hidden, a.cond_dim() + a.latent_dim, a.state_dim);
  }

  /// Advances the encoder and returns (mean, clamped logvar) of q_φ(z_t | ·).
  template <class W, class T>
  std::pair<T, T> encode(const W& w, const T& x, T& h) const {
    h = enc_cell.step(w, x, h);
    const T stats = enc_head(w, h);
    return {ad::slice_cols(stats, 0, latent), ad::clamp(ad::slice_cols(stats, latent, latent), nn::kLogVarMin, nn::kLogVarMax)};
  }

  /// Advances the decoder on [cond, z] and returns its raw output o.
  template <class W, class T>
  T decode(const W& w, const T& x, T& h) const {
    h = dec_cell.step(w, x, h);
    return dec_head(w, h, x);
  }
};

struct VaeTrainConfig {
  Eigen::Index hidden = 32;
  Eigen::Index latent_dim = 8;
  double beta = 0.1;
  /// KL weight rises linearly from 0 to beta over this fraction of epochs.
  double warmup_fraction = 0.2;
  int epochs = 40;
  int batch_size = 16;
  /// Lower bound on gradient steps; small datasets get more epochs.
  long min_steps = 800;
  /// Held-out fraction; the parameters of the best held-out epoch are kept.
  double validation_fraction = 0.2;
  AdamConfig adam;

  void validate() const {
    std::vector<std::string> bad;
    if (validation_fraction < 0.0 || validation_fraction >= 1.0) bad.emplace_back("validation_fraction must be in [0, 1)");
    if (hidden < 1) bad.emplace_back("hidden must be >= 1");
    if (latent_dim < 1) bad.emplace_back("latent_dim must be >= 1");
    if (beta < 0.0) bad.emplace_back("beta must be >= 0");
    if (warmup_fraction < 0.0 || warmup_fraction > 1.0) bad.emplace_back("warmup_fraction must be in [0, 1]");
    if (epochs < 1 || batch_size < 1) bad.emplace_back("epochs and batch_size must be >= 1");
    if (min_steps < 0) bad.emplace_back("min_steps must be >= 0");
    if (!bad.empty()) {
      std::string msg;
      for (const auto& b : bad) msg += (msg.empty() ? "" : "; ") + b;
      throw ConfigError(msg);
    }
  }
};

struct SequenceVae {
  VaeKind kind = VaeKind::Residual;
  VaeArch arch;
  double beta = 0.1;
  ParamVector encoder;  // φ
  ParamVector decoder;  // θ
  Normalization normalization;
  Json train_meta = Json::object();

  /// Per-dimension scale of the decoder output o.
  [[nodiscard]] RowVec output_scale() const {
    return kind == VaeKind::Residual ? normalization.innovation_scale : normalization.delta_scale;
  }

  [[nodiscard]] std::size_t parameter_count() const { return encoder.size() + decoder.size(); }

  void validate() const {
    if (beta < 0.0) throw ConfigError("beta must be >= 0");
    const VaeNets nets(arch);
    if (!(encoder.layout() == nets.enc_layout) || !(decoder.layout() == nets.dec_layout)) {
      throw DimensionError("VAE parameters do not match the architecture");
    }
    for (const ParamVector* p : {&encoder, &decoder}) {
      if (std::string bad = p->first_nonfinite_segment(); !bad.empty()) {
        throw NumericError("VAE has non-finite values in '" + bad + "'");
      }
    }
  }
};

using ResidualCVAE = SequenceVae;
using FullVAE = SequenceVae;

/// One training sequence, precomputed: conditioning rows and targets.
struct VaeSequence {
  Mat cond;       // T x cond_dim, rows [ŝ_t, a_t, g_{t+1}, q_{t+1}] normalized
  Mat enc_input;  // T x D_s, (s_{t+1} − base) / output_scale
  Mat target;     // T x D_s, (s_{t+1} − base) / innovation_scale
};

struct VaeLossParts {
  double total = 0.0;
  double recon = 0.0;
  double kl = 0.0;
};

/// Loss terms of one step in innovation units: Σ_d err_d² + beta · KL(mean, logvar).
template <class T>
T vae_step_loss(const T& err, const T& mean, const T& logvar, double beta) {
  return ad::add(ad::sum(ad::square(err)), ad::scale(ad::sum(nn::kl_terms(mean, logvar)), beta));
}

/// Batch mean over sequences of Σ_t [reconstruction + beta · KL].
template <class WE, class WD>
ad::Var vae_batch_loss(ad::Tape& tape, const VaeNets& nets, const WE& we, const WD& wd,
                       const std::vector<const VaeSequence*>& batch, const RowVec& out_over_innov, double beta,
                       RngStream& noise_rng, VaeLossParts* parts = nullptr) {
  const auto B = static_cast<Eigen::Index>(batch.size());
  const Eigen::Index T = batch[0]->cond.rows(), cd = batch[0]->cond.cols(), ds = batch[0]->target.cols();
  const Eigen::Index L = nets.latent;
  ad::Var he = tape.constant(Mat::Zero(B, nets.enc_cell.hidden));
  ad::Var hd = tape.constant(Mat::Zero(B, nets.dec_cell.hidden));
  const ad::Var ratio = tape.constant(Mat(out_over_innov));
  ad::Var total;
  double recon_sum = 0.0, kl_sum = 0.0;
  for (Eigen::Index t = 0; t < T; ++t) {
    Mat enc_x(B, cd + ds), cond(B, cd), target(B, ds), eps(B, L);
    for (Eigen::Index b = 0; b < B; ++b) {
      const VaeSequence& s = *batch[static_cast<std::size_t>(b)];
      enc_x.row(b) << s.cond.row(t), s.enc_input.row(t);
      cond.row(b) = s.cond.row(t);
      target.row(b) = s.target.row(t);
    }
    for (Eigen::Index b = 0; b < B; ++b) {
      for (Eigen::Index l = 0; l < L; ++l) eps(b, l) = noise_rng.normal();
    }
    const auto [mean, logvar] = nets.encode(we, tape.constant(std::move(enc_x)), he);
    const ad::Var z = nn::reparameterize(mean, logvar, tape.constant(std::move(eps)));
    const ad::Var dec_x = ad::concat_cols({tape.constant(std::move(cond)), z});
    const ad::Var o = nets.decode(wd, dec_x, hd);
    const ad::Var err = ad::sub(ad::mul_row(o, ratio), tape.constant(std::move(target)));
    const ad::Var step = vae_step_loss(err, mean, logvar, beta);
    if (parts != nullptr) {
      recon_sum += err.value().squaredNorm();
      kl_sum += nn::kl_terms(mean.value(), logvar.value()).sum();
    }
    total = t == 0 ? step : ad::add(total, step);
  }
  if (parts != nullptr) {
    parts->recon = recon_sum / static_cast<double>(B);
    parts->kl = kl_sum / static_cast<double>(B);
    parts->total = parts->recon + beta * parts->kl;
  }
  return ad::scale(total, 1.0 / static_cast<double>(B));
}

struct VaeLossResult {
  VaeLossParts parts;
  Eigen::VectorXd grad_encoder;
  Eigen::VectorXd grad_decoder;
};

/// Loss value, its parts, and exact gradients for encoder and decoder.
inline VaeLossResult cvae_loss(const SequenceVae& model, const std::vector<const VaeSequence*>& batch, double beta,
                               RngStream& noise_rng) {
  if (batch.empty()) throw DimensionError("cvae_loss: empty batch");
  const VaeNets nets(model.arch);
  for (const VaeSequence* s : batch) {
    if (s->cond.cols() != model.arch.cond_dim() || s->target.cols() != model.arch.state_dim ||
        s->cond.rows() != batch[0]->cond.rows() || s->target.rows() != s->cond.rows() ||
        s->enc_input.rows() != s->cond.rows()) {
      throw DimensionError("cvae_loss: inconsistent batch shapes");
    }
  }
  const RowVec ratio = model.output_scale().array() / model.normalization.innovation_scale.array();
  ad::Tape tape;
  TapeWeights we(tape, model.encoder), wd(tape, model.decoder);
  VaeLossResult r;
  const ad::Var loss = vae_batch_loss(tape, nets, we, wd, batch, ratio, beta, noise_rng, &r.parts);
  const double v = loss.value()(0, 0);
  if (!std::isfinite(v)) throw NumericError("cvae_loss: non-finite loss");
  r.parts.total = v;
  tape.backward(loss);
  r.grad_encoder = we.gradient(tape);
  r.grad_decoder = wd.gradient(tape);
  if (std::string bad = model.encoder.first_nonfinite(r.grad_encoder); !bad.empty()) {
    throw NumericError("cvae_loss: non-finite gradient in segment '" + bad + "'");
  }
  if (std::string bad = model.decoder.first_nonfinite(r.grad_decoder); !bad.empty()) {
    throw NumericError("cvae_loss: non-finite gradient in segment '" + bad + "'");
  }
  return r;
}

namespace detail {

inline VaeSequence make_vae_sequence(const Normalization& n, VaeKind kind, const Trajectory& tr, const Mat& g,
                                     const Mat& q) {
  const Eigen::Index T = tr.actions.rows(), D = tr.states.cols(), A = tr.actions.cols();
  const Mat s_now = tr.states.topRows(T), s_next = tr.states.bottomRows(T);
  const Mat& base = kind == VaeKind::Residual ? q : s_now;
  const RowVec out_scale = kind == VaeKind::Residual ? n.innovation_scale : n.delta_scale;
  VaeSequence s;
  s.cond.resize(T, 3 * D + A);
  s.cond << n.normalize_states(s_now), n.normalize_actions(tr.actions), n.normalize_states(g), n.normalize_states(q);
  s.enc_input = (s_next - base).array().rowwise() / out_scale.array();
  s.target = (s_next - base).array().rowwise() / n.innovation_scale.array();
  return s;
}

/// Member quantities along recorded trajectories: closed-loop forecasts g and
/// teacher-forced one-step predictions q (rows t hold step t+1).
inline std::pair<std::vector<Mat>, std::vector<Mat>> member_guides(const DynamicsEnsemble& ens, std::size_t member,
                                                                   const std::vector<Trajectory>& trajs) {
  const auto B = static_cast<Eigen::Index>(trajs.size());
  const Eigen::Index T = trajs[0].actions.rows(), D = trajs[0].states.cols(), A = trajs[0].actions.cols();
  std::vector<Mat> g(trajs.size(), Mat(T, D)), q(trajs.size(), Mat(T, D));
  MemberStepper closed(ens, member, B), forced(ens, member, B);
  Mat gs(B, D), st(B, D), at(B, A);
  for (Eigen::Index b = 0; b < B; ++b) gs.row(b) = trajs[static_cast<std::size_t>(b)].states.row(0);
  for (Eigen::Index t = 0; t < T; ++t) {
    for (Eigen::Index b = 0; b < B; ++b) {
      st.row(b) = trajs[static_cast<std::size_t>(b)].states.row(t);
      at.row(b) = trajs[static_cast<std::size_t>(b)].actions.row(t);
    }
    gs = closed.step(gs, at);
    const Mat qs = forced.step(st, at);
    for (Eigen::Index b = 0; b < B; ++b) {
      g[static_cast<std::size_t>(b)].row(t) = gs.row(b);
      q[static_cast<std::size_t>(b)].row(t) = qs.row(b);
    }
  }
  return {std::move(g), std::move(q)};
}

}  // namespace detail

/// Member indices for `count` batch elements, each uniform on [0, M).
inline std::vector<std::size_t> sample_member_indices(RngStream& rng, std::size_t M, std::size_t count) {
  std::vector<std::size_t> out(count);
  for (auto& m : out) m = static_cast<std::size_t>(rng.index(M));
  return out;
}

namespace detail {

inline SequenceVae train_sequence_vae(VaeKind kind, const TrajectoryDataset& data, const DynamicsEnsemble* ens,
                                      const VaeTrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  data.validate();
  SequenceVae model;
  model.kind = kind;
  model.arch = {data.state_dim(), data.action_dim(), cfg.hidden, cfg.latent_dim};
  model.beta = cfg.beta;
  model.normalization = data.normalization;
  const VaeNets nets(model.arch);

  const RngStream root(seed, kind == VaeKind::Residual ? 0x7265736964ULL : 0x66756c6cULL);
  RngStream enc_init = root.split(0), dec_init = root.split(1), shuffle_rng = root.split(2), member_rng = root.split(3),
            noise_rng = root.split(4);
  model.encoder = ParamVector(nets.enc_layout);
  model.decoder = ParamVector(nets.dec_layout);
  init_uniform_fan_in(model.encoder, enc_init);
  init_uniform_fan_in(model.decoder, dec_init);
  // Start from "no correction": the decoder output head begins at zero.
  for (const char* seg : {"dec.head.wh", "dec.head.wx", "dec.head.b"}) {
    model.decoder.matrix(nets.dec_layout.find(seg)).setZero();
  }

  // Sequences indexed [member][trajectory]; the full VAE has a single "member".
  const std::size_t M = kind == VaeKind::Residual ? ens->size() : 1;
  std::vector<std::vector<VaeSequence>> seqs(M);
  for (std::size_t m = 0; m < M; ++m) {
    if (kind == VaeKind::Residual) {
      const auto [g, q] = member_guides(*ens, m, data.trajectories);
      for (std::size_t i = 0; i < data.size(); ++i) {
        seqs[m].push_back(make_vae_sequence(data.normalization, kind, data.trajectories[i], g[i], q[i]));
      }
    } else {
      for (const Trajectory& tr : data.trajectories) {
        const Mat s_now = tr.states.topRows(tr.actions.rows());
        seqs[m].push_back(make_vae_sequence(data.normalization, kind, tr, s_now, s_now));
      }
    }
  }

  std::vector<std::size_t> train_idx, val_idx;
  {
    RngStream split_rng = root.split(5);
    const auto order = shuffled_indices(data.size(), split_rng);
    std::size_t n_val = 0;
    if (cfg.validation_fraction > 0.0 && data.size() >= 2) {
      n_val = std::clamp<std::size_t>(
          static_cast<std::size_t>(std::floor(cfg.validation_fraction * static_cast<double>(data.size()))), 1,
          data.size() - 1);
    }
    val_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    train_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  }
  // Validation pairs trajectory k with member k mod M.
  std::vector<const VaeSequence*> val_batch;
  for (std::size_t k = 0; k < val_idx.size(); ++k) val_batch.push_back(&seqs[k % M][val_idx[k]]);
  const RngStream val_noise = root.split(6);

  const RowVec ratio = model.output_scale().array() / model.normalization.innovation_scale.array();
  AdamState opt_e = AdamState::zeros(model.encoder.size()), opt_d = AdamState::zeros(model.decoder.size());
  std::vector<std::size_t> member_counts(M, 0);
  Json epoch_losses = Json::array(), val_losses = Json::array();
  const int epochs = effective_epochs(cfg.epochs, cfg.min_steps, train_idx.size(), cfg.batch_size);
  const double warmup_epochs = cfg.warmup_fraction * epochs;
  ParamVector best_enc = model.encoder, best_dec = model.decoder;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = epochs - 1;

  for (int e = 0; e < epochs; ++e) {
    const double beta = warmup_epochs > 0.0 ? cfg.beta * std::min(1.0, e / warmup_epochs) : cfg.beta;
    AdamConfig step_cfg = cfg.adam;
    step_cfg.lr = scheduled_lr(cfg.adam, e, epochs);
    const auto order = shuffled_indices(train_idx.size(), shuffle_rng);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const auto members = sample_member_indices(member_rng, M, stop - start);
      std::vector<const VaeSequence*> batch;
      for (std::size_t k = start; k < stop; ++k) {
        const std::size_t m = members[k - start];
        ++member_counts[m];
        batch.push_back(&seqs[m][train_idx[order[k]]]);
      }
      ad::Tape tape;
      TapeWeights we(tape, model.encoder), wd(tape, model.decoder);
      const ad::Var loss = vae_batch_loss(tape, nets, we, wd, batch, ratio, beta, noise_rng);
      const double v = loss.value()(0, 0);
      if (!std::isfinite(v)) throw TrainingError(to_string(kind) + " diverged at epoch " + std::to_string(e));
      tape.backward(loss);
      Eigen::VectorXd ge = we.gradient(tape), gd = wd.gradient(tape);
      const double norm = std::sqrt(ge.squaredNorm() + gd.squaredNorm());
      if (!std::isfinite(norm)) throw TrainingError(to_string(kind) + " produced a non-finite gradient");
      if (cfg.adam.clip_norm > 0.0 && norm > cfg.adam.clip_norm) {
        ge *= cfg.adam.clip_norm / norm;
        gd *= cfg.adam.clip_norm / norm;
      }
      adam_step(model.encoder, ge, opt_e, step_cfg);
      adam_step(model.decoder, gd, opt_d, step_cfg);
      sum += v;
      ++batches;
    }
    epoch_losses.push_back(sum / static_cast<double>(batches));
    if (!val_batch.empty()) {
      ad::Tape tape;
      TapeWeights we(tape, model.encoder), wd(tape, model.decoder);
      RngStream noise = val_noise;
      const double v = vae_batch_loss(tape, nets, we, wd, val_batch, ratio, cfg.beta, noise).value()(0, 0);
      val_losses.push_back(v);
      if (v < best_val) {
        best_val = v;
        best_enc = model.encoder;
        best_dec = model.decoder;
        best_epoch = e;
      }
    }
  }
  if (!val_batch.empty()) {
    model.encoder = std::move(best_enc);
    model.decoder = std::move(best_dec);
  }
  model.train_meta = {{"seed", seed},
                      {"epochs", epochs},
                      {"batch_size", cfg.batch_size},
                      {"warmup_fraction", cfg.warmup_fraction},
                      {"epoch_losses", epoch_losses},
                      {"validation_losses", val_losses},
                      {"best_epoch", best_epoch},
                      {"member_counts", member_counts},
                      {"n_train", train_idx.size()},
                      {"n_validation", val_idx.size()},
                      {"dataset_seed", data.generation_seed}};
  model.validate();
  return model;
}

}  // namespace detail

/// Trains the residual CVAE on ε_alea = y_true − ŷ_m with m drawn uniformly
/// per batch element.
inline ResidualCVAE train_residual_cvae(const TrajectoryDataset& data, const DynamicsEnsemble& ens,
                                        const VaeTrainConfig& cfg, std::uint64_t seed) {
  if (!(ens.normalization == data.normalization)) {
    throw ConfigError("train_residual_cvae: ensemble and dataset normalizations differ");
  }
  if (ens.arch.state_dim != data.state_dim() || ens.arch.action_dim != data.action_dim()) {
    throw ConfigError("train_residual_cvae: ensemble and dataset dimensions differ");
  }
  return detail::train_sequence_vae(VaeKind::Residual, data, &ens, cfg, seed);
}

/// Trains the comparison VAE directly on states (no ensemble, no residuals).
inline FullVAE train_full_vae(const TrajectoryDataset& data, const VaeTrainConfig& cfg, std::uint64_t seed) {
  return detail::train_sequence_vae(VaeKind::Full, data, nullptr, cfg, seed);
}

// ---- sampling ------------------------------------------------------------------

/// Samples generated together; entry b of each vector belongs to sample b.
struct VaeSampleSet {
  std::vector<Mat> states;   // T x D_s, ŝ_pred,1..T
  std::vector<Mat> guides;   // T x D_s, member forecast ŝ^m_1..T (full VAE: previous prediction)
  std::vector<Mat> actions;  // T x D_a
};

/// Runs the decoder closed-loop for `rngs.size()` samples sharing one member.
/// Each sample draws its latents (and policy dither) from its own stream, so
/// results do not depend on how samples are grouped.
inline VaeSampleSet run_sequence_vae(const SequenceVae& vae, const DynamicsEnsemble* ens, std::size_t member,
                                     const Vec& s0, const ActionSource& src, std::vector<RngStream>& rngs) {
  const Eigen::Index D = vae.arch.state_dim, A = vae.arch.action_dim, L = vae.arch.latent_dim;
  if (s0.size() != D) throw DimensionError("VAE sampling: s0 has wrong dimension");
  if (src.mode == ActionSource::Mode::Fixed && src.actions.cols() != A) {
    throw DimensionError("VAE sampling: actions have wrong dimension");
  }
  if (vae.kind == VaeKind::Residual) {
    if (ens == nullptr) throw ConfigError("residual CVAE sampling needs the ensemble");
    if (!(ens->normalization == vae.normalization)) throw ConfigError("ensemble and CVAE normalizations differ");
    if (member >= ens->size()) throw RangeError("member index out of range");
  }
  const auto B = static_cast<Eigen::Index>(rngs.size());
  const int T = src.horizon;
  const VaeNets nets(vae.arch);
  const EvalWeights wd(vae.decoder);
  const Normalization& n = vae.normalization;
  const RowVec out_scale = vae.output_scale();

  VaeSampleSet out;
  out.states.assign(rngs.size(), Mat(T, D));
  out.guides.assign(rngs.size(), Mat(T, D));
  out.actions.assign(rngs.size(), Mat(T, A));

  std::optional<MemberStepper> closed, forced;
  if (vae.kind == VaeKind::Residual) {
    closed.emplace(*ens, member, B);
    forced.emplace(*ens, member, B);
  }
  Mat P = s0.transpose().replicate(B, 1), G = P, act(B, A), Z(B, L), x(B, vae.arch.cond_dim() + L);
  Mat hd = Mat::Zero(B, vae.arch.hidden);
  for (int t = 0; t < T; ++t) {
    for (Eigen::Index b = 0; b < B; ++b) {
      act.row(b) = src.action(t, P.row(b), rngs[static_cast<std::size_t>(b)]).transpose();
      for (Eigen::Index l = 0; l < L; ++l) Z(b, l) = rngs[static_cast<std::size_t>(b)].normal();
    }
    Mat Q;
    if (vae.kind == VaeKind::Residual) {
      G = closed->step(G, act);
      Q = forced->step(P, act);
    } else {
      G = P;
      Q = P;
    }
    x << n.normalize_states(P), n.normalize_actions(act), n.normalize_states(G), n.normalize_states(Q), Z;
    const Mat o = nets.decode(wd, x, hd);
    const Mat& base = vae.kind == VaeKind::Residual ? Q : P;
    P = base + (o.array().rowwise() * out_scale.array()).matrix();
    if (!P.allFinite()) throw NumericError("VAE sampling produced a non-finite state");
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto k = static_cast<std::size_t>(b);
      out.states[k].row(t) = P.row(b);
      out.guides[k].row(t) = G.row(b);
      out.actions[k].row(t) = act.row(b);
    }
  }
  return out;
}

/// Sampled aleatoric residual sequence and what it was conditioned on.
struct ResidualSample {
  Mat residuals;     // T x D_s, ε̂_alea,1..T
  Mat guide_states;  // T x D_s, member forecast ŝ^m_1..T
  Vec s0;
  Mat actions;
  std::size_t member_index = 0;
};

/// Draws one residual sequence for member `member` under fixed actions.
/// Consumes one draw from `rng` to key the sample's own stream.
inline ResidualSample sample_residuals(const ResidualCVAE& model, const DynamicsEnsemble& ens, std::size_t member,
                                       const Vec& s0, const Mat& actions, RngStream& rng) {
  if (model.kind != VaeKind::Residual) throw ConfigError("sample_residuals needs a residual CVAE");
  std::vector<RngStream> rngs{rng.split(rng())};
  const VaeSampleSet set = run_sequence_vae(model, &ens, member, s0, ActionSource::fixed(actions), rngs);
  return {set.states[0] - set.guides[0], set.guides[0], s0, actions, member};
}

/// One closed-loop forecast ŝ_1..T of the full VAE under fixed actions.
inline Mat full_vae_forecast(const FullVAE& model, const Vec& s0, const Mat& actions, RngStream& rng) {
  if (model.kind != VaeKind::Full) throw ConfigError("full_vae_forecast needs a full VAE");
  std::vector<RngStream> rngs{rng.split(rng())};
  return run_sequence_vae(model, nullptr, 0, s0, ActionSource::fixed(actions), rngs).states[0];
}

}  // namespace trajcast
