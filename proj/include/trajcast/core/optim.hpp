// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "trajcast/core/error.hpp"
#include "trajcast/core/params.hpp"

namespace trajcast {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm clip applied by the training loops before each
  /// step; <= 0 disables it. Not part of the update rule itself.
  double clip_norm = 10.0;
  /// Learning rate at the end of training as a fraction of `lr`; the
  /// training loops follow a cosine schedule down to it. 1 keeps lr fixed.
  double final_lr_fraction = 1.0;
};

/// Epoch count raised so that training takes at least `min_steps` batches.
inline int effective_epochs(int epochs, long min_steps, std::size_t n_train, int batch_size) {
  const auto per_epoch = static_cast<long>((n_train + static_cast<std::size_t>(batch_size) - 1) /
                                           static_cast<std::size_t>(batch_size));
  if (per_epoch == 0) return epochs;
  return static_cast<int>(std::max<long>(epochs, (min_steps + per_epoch - 1) / per_epoch));
}

/// Cosine-annealed learning rate for `epoch` of `epochs`.
inline double scheduled_lr(const AdamConfig& cfg, int epoch, int epochs) {
  if (epochs <= 1 || cfg.final_lr_fraction == 1.0) return cfg.lr;
  const double progress = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
  const double f = cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + std::cos(M_PI * progress));
  return cfg.lr * f;
}

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  std::int64_t step = 0;

  static AdamState zeros(std::size_t n) {
    const auto len = static_cast<Eigen::Index>(n);
    return {Eigen::VectorXd::Zero(len), Eigen::VectorXd::Zero(len), 0};
  }
};

/// One bias-corrected adaptive-moment update, in place.
inline void adam_step(ParamVector& params, const Eigen::VectorXd& grads, AdamState& state,
                      const AdamConfig& cfg) {
  if (static_cast<std::size_t>(grads.size()) != params.size()) {
    throw DimensionError("adam_step: gradient length differs from parameter length");
  }
  if (std::string bad = params.first_nonfinite(grads); !bad.empty()) {
    throw NumericError("adam_step: non-finite gradient in segment '" + bad + "'");
  }
  if (state.m.size() != grads.size()) state = AdamState::zeros(params.size());

  ++state.step;
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads;
  state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  params.values().array() -=
      cfg.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + cfg.eps);
}

/// Rescales `g` in place so its Euclidean norm is at most `max_norm`.
inline void clip_gradient_norm(Eigen::VectorXd& g, double max_norm) {
  if (max_norm <= 0.0) return;
  const double n = g.norm();
  if (n > max_norm) g *= max_norm / n;
}

}  // namespace trajcast
