// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <sstream>
#include <type_traits>
#include <string>
#include <vector>

#include "trajcast/core/error.hpp"
#include "trajcast/core/hash.hpp"
#include "trajcast/env/environments.hpp"
#include "trajcast/env/types.hpp"
#include "trajcast/metrics/metrics.hpp"
#include "trajcast/models/baselines.hpp"
#include "trajcast/models/dynamics_ensemble.hpp"
#include "trajcast/models/sequence_vae.hpp"

namespace trajcast {

inline constexpr int kConfigVersion = 1;

struct EvalConfig {
  std::uint64_t seed = 1;
  int n_samples = 256;     // forecast samples per scenario
  int n_scenarios = 50;
  int n_observed = 200;    // ground-truth rollouts per scenario
  std::string action_mode = "policy";  // policy | fixed
  std::string bandwidth_rule = "median-heuristic";
  double bandwidth_floor = 1e-6;
  double outcome_radius = 0.05;
  /// Deadline = nominal first-hit step + uniform integer offset in [-jitter, jitter].
  int deadline_jitter = 3;
  int bundle_exports = 2;  // scenarios whose full bundles are written
};

struct ExperimentConfig {
  EnvConfig env;
  PolicyConfig policy;
  int n_train_low = 200;
  int n_train_high = 20;
  std::uint64_t data_seed = 1;
  std::uint64_t model_seed = 1;
  EnsembleTrainConfig ensemble;
  VaeTrainConfig vae;
  ProbMlpTrainConfig prob_mlp;
  EvalConfig eval;
  std::string output_dir = "run";
};

namespace detail {

inline Json adam_json(const AdamConfig& a) {
  return {{"lr", a.lr}, {"final_lr_fraction", a.final_lr_fraction}, {"clip_norm", a.clip_norm},
          {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}};
}

}  // namespace detail

/// Desk-scale defaults per environment.
inline ExperimentConfig default_experiment_config(EnvKind k) {
  ExperimentConfig c;
  c.env = default_env_config(k);
  c.policy = default_policy_config(k);
  c.ensemble.members = 5;
  c.ensemble.adam.final_lr_fraction = 0.05;
  c.vae.adam.final_lr_fraction = 0.1;
  c.prob_mlp.adam.final_lr_fraction = 0.1;
  switch (k) {
    case EnvKind::PusherLite:
      // Contact dynamics need more data than the drone for a usable ensemble.
      c.n_train_low = 1000;
      c.n_train_high = 100;
      c.ensemble.hidden = 32;
      c.ensemble.epochs = 30;
      c.ensemble.batch_size = 16;
      c.ensemble.min_steps = 2000;
      c.ensemble.adam.lr = 3e-3;
      c.vae.hidden = 32;
      c.vae.latent_dim = 8;
      c.vae.epochs = 30;
      c.vae.batch_size = 16;
      c.vae.min_steps = 600;
      c.vae.adam.lr = 3e-3;
      c.prob_mlp.adam.lr = 3e-3;
      c.eval.outcome_radius = 0.05;
      break;
    case EnvKind::DroneLite:
      c.n_train_low = 200;
      c.n_train_high = 20;
      c.ensemble.hidden = 32;
      c.ensemble.epochs = 30;
      c.ensemble.batch_size = 16;
      c.ensemble.min_steps = 600;
      c.ensemble.adam.lr = 3e-3;
      c.vae.hidden = 32;
      c.vae.latent_dim = 8;
      c.vae.epochs = 30;
      c.vae.batch_size = 16;
      c.vae.min_steps = 600;
      c.vae.adam.lr = 3e-3;
      c.prob_mlp.adam.lr = 3e-3;
      c.eval.outcome_radius = 0.2;
      break;
    case EnvKind::LinearToy:
      c.env.horizon = 50;
      c.ensemble.hidden = 16;
      c.ensemble.epochs = 60;
      c.ensemble.batch_size = 4;
      c.ensemble.min_steps = 1000;
      c.ensemble.adam.lr = 1e-2;
      c.ensemble.adam.final_lr_fraction = 0.01;
      c.vae.epochs = 40;
      c.vae.batch_size = 8;
      c.vae.min_steps = 3000;
      c.vae.adam.lr = 1e-2;
      c.prob_mlp.adam.lr = 1e-2;
      c.eval.outcome_radius = 0.1;
      break;
  }
  return c;
}

inline Json to_json(const ExperimentConfig& c) {
  const ScenarioRanges& r = c.env.ranges;
  return {
      {"format_version", kConfigVersion},
      {"output_dir", c.output_dir},
      {"env",
       {{"id", to_string(c.env.env)},
        {"action_noise_std", c.env.action_noise_std},
        {"process_noise_std", c.env.process_noise_std},
        {"hidden_param_range", c.env.hidden_param_range},
        {"dt", c.env.dt},
        {"horizon", c.env.horizon},
        {"innovation_floor", c.env.innovation_floor},
        {"ranges",
         {{"start_half_width", r.start_half_width},
          {"object_half_width", r.object_half_width},
          {"target_distance", r.target_distance},
          {"wind_max", r.wind_max}}},
        {"policy", {{"kind", to_string(c.policy.kind)}, {"dither_std", c.policy.dither_std}}}}},
      {"data", {{"n_train_low", c.n_train_low}, {"n_train_high", c.n_train_high}, {"seed", c.data_seed}}},
      {"models",
       {{"seed", c.model_seed},
        {"ensemble",
         {{"members", c.ensemble.members},
          {"hidden", c.ensemble.hidden},
          {"epochs", c.ensemble.epochs},
          {"batch_size", c.ensemble.batch_size},
          {"min_steps", c.ensemble.min_steps},
          {"validation_fraction", c.ensemble.validation_fraction},
          {"adam", detail::adam_json(c.ensemble.adam)}}},
        {"vae",
         {{"hidden", c.vae.hidden},
          {"latent_dim", c.vae.latent_dim},
          {"beta", c.vae.beta},
          {"warmup_fraction", c.vae.warmup_fraction},
          {"epochs", c.vae.epochs},
          {"batch_size", c.vae.batch_size},
          {"min_steps", c.vae.min_steps},
          {"validation_fraction", c.vae.validation_fraction},
          {"adam", detail::adam_json(c.vae.adam)}}},
        {"prob_mlp",
         {{"widths", c.prob_mlp.widths},
          {"epochs", c.prob_mlp.epochs},
          {"batch_size", c.prob_mlp.batch_size},
          {"min_steps", c.prob_mlp.min_steps},
          {"validation_fraction", c.prob_mlp.validation_fraction},
          {"adam", detail::adam_json(c.prob_mlp.adam)}}}}},
      {"eval",
       {{"seed", c.eval.seed},
        {"n_samples", c.eval.n_samples},
        {"n_scenarios", c.eval.n_scenarios},
        {"n_observed", c.eval.n_observed},
        {"action_mode", c.eval.action_mode},
        {"bandwidth_rule", c.eval.bandwidth_rule},
        {"bandwidth_floor", c.eval.bandwidth_floor},
        {"outcome", {{"radius", c.eval.outcome_radius}, {"deadline_jitter", c.eval.deadline_jitter}}},
        {"bundle_exports", c.eval.bundle_exports}}}};
}

namespace detail {

/// Collects every problem instead of stopping at the first.
class ConfigReader {
 public:
  explicit ConfigReader(std::vector<std::string>& errors) : errors_(&errors) {}

  template <class T>
  void get(const Json& j, const std::string& path, T& out) {
    const Json* node = &j;
    std::stringstream ss(path);
    std::string part;
    while (std::getline(ss, part, '.')) {
      if (!node->is_object() || !node->contains(part)) {
        errors_->push_back(path + ": missing");
        return;
      }
      node = &(*node)[part];
    }
    try {
      if constexpr (std::is_floating_point_v<T>) {
        if (!node->is_number()) throw std::invalid_argument("expected a number");
      } else if constexpr (std::is_integral_v<T>) {
        if (!node->is_number_integer()) throw std::invalid_argument("expected an integer");
      }
      out = node->get<T>();
    } catch (const std::exception& e) {
      errors_->push_back(path + ": " + e.what());
    }
  }

  void check(bool ok, const std::string& msg) {
    if (!ok) errors_->push_back(msg);
  }

 private:
  std::vector<std::string>* errors_;
};

inline void unknown_keys(const Json& user, const Json& known, const std::string& prefix, std::vector<std::string>& errs) {
  if (!user.is_object() || !known.is_object()) return;
  for (const auto& [k, v] : user.items()) {
    const std::string path = prefix.empty() ? k : prefix + "." + k;
    if (!known.contains(k)) {
      errs.push_back(path + ": unknown key");
    } else {
      unknown_keys(v, known[k], path, errs);
    }
  }
}

inline void read_adam(ConfigReader& r, const Json& j, const std::string& p, AdamConfig& a) {
  r.get(j, p + ".lr", a.lr);
  r.get(j, p + ".final_lr_fraction", a.final_lr_fraction);
  r.get(j, p + ".clip_norm", a.clip_norm);
  r.get(j, p + ".beta1", a.beta1);
  r.get(j, p + ".beta2", a.beta2);
  r.get(j, p + ".eps", a.eps);
  r.check(a.lr > 0.0, p + ".lr must be > 0");
  r.check(a.final_lr_fraction > 0.0 && a.final_lr_fraction <= 1.0, p + ".final_lr_fraction must be in (0, 1]");
  r.check(a.beta1 >= 0.0 && a.beta1 < 1.0 && a.beta2 >= 0.0 && a.beta2 < 1.0, p + ".beta1/beta2 must be in [0, 1)");
  r.check(a.eps > 0.0, p + ".eps must be > 0");
}

}  // namespace detail

/// Parses a (possibly partial) config over the defaults of its env id and
/// validates it. Every violation is reported in one ConfigError.
inline ExperimentConfig config_from_json(const Json& user) {
  std::vector<std::string> errs;
  if (!user.is_object()) throw ConfigError("config must be a JSON object");
  EnvKind kind = EnvKind::PusherLite;
  if (user.contains("env") && user["env"].contains("id")) {
    try {
      kind = env_kind_from_string(user["env"]["id"].get<std::string>());
    } catch (const std::exception& e) {
      errs.push_back(std::string("env.id: ") + e.what());
    }
  }
  const Json base = to_json(default_experiment_config(kind));
  detail::unknown_keys(user, base, "", errs);
  Json j = base;
  j.merge_patch(user);

  ExperimentConfig c = default_experiment_config(kind);
  detail::ConfigReader r(errs);
  int version = 0;
  r.get(j, "format_version", version);
  r.check(version == kConfigVersion, "format_version must be " + std::to_string(kConfigVersion));
  r.get(j, "output_dir", c.output_dir);

  r.get(j, "env.action_noise_std", c.env.action_noise_std);
  r.get(j, "env.process_noise_std", c.env.process_noise_std);
  r.get(j, "env.hidden_param_range", c.env.hidden_param_range);
  r.get(j, "env.dt", c.env.dt);
  r.get(j, "env.horizon", c.env.horizon);
  r.get(j, "env.innovation_floor", c.env.innovation_floor);
  r.get(j, "env.ranges.start_half_width", c.env.ranges.start_half_width);
  r.get(j, "env.ranges.object_half_width", c.env.ranges.object_half_width);
  r.get(j, "env.ranges.target_distance", c.env.ranges.target_distance);
  r.get(j, "env.ranges.wind_max", c.env.ranges.wind_max);
  std::string policy_kind;
  r.get(j, "env.policy.kind", policy_kind);
  try {
    c.policy.kind = policy_kind_from_string(policy_kind);
  } catch (const std::exception& e) {
    errs.push_back(std::string("env.policy.kind: ") + e.what());
  }
  r.get(j, "env.policy.dither_std", c.policy.dither_std);
  try {
    c.env.validate();
  } catch (const ConfigError& e) {
    errs.emplace_back(e.what());
  }
  r.check(c.policy.dither_std >= 0.0, "env.policy.dither_std must be >= 0");
  r.check(c.env.ranges.target_distance[0] <= c.env.ranges.target_distance[1], "env.ranges.target_distance is inverted");

  r.get(j, "data.n_train_low", c.n_train_low);
  r.get(j, "data.n_train_high", c.n_train_high);
  r.get(j, "data.seed", c.data_seed);
  r.check(c.n_train_high >= 2, "data.n_train_high must be >= 2");
  r.check(c.n_train_low == 10 * c.n_train_high,
          "data.n_train_low must equal 10 x data.n_train_high (got " + std::to_string(c.n_train_low) + " vs " +
              std::to_string(c.n_train_high) + ")");

  r.get(j, "models.seed", c.model_seed);
  r.get(j, "models.ensemble.members", c.ensemble.members);
  r.get(j, "models.ensemble.hidden", c.ensemble.hidden);
  r.get(j, "models.ensemble.epochs", c.ensemble.epochs);
  r.get(j, "models.ensemble.batch_size", c.ensemble.batch_size);
  r.get(j, "models.ensemble.min_steps", c.ensemble.min_steps);
  r.get(j, "models.ensemble.validation_fraction", c.ensemble.validation_fraction);
  detail::read_adam(r, j, "models.ensemble.adam", c.ensemble.adam);
  r.check(c.ensemble.members >= 2, "models.ensemble.members must be >= 2");
  r.check(c.ensemble.hidden >= 1 && c.ensemble.epochs >= 1 && c.ensemble.batch_size >= 1 && c.ensemble.min_steps >= 0,
          "models.ensemble.hidden/epochs/batch_size must be >= 1 and min_steps >= 0");
  r.check(c.ensemble.validation_fraction >= 0.0 && c.ensemble.validation_fraction < 1.0,
          "models.ensemble.validation_fraction must be in [0, 1)");

  r.get(j, "models.vae.hidden", c.vae.hidden);
  r.get(j, "models.vae.latent_dim", c.vae.latent_dim);
  r.get(j, "models.vae.beta", c.vae.beta);
  r.get(j, "models.vae.warmup_fraction", c.vae.warmup_fraction);
  r.get(j, "models.vae.epochs", c.vae.epochs);
  r.get(j, "models.vae.batch_size", c.vae.batch_size);
  r.get(j, "models.vae.min_steps", c.vae.min_steps);
  r.get(j, "models.vae.validation_fraction", c.vae.validation_fraction);
  detail::read_adam(r, j, "models.vae.adam", c.vae.adam);
  r.check(c.vae.hidden >= 1, "models.vae.hidden must be >= 1");
  r.check(c.vae.latent_dim >= 1, "models.vae.latent_dim must be >= 1");
  r.check(c.vae.beta >= 0.0, "models.vae.beta must be >= 0");
  r.check(c.vae.warmup_fraction >= 0.0 && c.vae.warmup_fraction <= 1.0, "models.vae.warmup_fraction must be in [0, 1]");
  r.check(c.vae.epochs >= 1 && c.vae.batch_size >= 1 && c.vae.min_steps >= 0,
          "models.vae.epochs/batch_size must be >= 1 and min_steps >= 0");
  r.check(c.vae.validation_fraction >= 0.0 && c.vae.validation_fraction < 1.0,
          "models.vae.validation_fraction must be in [0, 1)");

  r.get(j, "models.prob_mlp.widths", c.prob_mlp.widths);
  r.get(j, "models.prob_mlp.epochs", c.prob_mlp.epochs);
  r.get(j, "models.prob_mlp.batch_size", c.prob_mlp.batch_size);
  r.get(j, "models.prob_mlp.min_steps", c.prob_mlp.min_steps);
  r.get(j, "models.prob_mlp.validation_fraction", c.prob_mlp.validation_fraction);
  detail::read_adam(r, j, "models.prob_mlp.adam", c.prob_mlp.adam);
  bool widths_ok = !c.prob_mlp.widths.empty();
  for (auto w : c.prob_mlp.widths) widths_ok = widths_ok && w >= 1;
  r.check(widths_ok, "models.prob_mlp.widths must be a non-empty list of positive sizes");
  r.check(c.prob_mlp.epochs >= 1 && c.prob_mlp.batch_size >= 1 && c.prob_mlp.min_steps >= 0,
          "models.prob_mlp.epochs/batch_size must be >= 1 and min_steps >= 0");
  r.check(c.prob_mlp.validation_fraction >= 0.0 && c.prob_mlp.validation_fraction < 1.0,
          "models.prob_mlp.validation_fraction must be in [0, 1)");

  r.get(j, "eval.seed", c.eval.seed);
  r.get(j, "eval.n_samples", c.eval.n_samples);
  r.get(j, "eval.n_scenarios", c.eval.n_scenarios);
  r.get(j, "eval.n_observed", c.eval.n_observed);
  r.get(j, "eval.action_mode", c.eval.action_mode);
  r.get(j, "eval.bandwidth_rule", c.eval.bandwidth_rule);
  r.get(j, "eval.bandwidth_floor", c.eval.bandwidth_floor);
  r.get(j, "eval.outcome.radius", c.eval.outcome_radius);
  r.get(j, "eval.outcome.deadline_jitter", c.eval.deadline_jitter);
  r.get(j, "eval.bundle_exports", c.eval.bundle_exports);
  r.check(c.eval.n_samples >= 1, "eval.n_samples must be >= 1");
  r.check(c.eval.n_scenarios >= 1, "eval.n_scenarios must be >= 1");
  r.check(c.eval.n_observed >= 2, "eval.n_observed must be >= 2");
  r.check(c.eval.action_mode == "policy" || c.eval.action_mode == "fixed", "eval.action_mode must be 'policy' or 'fixed'");
  r.check(c.eval.bandwidth_rule == "median-heuristic", "eval.bandwidth_rule must be 'median-heuristic'");
  r.check(c.eval.bandwidth_floor == kBandwidthFloor, "eval.bandwidth_floor is fixed at 1e-6");
  r.check(c.eval.outcome_radius > 0.0, "eval.outcome.radius must be > 0");
  r.check(c.eval.deadline_jitter >= 0, "eval.outcome.deadline_jitter must be >= 0");
  r.check(c.eval.bundle_exports >= 0, "eval.bundle_exports must be >= 0");

  if (!errs.empty()) {
    std::string msg = std::to_string(errs.size()) + " config violation(s): ";
    for (std::size_t i = 0; i < errs.size(); ++i) msg += (i ? "; " : "") + errs[i];
    throw ConfigError(msg);
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

/// Hash of the resolved config; output_dir is excluded so relocating a run
/// does not change it.
inline std::string config_hash(const ExperimentConfig& c) {
  Json j = to_json(c);
  j.erase("output_dir");
  return fnv1a_hex(j.dump());
}

}  // namespace trajcast
