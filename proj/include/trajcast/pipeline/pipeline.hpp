// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "trajcast/core/error.hpp"
#include "trajcast/core/hash.hpp"
#include "trajcast/core/rng.hpp"
#include "trajcast/env/dataset_io.hpp"
#include "trajcast/env/environments.hpp"
#include "trajcast/forecast/forecast.hpp"
#include "trajcast/metrics/metrics.hpp"
#include "trajcast/models/checkpoint.hpp"
#include "trajcast/pipeline/config.hpp"

/// Experiment pipeline. Every artifact carries the hash of the resolved
/// config (JSON field, JSONL/checkpoint header field, or a leading
/// "# config_hash=" line in CSV files). A stage is skipped on resume when
/// all its outputs exist with the current hash.
namespace trajcast {

namespace fs = std::filesystem;

enum class Stage { GenerateData, TrainEnsemble, TrainAleatoric, TrainBaseline, Forecast, Evaluate, Report };

inline constexpr std::array<Stage, 7> kStages{Stage::GenerateData,  Stage::TrainEnsemble, Stage::TrainAleatoric,
                                              Stage::TrainBaseline, Stage::Forecast,      Stage::Evaluate,
                                              Stage::Report};
inline constexpr std::array<const char*, 2> kLevels{"low", "high"};
inline constexpr std::array<const char*, 3> kModels{"residual-vae", "full-vae", "prob-mlp"};

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::GenerateData: return "generate-data";
    case Stage::TrainEnsemble: return "train-ensemble";
    case Stage::TrainAleatoric: return "train-aleatoric";
    case Stage::TrainBaseline: return "train-baseline";
    case Stage::Forecast: return "forecast";
    case Stage::Evaluate: return "evaluate";
    case Stage::Report: return "report";
  }
  return "?";
}

inline Stage stage_from_string(const std::string& s) {
  for (Stage st : kStages) {
    if (to_string(st) == s) return st;
  }
  throw ConfigError("unknown stage '" + s + "'");
}

/// Replaces every seed with `seed`.
inline void override_seeds(ExperimentConfig& c, std::uint64_t seed) {
  c.data_seed = seed;
  c.model_seed = seed;
  c.eval.seed = seed;
}

/// Seed for one model, derived from the experiment's model seed and a tag.
inline std::uint64_t derive_seed(std::uint64_t base, const std::string& tag) {
  RngStream r(base, fnv1a(tag));
  return r();
}

// ---- evaluation scenarios -------------------------------------------------------

struct EvalScenario {
  std::size_t index = 0;
  Scenario scenario;
  OutcomeSpec outcome;
  int nominal_hit = 0;  // first step the noise-free nominal rollout meets the outcome
  Mat fixed_actions;    // nominal actions, used when eval.action_mode == "fixed"
  std::vector<bool> outcomes;  // ground-truth labels of the observed rollouts
};

namespace detail {

inline constexpr std::uint64_t kScenarioStream = 0x7363656e6172696fULL;
inline constexpr std::uint64_t kObservedStream = 0x6f62736572766564ULL;
inline constexpr std::uint64_t kOracleStream = 0x6f7261636c65ULL;

inline int first_hit(EnvKind env, const Mat& states, const OutcomeSpec& spec) {
  for (Eigen::Index t = 0; t < states.rows(); ++t) {
    const Vec pos = task_position(env, states.row(t));
    if ((pos - spec.target).norm() <= spec.radius) return static_cast<int>(t);
  }
  return -1;
}

inline Trajectory true_rollout(const ExperimentConfig& cfg, const EvalScenario& sc, const RngStream& stream) {
  RngStream hidden = stream.split(0), env_rng = stream.split(1), policy_rng = stream.split(2);
  const double hp = sample_hidden_param(cfg.env, hidden);
  if (cfg.eval.action_mode == "fixed") return rollout_actions(cfg.env, sc.scenario.s0, sc.fixed_actions, hp, env_rng);
  return rollout_policy(cfg.env, cfg.policy, sc.scenario, hp, env_rng, policy_rng);
}

}  // namespace detail

/// Scenario `i` of the evaluation set. The outcome deadline is seeded from a
/// noise-free nominal rollout (mid-range hidden parameter, no dither): its
/// first hit step plus a uniform integer offset in [-jitter, jitter], clamped
/// to [1, T]. Outcomes of the observed rollouts are filled by
/// `label_observed`.
inline EvalScenario make_scenario(const ExperimentConfig& cfg, std::size_t i) {
  const RngStream base = RngStream(cfg.eval.seed, detail::kScenarioStream).split(i);
  RngStream sc_rng = base.split(0), jitter_rng = base.split(1);
  EvalScenario sc;
  sc.index = i;
  sc.scenario = sample_scenario(cfg.env, sc_rng);

  EnvConfig quiet = cfg.env;
  quiet.action_noise_std = 0.0;
  quiet.process_noise_std = 0.0;
  PolicyConfig steady = cfg.policy;
  steady.dither_std = 0.0;
  RngStream unused(0, 0);
  const double mid = 0.5 * (cfg.env.hidden_param_range[0] + cfg.env.hidden_param_range[1]);
  const Trajectory nominal = rollout_policy(quiet, steady, sc.scenario, mid, unused, unused);
  sc.fixed_actions = nominal.actions;

  const int T = cfg.env.horizon;
  sc.outcome.target = sc.scenario.target;
  sc.outcome.radius = cfg.eval.outcome_radius;
  const int hit = detail::first_hit(cfg.env.env, nominal.states, sc.outcome);
  sc.nominal_hit = hit < 0 ? T : hit;
  const int J = cfg.eval.deadline_jitter;
  const int offset = J == 0 ? 0 : static_cast<int>(jitter_rng.index(static_cast<std::uint64_t>(2 * J + 1))) - J;
  sc.outcome.deadline = std::clamp(sc.nominal_hit + offset, 1, T);
  return sc;
}

/// The `n` ground-truth rollouts of a scenario that forecasts are compared with.
inline std::vector<Trajectory> observed_rollouts(const ExperimentConfig& cfg, const EvalScenario& sc, std::size_t n) {
  const RngStream base = RngStream(cfg.eval.seed, detail::kObservedStream).split(sc.index);
  std::vector<Trajectory> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) out.push_back(detail::true_rollout(cfg, sc, base.split(k)));
  return out;
}

inline void label_observed(const ExperimentConfig& cfg, EvalScenario& sc) {
  sc.outcomes.clear();
  for (const auto& tr : observed_rollouts(cfg, sc, static_cast<std::size_t>(cfg.eval.n_observed))) {
    sc.outcomes.push_back(label_outcome(cfg.env.env, tr, sc.outcome));
  }
}

/// Monte Carlo success frequency of the true environment over `n` rollouts
/// drawn independently of the observed ones.
inline double oracle_probability(const ExperimentConfig& cfg, const EvalScenario& sc, std::size_t n) {
  const RngStream base = RngStream(cfg.eval.seed, detail::kOracleStream).split(sc.index);
  std::size_t hits = 0;
  for (std::size_t k = 0; k < n; ++k) hits += label_outcome(cfg.env.env, detail::true_rollout(cfg, sc, base.split(k)), sc.outcome);
  return static_cast<double>(hits) / static_cast<double>(n);
}

inline ActionSource action_source(const ExperimentConfig& cfg, const EvalScenario& sc) {
  if (cfg.eval.action_mode == "fixed") return ActionSource::fixed(sc.fixed_actions);
  return ActionSource::closed_loop(cfg.policy, cfg.env.env, sc.scenario.target, cfg.env.horizon);
}

inline Json to_json(const EvalScenario& sc) {
  Json outcomes = Json::array();
  for (bool o : sc.outcomes) outcomes.push_back(o ? 1 : 0);
  return {{"index", sc.index},
          {"s0", io::to_json(sc.scenario.s0)},
          {"target", io::to_json(sc.scenario.target)},
          {"outcome", {{"target", io::to_json(sc.outcome.target)}, {"radius", sc.outcome.radius}, {"deadline", sc.outcome.deadline}}},
          {"nominal_hit", sc.nominal_hit},
          {"fixed_actions", io::to_json(sc.fixed_actions)},
          {"outcomes", outcomes}};
}

inline EvalScenario eval_scenario_from_json(const Json& j) {
  EvalScenario sc;
  sc.index = j.at("index").get<std::size_t>();
  sc.scenario.s0 = io::vec_from_json(j.at("s0"));
  sc.scenario.target = io::vec_from_json(j.at("target"));
  sc.outcome.target = io::vec_from_json(j.at("outcome").at("target"));
  sc.outcome.radius = j.at("outcome").at("radius").get<double>();
  sc.outcome.deadline = j.at("outcome").at("deadline").get<int>();
  sc.nominal_hit = j.at("nominal_hit").get<int>();
  sc.fixed_actions = io::mat_from_json(j.at("fixed_actions"));
  for (const auto& o : j.at("outcomes")) sc.outcomes.push_back(o.get<int>() != 0);
  return sc;
}

// ---- artifact files -------------------------------------------------------------

/// Config hash carried by an artifact, or nullopt when the file is missing or
/// carries none.
inline std::optional<std::string> artifact_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  const std::string ext = path.extension().string();
  try {
    if (ext == ".json") {
      const Json j = Json::parse(in);
      if (j.is_object() && j.contains("config_hash")) return j["config_hash"].get<std::string>();
      return std::nullopt;
    }
    std::string line;
    if (!std::getline(in, line)) return std::nullopt;
    if (ext == ".csv") {
      const std::string prefix = "# config_hash=";
      if (line.rfind(prefix, 0) == 0) return line.substr(prefix.size());
      return std::nullopt;
    }
    const Json h = Json::parse(line);
    if (ext == ".ckpt") return h.at("extra").at("config_hash").get<std::string>();
    return h.at("config_hash").get<std::string>();
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline Json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw IntegrityError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

inline std::string num(double v) {
  std::ostringstream ss;
  ss << std::setprecision(17) << v;
  return ss.str();
}

inline double final_quarter_mean(const Eigen::VectorXd& curve) {
  const Eigen::Index T = curve.size();
  const Eigen::Index start = (3 * T) / 4;
  return curve.tail(T - start).mean();
}

}  // namespace detail

struct StageRecord {
  std::string name;
  bool skipped = false;
  double wall_seconds = 0.0;
  std::vector<std::string> artifacts;  // relative to the output directory
};

/// Config hash, artifact paths (relative to the output directory), per-stage
/// wall times and format version.
struct RunManifest {
  std::string config_hash;
  int format_version = kConfigVersion;
  std::vector<StageRecord> stages;

  [[nodiscard]] std::vector<std::string> artifacts() const {
    std::vector<std::string> out;
    for (const auto& s : stages) out.insert(out.end(), s.artifacts.begin(), s.artifacts.end());
    return out;
  }

  [[nodiscard]] Json to_json() const {
    Json st = Json::array();
    for (const auto& s : stages) {
      st.push_back({{"name", s.name}, {"skipped", s.skipped}, {"wall_seconds", s.wall_seconds}, {"artifacts", s.artifacts}});
    }
    return {{"config_hash", config_hash}, {"format_version", format_version}, {"config", "config.json"}, {"stages", st}};
  }

  static RunManifest from_json(const Json& j) {
    RunManifest m;
    m.config_hash = j.at("config_hash").get<std::string>();
    m.format_version = j.at("format_version").get<int>();
    for (const auto& s : j.at("stages")) {
      m.stages.push_back({s.at("name").get<std::string>(), s.at("skipped").get<bool>(), s.at("wall_seconds").get<double>(),
                          s.at("artifacts").get<std::vector<std::string>>()});
    }
    return m;
  }
};

/// Runs the stages of one experiment in an output directory.
class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, fs::path out_dir, std::ostream* log = nullptr)
      : cfg_(std::move(cfg)), out_(std::move(out_dir)), log_(log), hash_(config_hash(cfg_)) {}

  [[nodiscard]] const std::string& hash() const { return hash_; }
  [[nodiscard]] const ExperimentConfig& config() const { return cfg_; }
  [[nodiscard]] const fs::path& out_dir() const { return out_; }

  /// Output files of a stage, relative to the output directory.
  [[nodiscard]] std::vector<std::string> outputs(Stage s) const {
    std::vector<std::string> o;
    switch (s) {
      case Stage::GenerateData:
        o = {"data/train_low.jsonl", "data/train_high.jsonl", "data/scenarios.json"};
        break;
      case Stage::TrainEnsemble:
        for (const char* l : kLevels) o.push_back(std::string("models/") + l + "/ensemble.ckpt");
        break;
      case Stage::TrainAleatoric:
        for (const char* l : kLevels) o.push_back(std::string("models/") + l + "/residual_cvae.ckpt");
        break;
      case Stage::TrainBaseline:
        for (const char* l : kLevels) {
          o.push_back(std::string("models/") + l + "/full_vae.ckpt");
          o.push_back(std::string("models/") + l + "/prob_mlp.ckpt");
        }
        break;
      case Stage::Forecast:
        for (const char* l : kLevels) {
          for (const char* m : kModels) {
            o.push_back(std::string("forecasts/") + l + "/" + m + ".json");
            for (int i = 0; i < exported_bundles(); ++i) o.push_back(bundle_path(l, m, i));
          }
          for (int i = 0; i < exported_bundles(); ++i) {
            o.push_back(std::string("forecasts/") + l + "/residual-vae_decomposition_" + std::to_string(i) + ".csv");
          }
        }
        break;
      case Stage::Evaluate:
        for (const char* l : kLevels) {
          for (const char* m : kModels) {
            o.push_back(std::string("eval/") + l + "/" + m + "_mmd.csv");
            o.push_back(std::string("eval/") + l + "/" + m + "_brier.csv");
          }
        }
        o.emplace_back("eval/metrics.json");
        break;
      case Stage::Report:
        o = {"report/brier_table.csv", "report/mmd_curves.csv", "report/summary.json"};
        break;
    }
    return o;
  }

  /// True when every output of `s` exists and carries the current hash.
  [[nodiscard]] bool up_to_date(Stage s) const {
    for (const auto& f : outputs(s)) {
      if (artifact_hash(out_ / f) != hash_) return false;
    }
    return true;
  }

  /// Runs one stage unconditionally.
  StageRecord run_stage(Stage s) {
    prepare();
    const auto t0 = std::chrono::steady_clock::now();
    say("[" + to_string(s) + "] running");
    switch (s) {
      case Stage::GenerateData: generate_data(); break;
      case Stage::TrainEnsemble: train_ensembles(); break;
      case Stage::TrainAleatoric: train_aleatoric(); break;
      case Stage::TrainBaseline: train_baselines(); break;
      case Stage::Forecast: run_forecasts(); break;
      case Stage::Evaluate: evaluate(); break;
      case Stage::Report: report(); break;
    }
    StageRecord r{to_string(s), false, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(),
                  outputs(s)};
    std::ostringstream msg;
    msg << "[" << to_string(s) << "] done in " << std::fixed << std::setprecision(1) << r.wall_seconds << " s";
    say(msg.str());
    record(r);
    return r;
  }

  /// Runs all stages in order. Stages before `from` are skipped when up to
  /// date; `from` and everything after it are recomputed. Without `from`,
  /// every up-to-date stage is skipped.
  RunManifest run_all(std::optional<Stage> from = std::nullopt) {
    prepare();
    bool force = false;
    for (Stage s : kStages) {
      if (from && s == *from) force = true;
      if (!force && up_to_date(s)) {
        say("[" + to_string(s) + "] up to date, skipped");
        StageRecord r{to_string(s), true, 0.0, outputs(s)};
        record(r);
        continue;
      }
      run_stage(s);
      force = true;
    }
    return manifest();
  }

  [[nodiscard]] RunManifest manifest() const {
    const fs::path p = out_ / "manifest.json";
    if (fs::exists(p)) {
      try {
        RunManifest m = RunManifest::from_json(detail::read_json(p));
        if (m.config_hash == hash_) return m;
      } catch (const std::exception&) {
      }
    }
    return RunManifest{hash_, kConfigVersion, {}};
  }

 private:
  ExperimentConfig cfg_;
  fs::path out_;
  std::ostream* log_;
  std::string hash_;

  void say(const std::string& msg) const {
    if (log_) *log_ << msg << std::endl;
  }

  [[nodiscard]] int exported_bundles() const { return std::min(cfg_.eval.bundle_exports, cfg_.eval.n_scenarios); }

  [[nodiscard]] static std::string bundle_path(const std::string& level, const std::string& model, int i) {
    return "forecasts/" + level + "/" + model + "_bundle_" + std::to_string(i) + ".jsonl";
  }

  [[nodiscard]] Json extra(const std::string& level = "") const {
    Json e = {{"config_hash", hash_}};
    if (!level.empty()) e["level"] = level;
    return e;
  }

  [[nodiscard]] std::string comment() const { return "config_hash=" + hash_; }

  void prepare() {
    fs::create_directories(out_);
    Json cj = trajcast::to_json(cfg_);
    detail::write_text(out_ / "config.json", cj.dump(2) + "\n");
  }

  void record(const StageRecord& r) {
    RunManifest m = manifest();
    bool replaced = false;
    for (auto& s : m.stages) {
      if (s.name == r.name) {
        s = r;
        replaced = true;
      }
    }
    if (!replaced) m.stages.push_back(r);
    std::sort(m.stages.begin(), m.stages.end(), [](const StageRecord& a, const StageRecord& b) {
      return stage_from_string(a.name) < stage_from_string(b.name);
    });
    detail::write_text(out_ / "manifest.json", m.to_json().dump(2) + "\n");
  }

  /// Path of an upstream artifact; raises StageError when it is missing or
  /// was produced under a different config.
  [[nodiscard]] fs::path require(const std::string& rel, Stage consumer) const {
    const fs::path p = out_ / rel;
    if (!fs::exists(p)) {
      throw StageError(to_string(consumer) + ": missing upstream artifact '" + rel + "'");
    }
    const auto h = artifact_hash(p);
    if (h != hash_) {
      throw StageError(to_string(consumer) + ": upstream artifact '" + rel + "' was produced under config hash " +
                       h.value_or("(none)") + ", expected " + hash_);
    }
    return p;
  }

  [[nodiscard]] TrajectoryDataset dataset(const std::string& level, Stage consumer) const {
    return read_dataset(require("data/train_" + level + ".jsonl", consumer).string()).dataset;
  }

  [[nodiscard]] std::vector<EvalScenario> scenarios(Stage consumer) const {
    const Json j = detail::read_json(require("data/scenarios.json", consumer));
    std::vector<EvalScenario> out;
    try {
      for (const auto& s : j.at("scenarios")) out.push_back(eval_scenario_from_json(s));
    } catch (const Json::exception& e) {
      throw IntegrityError("data/scenarios.json is malformed: " + std::string(e.what()));
    }
    return out;
  }

  // ---- stages ----

  void generate_data() {
    fs::create_directories(out_ / "data");
    const TrajectoryDataset low = generate_dataset(cfg_.env, cfg_.policy, cfg_.n_train_low, cfg_.data_seed);
    const TrajectoryDataset high = subset(low, static_cast<std::size_t>(cfg_.n_train_high), cfg_.env.innovation_floor);
    write_dataset((out_ / "data/train_low.jsonl").string(), low, extra("low"));
    write_dataset((out_ / "data/train_high.jsonl").string(), high, extra("high"));

    Json sc = Json::array();
    for (int i = 0; i < cfg_.eval.n_scenarios; ++i) {
      EvalScenario s = make_scenario(cfg_, static_cast<std::size_t>(i));
      label_observed(cfg_, s);
      sc.push_back(to_json(s));
    }
    detail::write_text(out_ / "data/scenarios.json",
                       Json{{"config_hash", hash_}, {"env_id", to_string(cfg_.env.env)}, {"scenarios", sc}}.dump() + "\n");
  }

  void train_ensembles() {
    for (const char* l : kLevels) {
      const TrajectoryDataset data = dataset(l, Stage::TrainEnsemble);
      fs::create_directories(out_ / "models" / l);
      const DynamicsEnsemble ens = train_ensemble(data, cfg_.ensemble, derive_seed(cfg_.model_seed, std::string("ensemble/") + l));
      save_checkpoint(ens, (out_ / "models" / l / "ensemble.ckpt").string(), extra(l));
      say(std::string("  ensemble ") + l + " trained");
    }
  }

  void train_aleatoric() {
    for (const char* l : kLevels) {
      const TrajectoryDataset data = dataset(l, Stage::TrainAleatoric);
      const DynamicsEnsemble ens =
          load_ensemble(require(std::string("models/") + l + "/ensemble.ckpt", Stage::TrainAleatoric).string());
      const ResidualCVAE cvae = train_residual_cvae(data, ens, cfg_.vae, derive_seed(cfg_.model_seed, std::string("cvae/") + l));
      save_checkpoint(cvae, (out_ / "models" / l / "residual_cvae.ckpt").string(), extra(l));
      say(std::string("  residual cvae ") + l + " trained");
    }
  }

  void train_baselines() {
    for (const char* l : kLevels) {
      const TrajectoryDataset data = dataset(l, Stage::TrainBaseline);
      fs::create_directories(out_ / "models" / l);
      const FullVAE vae = train_full_vae(data, cfg_.vae, derive_seed(cfg_.model_seed, std::string("full-vae/") + l));
      save_checkpoint(vae, (out_ / "models" / l / "full_vae.ckpt").string(), extra(l));
      const ProbMLP mlp = train_prob_mlp(data, cfg_.prob_mlp, derive_seed(cfg_.model_seed, std::string("prob-mlp/") + l));
      save_checkpoint(mlp, (out_ / "models" / l / "prob_mlp.ckpt").string(), extra(l));
      say(std::string("  baselines ") + l + " trained");
    }
  }

  struct LevelModels {
    DynamicsEnsemble ens;
    ResidualCVAE cvae;
    FullVAE fvae;
    ProbMLP mlp;
  };

  void run_forecasts() {
    const std::vector<EvalScenario> scs = scenarios(Stage::Forecast);
    std::map<std::string, LevelModels> models;
    for (const char* l : kLevels) {
      const std::string d = std::string("models/") + l + "/";
      models[l] = {load_ensemble(require(d + "ensemble.ckpt", Stage::Forecast).string()),
                   load_vae(require(d + "residual_cvae.ckpt", Stage::Forecast).string()),
                   load_vae(require(d + "full_vae.ckpt", Stage::Forecast).string()),
                   load_prob_mlp(require(d + "prob_mlp.ckpt", Stage::Forecast).string())};
      fs::create_directories(out_ / "forecasts" / l);
    }
    const auto N = static_cast<std::size_t>(cfg_.eval.n_samples);
    std::map<std::string, Json> results;
    for (const auto& sc : scs) {
      const std::vector<Trajectory> observed = observed_rollouts(cfg_, sc, static_cast<std::size_t>(cfg_.eval.n_observed));
      const ActionSource src = action_source(cfg_, sc);
      for (const char* l : kLevels) {
        const LevelModels& lm = models.at(l);
        for (const char* m : kModels) {
          const std::string key = std::string(l) + "/" + m;
          RngStream rng = RngStream(cfg_.eval.seed, fnv1a("forecast/" + key)).split(sc.index);
          ForecastBundle b;
          if (std::string(m) == "residual-vae") {
            b = forecast(lm.ens, lm.cvae, sc.scenario.s0, src, N, rng);
          } else if (std::string(m) == "full-vae") {
            b = forecast_full_vae(lm.fvae, sc.scenario.s0, src, N, rng);
          } else {
            b = forecast_prob_mlp(lm.mlp, sc.scenario.s0, src, N, rng);
          }
          const double p = outcome_probability(b, cfg_.env.env, sc.outcome);
          const MmdCurve curve = trajectory_mmd(b, observed);
          results[key].push_back({{"index", sc.index},
                                  {"probability", p},
                                  {"mmd", std::vector<double>(curve.values.data(), curve.values.data() + curve.values.size())}});
          if (static_cast<int>(sc.index) < exported_bundles()) {
            write_bundle((out_ / bundle_path(l, m, static_cast<int>(sc.index))).string(), b, 0, extra(l));
            if (std::string(m) == "residual-vae") {
              const fs::path dp = out_ / "forecasts" / l / ("residual-vae_decomposition_" + std::to_string(sc.index) + ".csv");
              write_decomposition(dp.string(), decompose_or_empty(b), comment());
            }
          }
        }
      }
      if ((sc.index + 1) % 10 == 0) say("  forecast " + std::to_string(sc.index + 1) + "/" + std::to_string(scs.size()));
    }
    for (const char* l : kLevels) {
      for (const char* m : kModels) {
        const std::string key = std::string(l) + "/" + m;
        const Json j = {{"config_hash", hash_}, {"level", l}, {"model", m}, {"n_samples", N}, {"scenarios", results[key]}};
        detail::write_text(out_ / "forecasts" / l / (std::string(m) + ".json"), j.dump() + "\n");
      }
    }
  }

  /// Decomposition of a bundle; members with fewer than two samples leave the
  /// table empty rather than failing the stage.
  static DecompositionCurve decompose_or_empty(const ForecastBundle& b) {
    try {
      return decompose(b);
    } catch (const InsufficientSamplesError&) {
      return {Mat(0, b.state_dim()), Mat(0, b.state_dim()), Mat(0, b.state_dim())};
    }
  }

  void evaluate() {
    const std::vector<EvalScenario> scs = scenarios(Stage::Evaluate);
    Json levels = Json::object();
    for (const char* l : kLevels) {
      fs::create_directories(out_ / "eval" / l);
      for (const char* m : kModels) {
        const std::string rel = std::string("forecasts/") + l + "/" + m + ".json";
        const Json f = detail::read_json(require(rel, Stage::Evaluate));
        const Json& per = f.at("scenarios");
        if (per.size() != scs.size()) throw IntegrityError(rel + " does not cover every scenario");
        Eigen::VectorXd curve;
        std::vector<std::pair<double, bool>> pairs;
        std::vector<std::size_t> labels;
        for (std::size_t i = 0; i < per.size(); ++i) {
          const auto mmd = per[i].at("mmd").get<std::vector<double>>();
          const Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(mmd.data(), static_cast<Eigen::Index>(mmd.size()));
          curve = i == 0 ? v : Eigen::VectorXd(curve + v);
          const double p = per[i].at("probability").get<double>();
          for (bool o : scs[i].outcomes) {
            pairs.emplace_back(p, o);
            labels.push_back(i);
          }
        }
        curve /= static_cast<double>(per.size());
        const BrierResult br = brier(pairs);
        write_mmd_curve((out_ / "eval" / l / (std::string(m) + "_mmd.csv")).string(), curve, comment());
        write_brier((out_ / "eval" / l / (std::string(m) + "_brier.csv")).string(), br, labels, comment());
        levels[l][m] = {{"brier", br.score},
                        {"mmd_mean", curve.mean()},
                        {"mmd_final_quarter", detail::final_quarter_mean(curve)},
                        {"mmd_curve", std::vector<double>(curve.data(), curve.data() + curve.size())}};
      }
    }
    const Json metrics = {{"config_hash", hash_},
                          {"env_id", to_string(cfg_.env.env)},
                          {"horizon", cfg_.env.horizon},
                          {"n_scenarios", scs.size()},
                          {"n_observed", cfg_.eval.n_observed},
                          {"n_samples", cfg_.eval.n_samples},
                          {"levels", levels}};
    detail::write_text(out_ / "eval/metrics.json", metrics.dump(2) + "\n");
  }

  void report() {
    const Json metrics = detail::read_json(require("eval/metrics.json", Stage::Report));
    fs::create_directories(out_ / "report");
    const Json& levels = metrics.at("levels");

    std::ostringstream bt;
    bt << "# " << comment() << "\nlevel";
    for (const char* m : kModels) bt << ',' << m;
    bt << '\n';
    for (const char* l : kLevels) {
      bt << l;
      for (const char* m : kModels) bt << ',' << detail::num(levels.at(l).at(m).at("brier").get<double>());
      bt << '\n';
    }
    detail::write_text(out_ / "report/brier_table.csv", bt.str());

    std::ostringstream mc;
    mc << "# " << comment() << "\nt";
    std::vector<std::vector<double>> series;
    for (const char* l : kLevels) {
      for (const char* m : kModels) {
        mc << ',' << m << '@' << l;
        series.push_back(levels.at(l).at(m).at("mmd_curve").get<std::vector<double>>());
      }
    }
    mc << '\n';
    for (std::size_t t = 0; t < series[0].size(); ++t) {
      mc << t + 1;
      for (const auto& s : series) mc << ',' << detail::num(s.at(t));
      mc << '\n';
    }
    detail::write_text(out_ / "report/mmd_curves.csv", mc.str());

    Json brier_tab = Json::object(), mmd_fq = Json::object(), mmd_mean = Json::object();
    for (const char* l : kLevels) {
      for (const char* m : kModels) {
        brier_tab[l][m] = levels.at(l).at(m).at("brier");
        mmd_fq[l][m] = levels.at(l).at(m).at("mmd_final_quarter");
        mmd_mean[l][m] = levels.at(l).at(m).at("mmd_mean");
      }
    }
    const Json summary = {{"config_hash", hash_},
                          {"format_version", kConfigVersion},
                          {"env_id", metrics.at("env_id")},
                          {"horizon", metrics.at("horizon")},
                          {"n_scenarios", metrics.at("n_scenarios")},
                          {"brier", brier_tab},
                          {"mmd_final_quarter", mmd_fq},
                          {"mmd_mean", mmd_mean}};
    detail::write_text(out_ / "report/summary.json", summary.dump(2) + "\n");
  }
};

/// Runs every stage of `cfg` in `cfg.output_dir`.
inline RunManifest run_pipeline(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  Pipeline p(cfg, cfg.output_dir, log);
  return p.run_all();
}

}  // namespace trajcast
