// SPDX-License-Identifier: Apache-2.0
// Command-line driver for the experiment pipeline.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "trajcast/pipeline/pipeline.hpp"

namespace {

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string stage;
  std::string env = "pusher-lite";
  bool quiet = false;
};

void fail(const std::string& category, std::string msg) {
  std::replace(msg.begin(), msg.end(), '\n', ' ');
  std::cerr << "error: " << category << ": " << msg << '\n';
}

/// Config from --config, else the one persisted in the output directory,
/// else the pusher-lite defaults. --out and --seed are applied last.
trajcast::ExperimentConfig resolve(const Options& o) {
  trajcast::ExperimentConfig cfg;
  if (!o.config.empty()) {
    cfg = trajcast::load_config(o.config);
  } else if (!o.out.empty() && std::filesystem::exists(std::filesystem::path(o.out) / "config.json")) {
    cfg = trajcast::load_config((std::filesystem::path(o.out) / "config.json").string());
  } else {
    cfg = trajcast::default_experiment_config(trajcast::EnvKind::PusherLite);
  }
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (o.seed) trajcast::override_seeds(cfg, *o.seed);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trajectory forecasting with separated epistemic and aleatoric uncertainty"};
  app.require_subcommand(1);
  Options o;

  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Experiment config (JSON)");
    sub->add_option("--out", o.out, "Output directory (overrides output_dir)");
    sub->add_option("--seed", o.seed, "Replace every seed in the config");
    sub->add_flag("--quiet", o.quiet, "No progress output");
  };

  std::vector<std::pair<CLI::App*, trajcast::Stage>> stage_cmds;
  for (trajcast::Stage s : trajcast::kStages) {
    CLI::App* sub = app.add_subcommand(trajcast::to_string(s), "Run the " + trajcast::to_string(s) + " stage");
    common(sub);
    stage_cmds.emplace_back(sub, s);
  }
  // The baseline stage also answers to the plural spelling.
  stage_cmds[3].first->alias("train-baselines");
  stage_cmds[0].first->alias("generate");

  CLI::App* run_all = app.add_subcommand("run-all", "Run every stage, skipping those already up to date");
  common(run_all);
  run_all->add_option("--stage", o.stage, "Recompute from this stage onward");

  CLI::App* defaults = app.add_subcommand("default-config", "Print the default config of an environment");
  defaults->add_option("--env", o.env, "pusher-lite, drone-lite or linear-toy");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    fail("usage", e.what());
    return 2;
  }

  try {
    if (defaults->parsed()) {
      std::cout << trajcast::to_json(trajcast::default_experiment_config(trajcast::env_kind_from_string(o.env))).dump(2)
                << '\n';
      return 0;
    }
    const trajcast::ExperimentConfig cfg = resolve(o);
    trajcast::Pipeline pipeline(cfg, cfg.output_dir, o.quiet ? nullptr : &std::cerr);
    if (run_all->parsed()) {
      std::optional<trajcast::Stage> from;
      if (!o.stage.empty()) from = trajcast::stage_from_string(o.stage);
      pipeline.run_all(from);
    } else {
      for (const auto& [sub, s] : stage_cmds) {
        if (sub->parsed()) pipeline.run_stage(s);
      }
    }
    std::cout << (std::filesystem::path(cfg.output_dir) / "manifest.json").string() << '\n';
    return 0;
  } catch (const trajcast::Error& e) {
    fail(e.category(), e.what());
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    fail("io", e.what());
    return 1;
  } catch (const std::exception& e) {
    fail("internal", e.what());
    return 1;
  }
}
