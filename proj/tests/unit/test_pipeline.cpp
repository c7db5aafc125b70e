// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "trajcast/models/checkpoint.hpp"
#include "trajcast/pipeline/pipeline.hpp"

namespace trajcast {
namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::path(::testing::TempDir()) / ("trajcast_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

ExperimentConfig smoke_config(const fs::path& out) {
  ExperimentConfig c = load_config(std::string(TRAJCAST_SOURCE_DIR) + "/configs/smoke.json");
  c.output_dir = out.string();
  return c;
}

TEST(Config, JsonRoundTrip) {
  for (EnvKind k : {EnvKind::PusherLite, EnvKind::DroneLite, EnvKind::LinearToy}) {
    const ExperimentConfig c = default_experiment_config(k);
    const Json j = to_json(c);
    EXPECT_EQ(to_json(config_from_json(j)), j);
    EXPECT_EQ(config_hash(config_from_json(j)), config_hash(c));
  }
}

TEST(Config, OutputDirDoesNotChangeHash) {
  ExperimentConfig a = default_experiment_config(EnvKind::DroneLite), b = a;
  b.output_dir = "elsewhere";
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.eval.n_samples += 1;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, FiveFoldDataRatioIsRejected) {
  const Json j = {{"data", {{"n_train_low", 100}, {"n_train_high", 20}}}};
  try {
    (void)config_from_json(j);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("10 x"), std::string::npos) << e.what();
  }
}

TEST(Config, EnumeratesEveryViolation) {
  const Json j = {{"data", {{"n_train_low", 100}, {"n_train_high", 20}}},
                  {"eval", {{"n_samples", 0}}},
                  {"bogus", 1}};
  try {
    (void)config_from_json(j);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_EQ(msg.rfind("3 config violation(s): ", 0), 0u) << msg;
    EXPECT_NE(msg.find("n_samples"), std::string::npos);
    EXPECT_NE(msg.find("bogus"), std::string::npos);
  }
}

TEST(Config, SmokeFileLoads) {
  const ExperimentConfig c = smoke_config("x");
  EXPECT_EQ(c.env.env, EnvKind::PusherLite);
  EXPECT_EQ(c.n_train_low, 10 * c.n_train_high);
}

struct Models {
  TrajectoryDataset data;
  DynamicsEnsemble ens;
  ResidualCVAE cvae;
  FullVAE full;
  ProbMLP mlp;
};

Models small_models() {
  const EnvConfig cfg = testing::linear_env(0.1, 8);
  Models m;
  m.data = generate_dataset(cfg, default_policy_config(cfg.env), 10, 3);
  EnsembleTrainConfig ec;
  ec.members = 2;
  ec.hidden = 5;
  ec.epochs = 2;
  ec.min_steps = 0;
  m.ens = train_ensemble(m.data, ec, 1);
  VaeTrainConfig vc;
  vc.hidden = 5;
  vc.latent_dim = 2;
  vc.epochs = 2;
  vc.min_steps = 0;
  m.cvae = train_residual_cvae(m.data, m.ens, vc, 1);
  m.full = train_full_vae(m.data, vc, 1);
  ProbMlpTrainConfig pc;
  pc.widths = {8};
  pc.epochs = 2;
  pc.min_steps = 0;
  m.mlp = train_prob_mlp(m.data, pc, 1);
  return m;
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const Models m = small_models();
  const fs::path dir = fresh_dir("ckpt");
  fs::create_directories(dir);
  save_checkpoint(m.ens, (dir / "e.ckpt").string());
  save_checkpoint(m.cvae, (dir / "c.ckpt").string());
  save_checkpoint(m.full, (dir / "f.ckpt").string());
  save_checkpoint(m.mlp, (dir / "p.ckpt").string());
  const DynamicsEnsemble e = load_ensemble((dir / "e.ckpt").string());
  const SequenceVae c = load_vae((dir / "c.ckpt").string());
  const SequenceVae f = load_vae((dir / "f.ckpt").string());
  const ProbMLP p = load_prob_mlp((dir / "p.ckpt").string());
  ASSERT_EQ(e.size(), m.ens.size());
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_TRUE(e.members[i] == m.ens.members[i]);
  EXPECT_TRUE(e.normalization == m.ens.normalization);
  EXPECT_TRUE(c.encoder == m.cvae.encoder && c.decoder == m.cvae.decoder);
  EXPECT_EQ(c.kind, VaeKind::Residual);
  EXPECT_EQ(f.kind, VaeKind::Full);
  EXPECT_EQ(c.beta, m.cvae.beta);
  EXPECT_TRUE(p.params == m.mlp.params);

  const Vec s0 = m.data.trajectories[0].states.row(0).transpose();
  const Mat& actions = m.data.trajectories[0].actions;
  RngStream r1(3, 3), r2(3, 3);
  const ForecastBundle a = forecast(m.ens, m.cvae, s0, actions, 16, r1);
  const ForecastBundle b = forecast(e, c, s0, actions, 16, r2);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.forecasts[i], b.forecasts[i]);
  RngStream r3(4, 4), r4(4, 4);
  EXPECT_EQ(prob_mlp_rollout(m.mlp, s0, actions, r3), prob_mlp_rollout(p, s0, actions, r4));
}

TEST(Checkpoint, VersionBumpIsRejected) {
  const Models m = small_models();
  const fs::path dir = fresh_dir("ckpt_version");
  fs::create_directories(dir);
  const fs::path p = dir / "e.ckpt";
  save_checkpoint(m.ens, p.string());
  std::string bytes = slurp(p);
  const std::string key = "\"format_version\":1";
  const auto at = bytes.find(key);
  ASSERT_NE(at, std::string::npos);
  bytes.replace(at, key.size(), "\"format_version\":2");
  std::ofstream(p, std::ios::binary | std::ios::trunc) << bytes;
  EXPECT_THROW((void)load_ensemble(p.string()), UnsupportedVersionError);
}

TEST(Checkpoint, TruncationAndCorruptionAreRejected) {
  const Models m = small_models();
  const fs::path dir = fresh_dir("ckpt_trunc");
  fs::create_directories(dir);
  const fs::path p = dir / "p.ckpt";
  save_checkpoint(m.mlp, p.string());
  const std::string bytes = slurp(p);
  std::ofstream(p, std::ios::binary | std::ios::trunc) << bytes.substr(0, bytes.size() - 5);
  EXPECT_THROW((void)load_prob_mlp(p.string()), IntegrityError);
  std::string flipped = bytes;
  flipped[flipped.size() - 3] ^= 0x10;
  std::ofstream(p, std::ios::binary | std::ios::trunc) << flipped;
  EXPECT_THROW((void)load_prob_mlp(p.string()), IntegrityError);
  std::ofstream(p, std::ios::binary | std::ios::trunc) << bytes;
  EXPECT_THROW((void)load_ensemble(p.string()), ConfigError);
}

TEST(Pipeline, SmokeRunWritesReports) {
  const fs::path out = fresh_dir("smoke_reports");
  const RunManifest man = run_pipeline(smoke_config(out));
  for (const auto& a : man.artifacts()) EXPECT_TRUE(fs::exists(out / a)) << a;
  EXPECT_EQ(man.stages.size(), kStages.size());

  std::ifstream bt(out / "report/brier_table.csv");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(bt, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[1], "level,residual-vae,full-vae,prob-mlp");
  EXPECT_EQ(lines[2].rfind("low,", 0), 0u);
  EXPECT_EQ(lines[3].rfind("high,", 0), 0u);

  std::ifstream mc(out / "report/mmd_curves.csv");
  std::getline(mc, line);
  std::getline(mc, line);
  EXPECT_EQ(std::count(line.begin(), line.end(), ','), 6);
  int rows = 0;
  while (std::getline(mc, line)) ++rows;
  EXPECT_EQ(rows, 30);

  const Json summary = Json::parse(slurp(out / "report/summary.json"));
  EXPECT_EQ(summary.at("config_hash").get<std::string>(), config_hash(smoke_config(out)));
}

TEST(Pipeline, RerunIsByteIdentical) {
  const fs::path a = fresh_dir("smoke_a"), b = fresh_dir("smoke_b");
  (void)run_pipeline(smoke_config(a));
  (void)run_pipeline(smoke_config(b));
  for (const char* f : {"report/brier_table.csv", "report/mmd_curves.csv", "report/summary.json", "eval/metrics.json"}) {
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
}

TEST(Pipeline, ResumeAfterDeletingEvalReproducesReports) {
  const fs::path out = fresh_dir("smoke_resume");
  const ExperimentConfig cfg = smoke_config(out);
  (void)run_pipeline(cfg);
  const std::string before = slurp(out / "report/summary.json");
  fs::remove_all(out / "eval");
  Pipeline p(cfg, out);
  const RunManifest man = p.run_all();
  for (const auto& s : man.stages) {
    const bool upstream = stage_from_string(s.name) < Stage::Evaluate;
    EXPECT_EQ(s.skipped, upstream) << s.name;
  }
  EXPECT_EQ(slurp(out / "report/summary.json"), before);
}

TEST(Pipeline, MissingUpstreamNamesArtifact) {
  const fs::path out = fresh_dir("smoke_missing");
  Pipeline p(smoke_config(out), out);
  (void)p.run_stage(Stage::GenerateData);
  try {
    (void)p.run_stage(Stage::Forecast);
    FAIL() << "expected StageError";
  } catch (const StageError& e) {
    EXPECT_NE(std::string(e.what()).find("models/low/ensemble.ckpt"), std::string::npos) << e.what();
  }
}

TEST(Pipeline, ReportWithoutEvalFails) {
  const fs::path out = fresh_dir("smoke_noeval");
  Pipeline p(smoke_config(out), out);
  EXPECT_THROW((void)p.run_stage(Stage::Report), StageError);
}

TEST(Pipeline, StaleArtifactFromOtherConfigIsRejected) {
  const fs::path out = fresh_dir("smoke_stale");
  ExperimentConfig cfg = smoke_config(out);
  Pipeline(cfg, out).run_stage(Stage::GenerateData);
  cfg.eval.n_samples += 1;
  Pipeline p(cfg, out);
  EXPECT_FALSE(p.up_to_date(Stage::GenerateData));
  EXPECT_THROW((void)p.run_stage(Stage::TrainEnsemble), StageError);
}

}  // namespace
}  // namespace trajcast
