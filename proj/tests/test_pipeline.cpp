#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "xferepi/config.hpp"
#include "xferepi/pipeline.hpp"

using namespace xferepi;
namespace fs = std::filesystem;

namespace {

constexpr const char* kTinyJson = R"({
  "master_seed": 7,
  "simulation": {
    "population": 2000, "initial_infected": 10, "steps": 60, "replicates": 2,
    "source": {"beta": 0.191, "gamma": 0.05, "zeta": 0.008, "mu": 0.0294},
    "target_betas": [0.3], "target_gammas": [0.1]
  },
  "windows": {"lags": 9, "horizons": [2, 3], "max_horizon": 3, "cutoffs": [15, 40]},
  "forest": {"trees": 5},
  "network": {"hidden": [8], "epochs": 5, "batch": 32},
  "boost": {"rounds": 2, "decay_steps": 1, "cv_folds": 2, "cv_rounds": 1, "cv_trees": 2},
  "finetune": {"epochs": 2}
})";

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "xferepi_pipeline_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

config::ExperimentConfig tiny_config(const fs::path& out_dir) {
  config::ConfigParse parsed = config::parse_config_text(kTinyJson);
  if (!parsed.ok()) throw std::runtime_error("tiny config invalid: " + parsed.diagnostics[0]);
  parsed.config.out_dir = out_dir.string();
  return parsed.config;
}

struct RunResult {
  int code = -1;
  std::string log;
  std::string err;
};

RunResult run(const config::ExperimentConfig& cfg, const std::string& subcommand,
              bool force = false) {
  std::ostringstream out, err;
  RunResult r;
  r.code = pipeline::run(cfg, subcommand, force, out, err);
  r.log = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::size_t data_rows(const fs::path& csv) {
  std::ifstream in(csv);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++n;
  return n == 0 ? 0 : n - 1;  // minus header
}

}  // namespace

TEST(Pipeline, EndToEndProducesAllReports) {
  fs::path dir = fresh_dir("e2e");
  RunResult r = run(tiny_config(dir), "all");
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* rel : {"report/errors.csv", "report/best_models.csv",
                          "report/similarity.csv", "report/pmae_summary.csv",
                          "report/summary.txt", "run.json"})
    EXPECT_TRUE(fs::exists(dir / rel)) << rel;
  // 7 regimes x 2 test cities x 2 horizons x 2 cutoffs
  EXPECT_EQ(data_rows(dir / "report/errors.csv"), 56u);
  // one frequency row per (horizon, cutoff, regime)
  EXPECT_EQ(data_rows(dir / "report/best_models.csv"), 28u);
  EXPECT_EQ(data_rows(dir / "report/similarity.csv"), 1u);
}

TEST(Pipeline, SecondRunSkipsEveryStage) {
  fs::path dir = fresh_dir("skip");
  config::ExperimentConfig cfg = tiny_config(dir);
  ASSERT_EQ(run(cfg, "all").code, 0);
  std::string manifest_before = slurp(dir / "run.json");

  RunResult again = run(cfg, "all");
  ASSERT_EQ(again.code, 0);
  for (const char* stage : {"simulate", "prepare", "train", "evaluate", "report"})
    EXPECT_NE(again.log.find(std::string("stage ") + stage + ": up to date, skipped"),
              std::string::npos)
        << again.log;
  EXPECT_EQ(slurp(dir / "run.json"), manifest_before);

  RunResult forced = run(cfg, "all", true);
  ASSERT_EQ(forced.code, 0);
  EXPECT_EQ(forced.log.find("skipped"), std::string::npos) << forced.log;
}

TEST(Pipeline, ReportsAreByteIdenticalAcrossDirsAndThreadCounts) {
  fs::path a = fresh_dir("det_a");
  fs::path b = fresh_dir("det_b");
  config::ExperimentConfig cfg_a = tiny_config(a);
  config::ExperimentConfig cfg_b = tiny_config(b);
  cfg_b.jobs = 3;
  ASSERT_EQ(run(cfg_a, "all").code, 0);
  ASSERT_EQ(run(cfg_b, "all").code, 0);
  for (const char* rel : {"report/errors.csv", "report/best_models.csv",
                          "report/similarity.csv", "report/pmae_summary.csv",
                          "report/summary.txt"})
    EXPECT_EQ(slurp(a / rel), slurp(b / rel)) << rel;
}

TEST(Pipeline, CorruptedArtifactIsRebuilt) {
  fs::path dir = fresh_dir("corrupt");
  config::ExperimentConfig cfg = tiny_config(dir);
  ASSERT_EQ(run(cfg, "all").code, 0);
  std::string good = slurp(dir / "eval/records.csv");

  std::ofstream(dir / "eval/records.csv", std::ios::binary) << "regime\ngarbage\n";
  RunResult r = run(cfg, "evaluate");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.log.find("skipped"), std::string::npos) << r.log;
  EXPECT_EQ(slurp(dir / "eval/records.csv"), good);
}

TEST(Pipeline, CorruptedManifestRerunsEverything) {
  fs::path dir = fresh_dir("badmanifest");
  config::ExperimentConfig cfg = tiny_config(dir);
  ASSERT_EQ(run(cfg, "all").code, 0);
  std::ofstream(dir / "run.json", std::ios::binary) << "{ not json";
  RunResult r = run(cfg, "all");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.log.find("skipped"), std::string::npos) << r.log;
}

TEST(Pipeline, SingleStageWithoutUpstreamFails) {
  fs::path dir = fresh_dir("noupstream");
  RunResult r = run(tiny_config(dir), "train");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("needs artifacts of stage 'simulate'"), std::string::npos) << r.err;
}

TEST(Pipeline, UpstreamConfigChangeDetected) {
  fs::path dir = fresh_dir("stale");
  config::ExperimentConfig cfg = tiny_config(dir);
  ASSERT_EQ(run(cfg, "all").code, 0);

  config::ExperimentConfig changed = cfg;
  changed.forest.n_trees += 1;
  changed.boost.forest = changed.forest;
  RunResult single = run(changed, "evaluate");
  EXPECT_EQ(single.code, 3);
  EXPECT_NE(single.err.find("needs artifacts of stage 'train'"), std::string::npos) << single.err;

  RunResult all = run(changed, "all");
  ASSERT_EQ(all.code, 0) << all.err;
  EXPECT_NE(all.log.find("stage simulate: up to date, skipped"), std::string::npos) << all.log;
  EXPECT_NE(all.log.find("stage prepare: up to date, skipped"), std::string::npos) << all.log;
  EXPECT_EQ(all.log.find("stage train: up to date, skipped"), std::string::npos) << all.log;
}

TEST(Pipeline, ManifestCoversEveryFileExactlyOnce) {
  fs::path dir = fresh_dir("manifest");
  config::ExperimentConfig cfg = tiny_config(dir);
  ASSERT_EQ(run(cfg, "all").code, 0);

  pipeline::Manifest m = pipeline::load_manifest(dir / "run.json");
  std::map<std::string, int> claims;
  for (const auto& [stage, entry] : m.stages)
    for (const auto& [rel, hash] : entry.artifacts) ++claims[rel];
  for (const auto& [rel, n] : claims) EXPECT_EQ(n, 1) << rel << " claimed by " << n << " stages";

  std::size_t on_disk = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string rel = fs::relative(e.path(), dir).generic_string();
    if (rel == "run.json") continue;
    ++on_disk;
    EXPECT_TRUE(claims.count(rel)) << "orphan file " << rel;
  }
  EXPECT_EQ(on_disk, claims.size());
}

TEST(Pipeline, SourceOnlyModelsRecordTheirPurity) {
  fs::path dir = fresh_dir("purity");
  config::ExperimentConfig cfg = tiny_config(dir);
  ASSERT_EQ(run(cfg, "train").code, 3);  // no upstream yet
  ASSERT_EQ(run(cfg, "all").code, 0);

  auto sidecar = [&](const std::string& rel) {
    return nlohmann::json::parse(slurp(dir / rel));
  };
  nlohmann::json net = sidecar("models/nn_no_transfer_h2.json");
  ASSERT_TRUE(net["rows_per_disease"].is_object());
  EXPECT_EQ(net["rows_per_disease"].size(), 1u);
  EXPECT_TRUE(net["rows_per_disease"].contains("source"));
  EXPECT_EQ(net["scale_policy"], "per_series");

  nlohmann::json rf = sidecar("models/rf_no_transfer_h2.json");
  EXPECT_EQ(rf["rows_per_disease"].size(), 1u);
  EXPECT_TRUE(rf["rows_per_disease"].contains("source"));
  EXPECT_EQ(rf["scale_policy"], "raw");

  nlohmann::json tr = sidecar("models/nn_transfer_beta0.3_gamma0.1_h2_c15.json");
  EXPECT_EQ(tr["rows_per_disease"].size(), 1u);
  EXPECT_TRUE(tr["rows_per_disease"].contains("beta0.3_gamma0.1"));
  EXPECT_EQ(tr["scale_policy"], "source_median");
  EXPECT_GT(tr["scale_constant"].get<double>(), 0.0);

  nlohmann::json boost = sidecar("models/rf_tradaboost_beta0.3_gamma0.1_h2_c15.json");
  EXPECT_EQ(boost["rows_per_disease"].size(), 2u);
}

TEST(Pipeline, SeedStreamsUnaffectedByRegimeList) {
  fs::path full = fresh_dir("streams_full");
  fs::path solo = fresh_dir("streams_solo");
  config::ExperimentConfig cfg_full = tiny_config(full);
  config::ExperimentConfig cfg_solo = tiny_config(solo);
  cfg_solo.regimes = {"rf_baseline", "nn_baseline"};
  ASSERT_EQ(run(cfg_full, "all").code, 0);
  ASSERT_EQ(run(cfg_solo, "all").code, 0);
  for (const char* rel : {"models/rf_baseline_beta0.3_gamma0.1_h2.model",
                          "models/nn_baseline_beta0.3_gamma0.1_h2.model"})
    EXPECT_EQ(slurp(full / rel), slurp(solo / rel)) << rel;
}

TEST(Pipeline, SimilarityOnlyRunNeedsNoModels) {
  fs::path dir = fresh_dir("simonly");
  config::ExperimentConfig cfg = tiny_config(dir);
  cfg.regimes.clear();
  RunResult r = run(cfg, "all");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_FALSE(fs::exists(dir / "models"));
  EXPECT_EQ(data_rows(dir / "eval/records.csv"), 0u);
  EXPECT_EQ(data_rows(dir / "report/similarity.csv"), 1u);

  pipeline::Manifest m = pipeline::load_manifest(dir / "run.json");
  EXPECT_TRUE(m.stages.at("train").artifacts.empty());
  EXPECT_TRUE(m.stages.at("prepare").artifacts.empty());
}

TEST(Pipeline, ObservedSeriesEndToEnd) {
  fs::path dir = fresh_dir("observed");
  fs::path src_csv = dir / "source_cities.csv";
  fs::path tgt_csv = dir / "target_cities.csv";
  {
    std::ofstream s(src_csv), t(tgt_csv);
    s << "city,week,cases\n";
    t << "city,week,cases\n";
    auto wave = [](int w, int shift) {
      double x = w - 12 - shift;
      return 40.0 * std::exp(-x * x / 30.0) + (w % 3);
    };
    for (const char* city : {"sa", "sb"})
      for (int w = 0; w < 30; ++w)
        s << city << ',' << w << ',' << wave(w, city[1] == 'a' ? 0 : 2) << "\n";
    for (const char* city : {"ta", "tb", "tc", "td"})
      for (int w = 0; w < 30; ++w)
        t << city << ',' << w << ',' << wave(w, (city[1] - 'a') % 3) << "\n";
  }

  config::ConfigParse parsed = config::parse_config_text(R"({
    "master_seed": 3,
    "observed": {"source_csv": "SRC", "target_csv": "TGT"},
    "windows": {"lags": 4, "horizons": [2], "max_horizon": 2, "cutoffs": [10]},
    "forest": {"trees": 4},
    "network": {"hidden": [4], "epochs": 3, "batch": 16},
    "boost": {"rounds": 2, "decay_steps": 1, "cv_folds": 2, "cv_rounds": 1, "cv_trees": 2},
    "finetune": {"epochs": 2}
  })");
  ASSERT_TRUE(parsed.ok());
  config::ExperimentConfig cfg = parsed.config;
  cfg.out_dir = (dir / "run").string();
  cfg.observed.source_csv = src_csv.string();
  cfg.observed.target_csv = tgt_csv.string();

  RunResult r = run(cfg, "all");
  ASSERT_EQ(r.code, 0) << r.err;
  // 7 regimes x 2 held-out cities x 1 horizon x 1 cutoff
  EXPECT_EQ(data_rows(dir / "run/report/errors.csv"), 14u);
  EXPECT_EQ(data_rows(dir / "run/report/similarity.csv"), 0u);

  nlohmann::json coverage = nlohmann::json::parse(slurp(dir / "run/eval/coverage.json"));
  bool noted = false;
  for (const auto& w : coverage["warnings"])
    if (w.get<std::string>().find("similarity map skipped") != std::string::npos) noted = true;
  EXPECT_TRUE(noted) << coverage.dump();
}

TEST(Pipeline, StageSignaturesChainUpstreamChanges) {
  config::ExperimentConfig a = tiny_config("unused");
  config::ExperimentConfig b = a;
  b.master_seed = 8;
  EXPECT_NE(pipeline::simulate_signature(a), pipeline::simulate_signature(b));
  EXPECT_NE(pipeline::report_signature(a), pipeline::report_signature(b));

  config::ExperimentConfig c = a;
  c.train.epochs += 1;
  EXPECT_EQ(pipeline::prepare_signature(a), pipeline::prepare_signature(c));
  EXPECT_NE(pipeline::train_signature(a), pipeline::train_signature(c));

  config::ExperimentConfig d = a;
  d.out_dir = "elsewhere";
  d.jobs = 5;
  EXPECT_EQ(pipeline::report_signature(a), pipeline::report_signature(d));
}
