#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "../../vendor/json.hpp"
#include "xferepi/config.hpp"
#include "xferepi/csv.hpp"
#include "xferepi/datasets.hpp"
#include "xferepi/evaluate.hpp"
#include "xferepi/forest.hpp"
#include "xferepi/hash.hpp"
#include "xferepi/neural.hpp"
#include "xferepi/parallel.hpp"
#include "xferepi/rng.hpp"
#include "xferepi/series.hpp"
#include "xferepi/simcore.hpp"
#include "xferepi/transfer.hpp"

namespace xferepi::pipeline {

inline constexpr const char* kToolVersion = "xferepi 1.0.0";

/// Stage order is fixed; each stage consumes only artifacts of earlier ones.
inline const std::vector<std::string>& stage_order() {
  static const std::vector<std::string> names{"simulate", "prepare", "train", "evaluate",
                                              "report"};
  return names;
}

class PipelineError : public std::runtime_error {
 public:
  PipelineError(int exit_code, const std::string& msg)
      : std::runtime_error(msg), exit_code_(exit_code) {}

  int exit_code() const { return exit_code_; }

 private:
  int exit_code_;
};

// ---------------------------------------------------------------------------
// Stage signatures: canonical strings over the config fields a stage depends
// on, chained so any upstream change invalidates everything downstream.
// out_dir and jobs are excluded; they change placement and speed, not content.
// ---------------------------------------------------------------------------

namespace detail {

inline void put(std::string& sig, const std::string& v) {
  sig += v;
  sig += '|';
}

inline void put(std::string& sig, double v) { put(sig, util::format_double(v)); }
inline void put(std::string& sig, std::int64_t v) { put(sig, util::format_int(v)); }
inline void put(std::string& sig, int v) { put(sig, util::format_int(v)); }
inline void put(std::string& sig, bool v) { put(sig, std::string(v ? "1" : "0")); }
inline void put(std::string& sig, std::uint64_t v) { put(sig, util::to_hex(v)); }

template <typename T>
inline void put_list(std::string& sig, const std::vector<T>& v) {
  put(sig, static_cast<std::int64_t>(v.size()));
  for (const T& e : v) put(sig, e);
}

}  // namespace detail

inline std::string simulate_signature(const config::ExperimentConfig& c) {
  using detail::put;
  std::string sig;
  put(sig, std::string(kToolVersion));
  put(sig, std::string("simulate"));
  put(sig, c.master_seed);
  if (c.observed.enabled) {
    put(sig, std::string("observed"));
    put(sig, util::to_hex(util::fnv1a64_file(c.observed.source_csv)));
    put(sig, util::to_hex(util::fnv1a64_file(c.observed.target_csv)));
    put(sig, c.observed.source_label);
    put(sig, c.observed.target_label);
    put(sig, c.observed.gap_fill == datasets::GapFill::zero ? std::string("zero")
                                                            : std::string("interpolate"));
    put(sig, c.observed.daily);
    put(sig, c.observed.split_fraction);
    return sig;
  }
  put(sig, c.sim.population);
  put(sig, c.sim.initial_infected);
  put(sig, c.sim.t_max);
  put(sig, c.sim.replicates);
  put(sig, c.sim.form == simcore::ProbabilityForm::event_rate ? std::string("event_rate")
                                                              : std::string("literal_survival"));
  put(sig, c.sim.record_prevalence);
  put(sig, c.source.beta);
  put(sig, c.source.gamma);
  put(sig, c.source.zeta);
  put(sig, c.source.mu);
  detail::put_list(sig, c.target_betas);
  detail::put_list(sig, c.target_gammas);
  return sig;
}

inline std::string prepare_signature(const config::ExperimentConfig& c) {
  using detail::put;
  std::string sig = simulate_signature(c);
  put(sig, std::string("prepare"));
  put(sig, c.regimes.empty());
  put(sig, c.window.lags);
  detail::put_list(sig, c.window.horizons);
  put(sig, c.window.max_horizon);
  return sig;
}

inline std::string train_signature(const config::ExperimentConfig& c) {
  using detail::put;
  std::string sig = prepare_signature(c);
  put(sig, std::string("train"));
  detail::put_list(sig, c.regimes);
  detail::put_list(sig, c.cutoffs);
  put(sig, c.forest.n_trees);
  put(sig, c.forest.max_features);
  put(sig, c.forest.min_samples_leaf);
  put(sig, c.forest.max_depth);
  put(sig, c.forest.bootstrap);
  put(sig, static_cast<std::int64_t>(c.forest.bootstrap_draws));
  detail::put_list(sig, c.net.hidden);
  put(sig, c.net.activation == neural::Activation::relu ? std::string("relu")
                                                        : std::string("tanh"));
  put(sig, c.train.learning_rate);
  put(sig, c.train.epochs);
  put(sig, c.train.batch);
  put(sig, c.train.patience);
  put(sig, c.train.val_fraction);
  put(sig, c.train.lr_decay);
  put(sig, c.boost.rounds);
  put(sig, c.boost.decay_steps);
  put(sig, c.boost.cv_folds);
  put(sig, c.boost.cv_rounds);
  put(sig, c.boost.cv_trees);
  put(sig, c.boost.two_stage);
  put(sig, c.finetune.learning_rate);
  put(sig, c.finetune.epochs);
  put(sig, c.finetune.batch);
  return sig;
}

inline std::string evaluate_signature(const config::ExperimentConfig& c) {
  std::string sig = train_signature(c);
  detail::put(sig, std::string("evaluate"));
  return sig;
}

inline std::string report_signature(const config::ExperimentConfig& c) {
  std::string sig = evaluate_signature(c);
  detail::put(sig, std::string("report"));
  return sig;
}

inline std::string stage_signature(const config::ExperimentConfig& c, const std::string& stage) {
  if (stage == "simulate") return simulate_signature(c);
  if (stage == "prepare") return prepare_signature(c);
  if (stage == "train") return train_signature(c);
  if (stage == "evaluate") return evaluate_signature(c);
  if (stage == "report") return report_signature(c);
  throw std::invalid_argument("unknown stage: " + stage);
}

// ---------------------------------------------------------------------------
// Manifest: one entry per stage with its signature, wall time, and every
// artifact path with a content hash. A stage is current when its signature
// matches and every artifact re-hashes to the recorded value.
// ---------------------------------------------------------------------------

struct StageEntry {
  std::string signature;
  double wall_seconds = 0.0;
  std::map<std::string, std::string> artifacts;  // relative path -> content hash
};

struct Manifest {
  std::string tool = kToolVersion;
  std::string config_hash;
  std::map<std::string, StageEntry> stages;
};

inline Manifest load_manifest(const std::filesystem::path& path) {
  Manifest m;
  std::ifstream in(path);
  if (!in) return m;
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return m;
  m.tool = j.value("tool", "");
  m.config_hash = j.value("config_hash", "");
  if (auto it = j.find("stages"); it != j.end() && it->is_object()) {
    for (auto s = it->begin(); s != it->end(); ++s) {
      if (!s.value().is_object()) continue;
      StageEntry e;
      e.signature = s.value().value("signature", "");
      e.wall_seconds = s.value().value("wall_seconds", 0.0);
      if (auto a = s.value().find("artifacts"); a != s.value().end() && a->is_object())
        for (auto f = a->begin(); f != a->end(); ++f)
          if (f.value().is_string()) e.artifacts[f.key()] = f.value().get<std::string>();
      m.stages[s.key()] = std::move(e);
    }
  }
  return m;
}

inline void save_manifest(const std::filesystem::path& path, const Manifest& m) {
  nlohmann::json j;
  j["tool"] = m.tool;
  j["config_hash"] = m.config_hash;
  j["stages"] = nlohmann::json::object();
  for (const auto& [name, e] : m.stages) {
    nlohmann::json s;
    s["signature"] = e.signature;
    s["wall_seconds"] = e.wall_seconds;
    s["artifacts"] = nlohmann::json::object();
    for (const auto& [rel, hash] : e.artifacts) s["artifacts"][rel] = hash;
    j["stages"][name] = std::move(s);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw PipelineError(4, "cannot write manifest: " + path.string());
  out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Run context and artifact helpers.
// ---------------------------------------------------------------------------

struct RunContext {
  config::ExperimentConfig cfg;
  std::filesystem::path out;
  int jobs = 1;
  bool force = false;
  std::ostream* log = nullptr;
  Manifest manifest;

  void say(const std::string& msg) const {
    if (log) (*log) << msg << "\n";
  }
};

namespace detail {

inline std::string disease_dir_name(const std::string& label) { return label; }

inline std::string series_rel(const std::string& label, bool test) {
  return "series/" + label + (test ? "_test.csv" : "_train.csv");
}

inline std::string windows_rel(const std::string& label, bool test, int horizon) {
  return "prepare/windows_" + label + (test ? "_test" : "_train") + "_h" + std::to_string(horizon) +
         ".csv";
}

inline std::string model_base(const std::string& regime, const std::string& disease, int horizon,
                              int cutoff) {
  std::string base = "models/" + regime;
  if (!disease.empty()) base += "_" + disease;
  base += "_h" + std::to_string(horizon);
  if (cutoff >= 0) base += "_c" + std::to_string(cutoff);
  return base;
}

inline void ensure_dir(const std::filesystem::path& p) {
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) throw PipelineError(4, "cannot create directory " + p.string() + ": " + ec.message());
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  ensure_dir(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw PipelineError(4, "cannot write " + path.string());
  out << text;
}

/// Relative artifact paths collected while a stage runs; hashed afterwards.
struct ArtifactSet {
  std::map<std::string, std::string> hashed;

  void add(const RunContext& ctx, const std::string& rel) {
    hashed[rel] = util::to_hex(util::fnv1a64_file((ctx.out / rel).string()));
  }
};

inline bool stage_current(const RunContext& ctx, const std::string& stage,
                          const std::string& signature) {
  auto it = ctx.manifest.stages.find(stage);
  if (it == ctx.manifest.stages.end()) return false;
  if (it->second.signature != signature) return false;
  for (const auto& [rel, hash] : it->second.artifacts) {
    std::filesystem::path p = ctx.out / rel;
    if (!std::filesystem::exists(p)) return false;
    if (util::to_hex(util::fnv1a64_file(p.string())) != hash) return false;
  }
  return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Disease catalogue persisted by the simulate stage.
// ---------------------------------------------------------------------------

struct DiseaseInfo {
  std::string label;
  simcore::SirdParams params;
  bool is_source = false;
};

inline std::vector<DiseaseInfo> read_disease_catalogue(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw PipelineError(3, "missing disease catalogue: " + path.string());
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_array())
    throw PipelineError(4, "malformed disease catalogue: " + path.string());
  std::vector<DiseaseInfo> out;
  for (const auto& e : j) {
    DiseaseInfo d;
    d.label = e.value("label", "");
    d.params.beta = e.value("beta", 0.0);
    d.params.gamma = e.value("gamma", 0.0);
    d.params.zeta = e.value("zeta", 0.0);
    d.params.mu = e.value("mu", 0.0);
    d.is_source = e.value("is_source", false);
    out.push_back(std::move(d));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stage bodies. Each returns the artifact set it produced.
// ---------------------------------------------------------------------------

namespace detail {

inline ArtifactSet run_simulate(const RunContext& ctx) {
  const config::ExperimentConfig& c = ctx.cfg;
  ArtifactSet artifacts;
  ensure_dir(ctx.out / "series");

  std::vector<simcore::DiseaseSet> sets;
  if (c.observed.enabled) {
    auto load = [&](const std::string& path, const std::string& label) {
      auto cities = datasets::read_observed_csv(path, c.observed.gap_fill, label);
      if (c.observed.daily)
        for (auto& s : cities) s = datasets::daily_to_weekly(s);
      return cities;
    };
    simcore::DiseaseSet source{c.observed.source_label, {}, true, {}, {}};
    source.train = load(c.observed.source_csv, c.observed.source_label);
    simcore::DiseaseSet target{c.observed.target_label, {}, false, {}, {}};
    auto halves = datasets::split_units(load(c.observed.target_csv, c.observed.target_label),
                                        c.observed.split_fraction, c.master_seed);
    target.train = std::move(halves.first);
    target.test = std::move(halves.second);
    sets.push_back(std::move(source));
    sets.push_back(std::move(target));
  } else {
    simcore::SimConfig sim = c.sim;
    sim.seed = c.master_seed;
    sets = simcore::generate_grid(sim, c.source, c.target_betas, c.target_gammas, ctx.jobs);
  }

  nlohmann::json catalogue = nlohmann::json::array();
  for (const auto& set : sets) {
    nlohmann::json e;
    e["label"] = set.label;
    e["beta"] = set.params.beta;
    e["gamma"] = set.params.gamma;
    e["zeta"] = set.params.zeta;
    e["mu"] = set.params.mu;
    e["is_source"] = set.is_source;
    catalogue.push_back(std::move(e));

    std::string train_rel = series_rel(set.label, false);
    std::string test_rel = series_rel(set.label, true);
    series::write_series_csv((ctx.out / train_rel).string(), set.train);
    series::write_series_csv((ctx.out / test_rel).string(), set.test);
    artifacts.add(ctx, train_rel);
    artifacts.add(ctx, test_rel);
  }
  write_text_file(ctx.out / "series/diseases.json", catalogue.dump(2) + "\n");
  artifacts.add(ctx, "series/diseases.json");
  return artifacts;
}

struct LoadedSeries {
  std::vector<DiseaseInfo> catalogue;
  std::map<std::string, std::vector<series::EpidemicSeries>> train;  // by label
  std::map<std::string, std::vector<series::EpidemicSeries>> test;

  const DiseaseInfo& source() const {
    for (const auto& d : catalogue)
      if (d.is_source) return d;
    throw PipelineError(4, "disease catalogue has no source entry");
  }

  std::vector<DiseaseInfo> targets() const {
    std::vector<DiseaseInfo> out;
    for (const auto& d : catalogue)
      if (!d.is_source) out.push_back(d);
    return out;
  }
};

inline LoadedSeries load_series(const RunContext& ctx) {
  LoadedSeries ls;
  ls.catalogue = read_disease_catalogue(ctx.out / "series/diseases.json");
  for (const auto& d : ls.catalogue) {
    ls.train[d.label] = series::read_series_csv((ctx.out / series_rel(d.label, false)).string());
    ls.test[d.label] = series::read_series_csv((ctx.out / series_rel(d.label, true)).string());
  }
  return ls;
}

/// Per-series full-period maxes for every series in the run plus the median
/// source training max, the one constant applied to every row a source-trained
/// network sees outside its own domain.
inline ArtifactSet run_prepare(const RunContext& ctx) {
  const config::ExperimentConfig& c = ctx.cfg;
  ArtifactSet artifacts;
  if (c.regimes.empty()) return artifacts;  // similarity-only run needs no datasets

  LoadedSeries ls = load_series(ctx);
  ensure_dir(ctx.out / "prepare");

  std::map<std::string, double> scales;
  for (const auto& d : ls.catalogue) {
    for (auto& [id, s] : datasets::series_scales(ls.train[d.label])) scales[id] = s;
    for (auto& [id, s] : datasets::series_scales(ls.test[d.label])) scales[id] = s;
  }
  double source_median = datasets::median_scale(datasets::series_scales(ls.train[ls.source().label]));

  nlohmann::json sj;
  sj["source_median"] = source_median;
  sj["scales"] = nlohmann::json::object();
  for (const auto& [id, s] : scales) sj["scales"][id] = s;
  write_text_file(ctx.out / "prepare/scales.json", sj.dump(2) + "\n");
  artifacts.add(ctx, "prepare/scales.json");

  struct Job {
    std::string label;
    bool test;
    int horizon;
  };
  std::vector<Job> jobs;
  for (const auto& d : ls.catalogue)
    for (int h : c.window.horizons) {
      jobs.push_back({d.label, false, h});
      jobs.push_back({d.label, true, h});
    }
  util::parallel_for(jobs.size(), ctx.jobs, [&](std::size_t i) {
    const Job& job = jobs[i];
    const auto& src = job.test ? ls.test.at(job.label) : ls.train.at(job.label);
    datasets::SupervisedDataset ds = datasets::window_collection(src, c.window, job.horizon);
    datasets::write_dataset_csv((ctx.out / windows_rel(job.label, job.test, job.horizon)).string(),
                                ds);
  });
  for (const Job& job : jobs) artifacts.add(ctx, windows_rel(job.label, job.test, job.horizon));
  return artifacts;
}

struct ScaleBook {
  std::map<std::string, double> per_series;
  double source_median = 1.0;
};

inline ScaleBook load_scales(const RunContext& ctx) {
  std::ifstream in(ctx.out / "prepare/scales.json");
  if (!in) throw PipelineError(3, "missing prepare/scales.json; run the prepare stage first");
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw PipelineError(4, "malformed prepare/scales.json");
  ScaleBook book;
  book.source_median = j.value("source_median", 1.0);
  if (auto it = j.find("scales"); it != j.end() && it->is_object())
    for (auto f = it->begin(); f != it->end(); ++f) book.per_series[f.key()] = f.value().get<double>();
  return book;
}

inline datasets::SupervisedDataset load_windows(const RunContext& ctx, const std::string& label,
                                                bool test, int horizon) {
  std::filesystem::path p = ctx.out / windows_rel(label, test, horizon);
  if (!std::filesystem::exists(p))
    throw PipelineError(3, "missing " + windows_rel(label, test, horizon) +
                               "; run the prepare stage first");
  return datasets::read_dataset_csv(p.string());
}

/// Scale map sending every series of a dataset to one constant.
inline std::map<std::string, double> constant_scales(const datasets::SupervisedDataset& ds,
                                                     double value) {
  std::map<std::string, double> out;
  for (const auto& m : ds.meta) out.emplace(m.series_id, value);
  return out;
}

struct RegimePlan {
  bool rf_baseline = false;
  bool nn_baseline = false;
  bool rf_no_transfer = false;
  bool nn_no_transfer = false;
  bool rf_tradaboost = false;
  bool nn_transfer = false;
  bool nn_finetuned = false;

  bool needs_source_net() const { return nn_no_transfer || nn_transfer || nn_finetuned; }
  bool needs_source_rows() const {
    return rf_no_transfer || rf_tradaboost || needs_source_net();
  }
};

inline RegimePlan make_plan(const std::vector<std::string>& regimes) {
  RegimePlan p;
  for (const auto& tag : regimes) {
    if (tag == "rf_baseline") p.rf_baseline = true;
    if (tag == "nn_baseline") p.nn_baseline = true;
    if (tag == "rf_no_transfer") p.rf_no_transfer = true;
    if (tag == "nn_no_transfer") p.nn_no_transfer = true;
    if (tag == "rf_tradaboost") p.rf_tradaboost = true;
    if (tag == "nn_transfer") p.nn_transfer = true;
    if (tag == "nn_finetuned") p.nn_finetuned = true;
  }
  return p;
}

inline std::string epoch_log_csv(const std::vector<neural::EpochLog>& log) {
  std::string out = "epoch,train_mse,val_mse,lr\n";
  for (const auto& e : log) {
    out += util::format_int(e.epoch);
    out += ',';
    out += util::format_double(e.train_mse);
    out += ',';
    out += util::format_double(e.val_mse);
    out += ',';
    out += util::format_double(e.lr);
    out += '\n';
  }
  return out;
}

/// Sidecar: provenance of one trained model. rows_per_disease makes the
/// no-transfer purity of source-only models auditable.
inline nlohmann::json model_sidecar(const std::string& regime, const std::string& disease,
                                    int horizon, int cutoff, const std::string& seed_label,
                                    const datasets::SupervisedDataset& train_rows,
                                    const std::string& scale_policy, double scale_constant) {
  nlohmann::json j;
  j["regime"] = regime;
  if (!disease.empty()) j["disease"] = disease;
  j["horizon"] = horizon;
  if (cutoff >= 0) j["cutoff"] = cutoff;
  j["seed_label"] = seed_label;
  j["train_rows"] = train_rows.rows();
  j["train_hash"] = util::to_hex(datasets::dataset_hash(train_rows));
  std::map<std::string, std::size_t> per_disease;
  for (const auto& m : train_rows.meta) {
    std::string label = m.series_id.substr(0, m.series_id.find('/'));
    ++per_disease[label];
  }
  j["rows_per_disease"] = nlohmann::json::object();
  for (const auto& [label, n] : per_disease) j["rows_per_disease"][label] = n;
  j["scale_policy"] = scale_policy;
  if (scale_policy == "source_median") j["scale_constant"] = scale_constant;
  return j;
}

template <typename Model>
inline void save_model_file(const std::filesystem::path& path, const Model& model,
                            void (*saver)(std::ostream&, const Model&)) {
  ensure_dir(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw PipelineError(4, "cannot write " + path.string());
  saver(out, model);
}

inline ArtifactSet run_train(const RunContext& ctx) {
  const config::ExperimentConfig& c = ctx.cfg;
  ArtifactSet artifacts;
  if (c.regimes.empty()) return artifacts;

  const RegimePlan plan = make_plan(c.regimes);
  LoadedSeries ls = load_series(ctx);
  ScaleBook scales = load_scales(ctx);
  const std::string source_label = ls.source().label;
  const std::vector<DiseaseInfo> targets = ls.targets();
  ensure_dir(ctx.out / "models");

  const std::size_t n_h = c.window.horizons.size();
  auto h_index = [&](int h) {
    for (std::size_t i = 0; i < n_h; ++i)
      if (c.window.horizons[i] == h) return i;
    throw std::logic_error("horizon not in config");
  };

  std::vector<datasets::SupervisedDataset> source_raw(n_h);
  if (plan.needs_source_rows())
    for (int h : c.window.horizons)
      source_raw[h_index(h)] = load_windows(ctx, source_label, false, h);

  std::map<std::string, std::vector<datasets::SupervisedDataset>> target_raw;
  for (const auto& d : targets) {
    auto& per_h = target_raw[d.label];
    per_h.resize(n_h);
    for (int h : c.window.horizons) per_h[h_index(h)] = load_windows(ctx, d.label, false, h);
  }

  // Every task writes its own files; slots keep manifest order deterministic.
  struct Task {
    std::function<std::vector<std::string>()> run;
  };
  std::vector<Task> phase_a;
  std::vector<neural::NetParams> source_nets(n_h);

  auto fit_one_forest = [&](const datasets::SupervisedDataset& rows, const std::string& regime,
                            const std::string& disease, int h,
                            const std::string& seed_label) -> std::vector<std::string> {
    forest::ForestConfig fc = c.forest;
    fc.seed = util::derive_stream(c.master_seed, seed_label);
    forest::ForestModel model = forest::fit_forest(rows, {}, fc, 1);
    std::string base = model_base(regime, disease, h, -1);
    save_model_file<forest::ForestModel>(ctx.out / (base + ".model"), model, forest::save_forest);
    write_text_file(ctx.out / (base + ".json"),
                    model_sidecar(regime, disease, h, -1, seed_label, rows, "raw", 0.0).dump(2) +
                        "\n");
    return {base + ".model", base + ".json"};
  };

  auto train_one_net = [&](const datasets::SupervisedDataset& scaled, const std::string& regime,
                           const std::string& disease, int h, const std::string& init_label,
                           const std::string& train_label, const std::string& scale_policy,
                           double scale_constant,
                           neural::NetParams* keep) -> std::vector<std::string> {
    neural::NetParams start =
        neural::init_network(c.net, util::derive_stream(c.master_seed, init_label));
    neural::TrainConfig tc = c.train;
    tc.seed = util::derive_stream(c.master_seed, train_label);
    neural::TrainResult res = neural::train(start, scaled.features, scaled.targets, tc);
    if (keep) *keep = res.params;
    std::string base = model_base(regime, disease, h, -1);
    save_model_file<neural::NetParams>(ctx.out / (base + ".model"), res.params,
                                       neural::save_network);
    write_text_file(ctx.out / (base + ".json"),
                    model_sidecar(regime, disease, h, -1, train_label, scaled, scale_policy,
                                  scale_constant)
                        .dump(2) +
                        "\n");
    write_text_file(ctx.out / (base + ".log.csv"), epoch_log_csv(res.log));
    return {base + ".model", base + ".json", base + ".log.csv"};
  };

  for (int h : c.window.horizons) {
    std::size_t hi = h_index(h);
    if (plan.rf_no_transfer)
      phase_a.push_back({[&, h, hi]() {
        return fit_one_forest(source_raw[hi], "rf_no_transfer", "", h,
                              "forest/rf_no_transfer/h" + std::to_string(h));
      }});
    if (plan.needs_source_net())
      phase_a.push_back({[&, h, hi]() {
        auto scaled = datasets::scale_rows(
            source_raw[hi], datasets::series_scales(ls.train.at(source_label)));
        return train_one_net(scaled, "nn_no_transfer", "", h,
                             "init/source/h" + std::to_string(h),
                             "train/source/h" + std::to_string(h), "per_series", 0.0,
                             &source_nets[hi]);
      }});
    for (const auto& d : targets) {
      if (plan.rf_baseline)
        phase_a.push_back({[&, h, hi, label = d.label]() {
          return fit_one_forest(target_raw.at(label)[hi], "rf_baseline", label, h,
                                "forest/rf_baseline/" + label + "/h" + std::to_string(h));
        }});
      if (plan.nn_baseline)
        phase_a.push_back({[&, h, hi, label = d.label]() {
          auto scaled = datasets::scale_rows(target_raw.at(label)[hi],
                                             datasets::series_scales(ls.train.at(label)));
          return train_one_net(scaled, "nn_baseline", label, h,
                               "init/nn_baseline/" + label + "/h" + std::to_string(h),
                               "train/nn_baseline/" + label + "/h" + std::to_string(h),
                               "per_series", 0.0, nullptr);
        }});
    }
  }

  std::vector<std::vector<std::string>> phase_a_files(phase_a.size());
  util::parallel_for(phase_a.size(), ctx.jobs, [&](std::size_t i) {
    phase_a_files[i] = phase_a[i].run();
  });

  std::vector<Task> phase_b;
  for (int h : c.window.horizons) {
    std::size_t hi = h_index(h);
    for (const auto& d : targets)
      for (int cut : c.cutoffs) {
        if (plan.rf_tradaboost)
          phase_b.push_back({[&, h, hi, cut, label = d.label]() {
            datasets::SupervisedDataset cut_rows = datasets::apply_cutoff(target_raw.at(label)[hi], cut);
            transfer::BoostConfig bc = c.boost;
            bc.forest = c.forest;
            std::string seed_label =
                "boost/" + label + "/h" + std::to_string(h) + "/c" + std::to_string(cut);
            bc.seed = util::derive_stream(c.master_seed, seed_label);
            bc.jobs = 1;
            transfer::TradaboostResult res =
                transfer::fit_tradaboost(source_raw[hi], cut_rows, bc);
            datasets::SupervisedDataset combined = source_raw[hi];
            datasets::append(combined, cut_rows);
            std::string base = model_base("rf_tradaboost", label, h, cut);
            save_model_file<transfer::BoostedForest>(ctx.out / (base + ".model"), res.model,
                                                     transfer::save_boosted);
            write_text_file(
                ctx.out / (base + ".json"),
                model_sidecar("rf_tradaboost", label, h, cut, seed_label, combined, "raw", 0.0)
                        .dump(2) +
                    "\n");
            return std::vector<std::string>{base + ".model", base + ".json"};
          }});
        if (plan.nn_transfer || plan.nn_finetuned)
          phase_b.push_back({[&, h, hi, cut, label = d.label]() {
            std::vector<std::string> files;
            datasets::SupervisedDataset cut_rows = datasets::apply_cutoff(target_raw.at(label)[hi], cut);
            datasets::SupervisedDataset scaled = datasets::scale_rows(
                cut_rows, constant_scales(cut_rows, scales.source_median));
            std::string suffix = label + "/h" + std::to_string(h) + "/c" + std::to_string(cut);
            neural::TrainConfig tc = c.train;
            tc.seed = util::derive_stream(c.master_seed, "train/nn_transfer/" + suffix);
            neural::TrainResult transferred = transfer::transfer_last_layer(
                source_nets[hi], scaled.features, scaled.targets, tc);
            if (plan.nn_transfer) {
              std::string base = model_base("nn_transfer", label, h, cut);
              save_model_file<neural::NetParams>(ctx.out / (base + ".model"), transferred.params,
                                                 neural::save_network);
              write_text_file(ctx.out / (base + ".json"),
                              model_sidecar("nn_transfer", label, h, cut,
                                            "train/nn_transfer/" + suffix, scaled,
                                            "source_median", scales.source_median)
                                      .dump(2) +
                                  "\n");
              write_text_file(ctx.out / (base + ".log.csv"), epoch_log_csv(transferred.log));
              files.insert(files.end(), {base + ".model", base + ".json", base + ".log.csv"});
            }
            if (plan.nn_finetuned) {
              transfer::FinetuneConfig fc = c.finetune;
              fc.seed = util::derive_stream(c.master_seed, "train/nn_finetuned/" + suffix);
              neural::TrainResult tuned =
                  transfer::finetune_all(transferred.params, scaled.features, scaled.targets, fc);
              std::string base = model_base("nn_finetuned", label, h, cut);
              save_model_file<neural::NetParams>(ctx.out / (base + ".model"), tuned.params,
                                                 neural::save_network);
              write_text_file(ctx.out / (base + ".json"),
                              model_sidecar("nn_finetuned", label, h, cut,
                                            "train/nn_finetuned/" + suffix, scaled,
                                            "source_median", scales.source_median)
                                      .dump(2) +
                                  "\n");
              write_text_file(ctx.out / (base + ".log.csv"), epoch_log_csv(tuned.log));
              files.insert(files.end(), {base + ".model", base + ".json", base + ".log.csv"});
            }
            return files;
          }});
      }
  }

  std::vector<std::vector<std::string>> phase_b_files(phase_b.size());
  util::parallel_for(phase_b.size(), ctx.jobs, [&](std::size_t i) {
    phase_b_files[i] = phase_b[i].run();
  });

  for (const auto& group : {std::cref(phase_a_files), std::cref(phase_b_files)})
    for (const auto& files : group.get())
      for (const auto& rel : files) artifacts.add(ctx, rel);
  return artifacts;
}

template <typename Model>
inline Model load_model_file(const std::filesystem::path& path, Model (*loader)(std::istream&),
                             const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw PipelineError(3, std::string("missing ") + what + " model " + path.string() +
                               "; run the train stage first");
  return loader(in);
}

inline ArtifactSet run_evaluate(const RunContext& ctx) {
  const config::ExperimentConfig& c = ctx.cfg;
  ArtifactSet artifacts;
  ensure_dir(ctx.out / "eval");

  LoadedSeries ls = load_series(ctx);
  const std::vector<DiseaseInfo> targets = ls.targets();

  std::vector<evaluate::EvalRecord> records;
  std::vector<std::string> excluded;
  std::vector<std::string> warnings;
  nlohmann::json test_hashes = nlohmann::json::object();

  if (!c.regimes.empty()) {
    const RegimePlan plan = make_plan(c.regimes);
    ScaleBook scales = load_scales(ctx);

    struct Group {
      std::string label;
      int horizon;
      std::vector<evaluate::EvalRecord> records;
      std::vector<std::string> excluded;
      std::string test_hash;
    };
    std::vector<Group> groups;
    for (const auto& d : targets)
      for (int h : c.window.horizons) groups.push_back({d.label, h, {}, {}, {}});

    util::parallel_for(groups.size(), ctx.jobs, [&](std::size_t gi) {
      Group& g = groups[gi];
      datasets::SupervisedDataset test = load_windows(ctx, g.label, true, g.horizon);
      g.test_hash = util::to_hex(datasets::dataset_hash(test));

      std::map<std::string, double> totals;
      for (const auto& s : ls.test.at(g.label)) totals[s.id()] = s.total();

      datasets::SupervisedDataset test_own_scale;
      datasets::SupervisedDataset test_const_scale;
      std::vector<double> own_factors;
      if (plan.nn_baseline) {
        test_own_scale = datasets::scale_rows(test, scales.per_series);
        own_factors.resize(test.rows());
        for (std::size_t i = 0; i < test.rows(); ++i)
          own_factors[i] = scales.per_series.at(test.meta[i].series_id);
      }
      if (plan.needs_source_net())
        test_const_scale =
            datasets::scale_rows(test, constant_scales(test, scales.source_median));

      auto score = [&](const std::string& regime, int cutoff, const std::vector<double>& preds) {
        auto recs = evaluate::score_predictions(regime, g.label, test, preds, g.horizon, cutoff,
                                                totals, &g.excluded);
        g.records.insert(g.records.end(), recs.begin(), recs.end());
      };
      auto clip = [](std::vector<double> v) {
        for (double& x : v) x = std::max(0.0, x);
        return v;
      };

      if (plan.rf_baseline) {
        auto model = load_model_file<forest::ForestModel>(
            ctx.out / (model_base("rf_baseline", g.label, g.horizon, -1) + ".model"),
            forest::load_forest, "rf_baseline");
        std::vector<double> preds = model.predict(test);
        for (int cut : c.cutoffs) score("rf_baseline", cut, preds);
      }
      if (plan.rf_no_transfer) {
        auto model = load_model_file<forest::ForestModel>(
            ctx.out / (model_base("rf_no_transfer", "", g.horizon, -1) + ".model"),
            forest::load_forest, "rf_no_transfer");
        std::vector<double> preds = model.predict(test);
        for (int cut : c.cutoffs) score("rf_no_transfer", cut, preds);
      }
      if (plan.nn_baseline) {
        auto model = load_model_file<neural::NetParams>(
            ctx.out / (model_base("nn_baseline", g.label, g.horizon, -1) + ".model"),
            neural::load_network, "nn_baseline");
        std::vector<double> preds =
            neural::predict_rows(model, test_own_scale.features, test_own_scale.rows());
        for (std::size_t i = 0; i < preds.size(); ++i) preds[i] *= own_factors[i];
        preds = clip(std::move(preds));
        for (int cut : c.cutoffs) score("nn_baseline", cut, preds);
      }
      if (plan.nn_no_transfer) {
        auto model = load_model_file<neural::NetParams>(
            ctx.out / (model_base("nn_no_transfer", "", g.horizon, -1) + ".model"),
            neural::load_network, "nn_no_transfer");
        std::vector<double> preds =
            neural::predict_rows(model, test_const_scale.features, test_const_scale.rows());
        for (double& p : preds) p *= scales.source_median;
        preds = clip(std::move(preds));
        for (int cut : c.cutoffs) score("nn_no_transfer", cut, preds);
      }
      for (int cut : c.cutoffs) {
        if (plan.rf_tradaboost) {
          auto model = load_model_file<transfer::BoostedForest>(
              ctx.out / (model_base("rf_tradaboost", g.label, g.horizon, cut) + ".model"),
              transfer::load_boosted, "rf_tradaboost");
          score("rf_tradaboost", cut, model.predict(test));
        }
        for (const char* regime : {"nn_transfer", "nn_finetuned"}) {
          bool wanted = std::string(regime) == "nn_transfer" ? plan.nn_transfer : plan.nn_finetuned;
          if (!wanted) continue;
          auto model = load_model_file<neural::NetParams>(
              ctx.out / (model_base(regime, g.label, g.horizon, cut) + ".model"),
              neural::load_network, regime);
          std::vector<double> preds =
              neural::predict_rows(model, test_const_scale.features, test_const_scale.rows());
          for (double& p : preds) p *= scales.source_median;
          score(regime, cut, clip(std::move(preds)));
        }
      }
    });

    for (auto& g : groups) {
      records.insert(records.end(), g.records.begin(), g.records.end());
      excluded.insert(excluded.end(), g.excluded.begin(), g.excluded.end());
      test_hashes[g.label + "/h" + std::to_string(g.horizon)] = g.test_hash;
    }
  }

  std::vector<evaluate::SimilarityEntry> similarity;
  if (!c.observed.enabled) {
    const auto& src_train = ls.train.at(ls.source().label);
    for (const auto& d : targets) {
      evaluate::SimilarityEntry e =
          evaluate::similarity_entry(src_train, ls.train.at(d.label), d.params.beta,
                                     d.params.gamma);
      if (e.pairs_skipped > 0)
        warnings.push_back("similarity " + d.label + ": skipped " +
                           std::to_string(e.pairs_skipped) + " zero-variance pairs");
      similarity.push_back(e);
    }
  } else {
    warnings.push_back("similarity map skipped: observed series have no grid coordinates");
  }

  {
    util::CsvWriter out((ctx.out / "eval/records.csv").string());
    out.raw_line("regime,disease,city,horizon,cutoff,mae,pmae");
    for (const auto& r : records)
      out.row({r.regime, r.disease, r.city, util::format_int(r.horizon),
               util::format_int(r.cutoff), util::format_double(r.mae),
               util::format_double(r.pmae)});
  }
  artifacts.add(ctx, "eval/records.csv");
  {
    util::CsvWriter out((ctx.out / "eval/similarity.csv").string());
    out.raw_line("beta,gamma,median_corr,pairs_used,pairs_skipped");
    for (const auto& e : similarity)
      out.row({util::format_double(e.beta), util::format_double(e.gamma),
               util::format_double(e.median_corr),
               util::format_int(static_cast<std::int64_t>(e.pairs_used)),
               util::format_int(static_cast<std::int64_t>(e.pairs_skipped))});
  }
  artifacts.add(ctx, "eval/similarity.csv");
  {
    std::sort(excluded.begin(), excluded.end());
    excluded.erase(std::unique(excluded.begin(), excluded.end()), excluded.end());
    nlohmann::json j;
    j["zero_case_cities"] = excluded;
    j["test_hashes"] = test_hashes;
    j["warnings"] = warnings;
    write_text_file(ctx.out / "eval/coverage.json", j.dump(2) + "\n");
  }
  artifacts.add(ctx, "eval/coverage.json");
  return artifacts;
}

inline ArtifactSet run_report(const RunContext& ctx) {
  ArtifactSet artifacts;
  ensure_dir(ctx.out / "report");

  std::vector<evaluate::EvalRecord> records;
  {
    std::filesystem::path p = ctx.out / "eval/records.csv";
    if (!std::filesystem::exists(p))
      throw PipelineError(3, "missing eval/records.csv; run the evaluate stage first");
    util::CsvReader in(p.string());
    std::vector<std::string_view> fields;
    if (!in.next(fields) || fields.size() != 7)
      throw PipelineError(4, "malformed eval/records.csv header");
    while (in.next(fields)) {
      if (fields.size() != 7) throw PipelineError(4, in.where() + ": expected 7 fields");
      evaluate::EvalRecord r;
      r.regime = std::string(fields[0]);
      r.disease = std::string(fields[1]);
      r.city = std::string(fields[2]);
      r.horizon = static_cast<int>(util::parse_int(fields[3], in.where()));
      r.cutoff = static_cast<int>(util::parse_int(fields[4], in.where()));
      r.mae = util::parse_double(fields[5], in.where());
      r.pmae = util::parse_double(fields[6], in.where());
      records.push_back(std::move(r));
    }
  }

  std::vector<evaluate::SimilarityEntry> similarity;
  {
    std::filesystem::path p = ctx.out / "eval/similarity.csv";
    if (!std::filesystem::exists(p))
      throw PipelineError(3, "missing eval/similarity.csv; run the evaluate stage first");
    util::CsvReader in(p.string());
    std::vector<std::string_view> fields;
    if (!in.next(fields) || fields.size() != 5)
      throw PipelineError(4, "malformed eval/similarity.csv header");
    while (in.next(fields)) {
      if (fields.size() != 5) throw PipelineError(4, in.where() + ": expected 5 fields");
      evaluate::SimilarityEntry e;
      e.beta = util::parse_double(fields[0], in.where());
      e.gamma = util::parse_double(fields[1], in.where());
      e.median_corr = util::parse_double(fields[2], in.where());
      e.pairs_used = static_cast<std::size_t>(util::parse_int(fields[3], in.where()));
      e.pairs_skipped = static_cast<std::size_t>(util::parse_int(fields[4], in.where()));
      similarity.push_back(e);
    }
  }

  std::vector<std::string> zero_cities;
  {
    std::ifstream in(ctx.out / "eval/coverage.json");
    if (!in) throw PipelineError(3, "missing eval/coverage.json; run the evaluate stage first");
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw PipelineError(4, "malformed eval/coverage.json");
    for (const auto& e : j.value("zero_case_cities", nlohmann::json::array()))
      if (e.is_string()) zero_cities.push_back(e.get<std::string>());
  }

  evaluate::Report rep = evaluate::assemble_report(std::move(records), std::move(similarity),
                                                   std::move(zero_cities));
  write_text_file(ctx.out / "report/errors.csv", rep.errors_csv);
  write_text_file(ctx.out / "report/best_models.csv", rep.best_models_csv);
  write_text_file(ctx.out / "report/similarity.csv", rep.similarity_csv);
  write_text_file(ctx.out / "report/pmae_summary.csv", rep.pmae_summary_csv);
  write_text_file(ctx.out / "report/summary.txt", rep.summary_txt);
  for (const char* rel : {"report/errors.csv", "report/best_models.csv", "report/similarity.csv",
                          "report/pmae_summary.csv", "report/summary.txt"})
    artifacts.add(ctx, rel);
  return artifacts;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Orchestration.
// ---------------------------------------------------------------------------

inline detail::ArtifactSet run_stage_body(const RunContext& ctx, const std::string& stage) {
  if (stage == "simulate") return detail::run_simulate(ctx);
  if (stage == "prepare") return detail::run_prepare(ctx);
  if (stage == "train") return detail::run_train(ctx);
  if (stage == "evaluate") return detail::run_evaluate(ctx);
  if (stage == "report") return detail::run_report(ctx);
  throw std::invalid_argument("unknown stage: " + stage);
}

/// Runs one subcommand ("all" or a single stage). Returns a process exit code:
/// 0 success, 3 missing or stale upstream artifacts, 4 runtime failure.
/// A stage whose signature and artifact hashes match the manifest is skipped
/// unless `force` is set; within "all" a stale upstream simply re-runs.
inline int run(const config::ExperimentConfig& cfg, const std::string& subcommand, bool force,
               std::ostream& out, std::ostream& err) {
  RunContext ctx;
  ctx.cfg = cfg;
  ctx.out = cfg.out_dir;
  ctx.jobs = cfg.jobs;
  ctx.force = force;
  ctx.log = &out;

  try {
    detail::ensure_dir(ctx.out);
    ctx.manifest = load_manifest(ctx.out / "run.json");
    ctx.manifest.tool = kToolVersion;
    ctx.manifest.config_hash = util::to_hex(util::fnv1a64(report_signature(cfg)));

    std::vector<std::string> to_run;
    if (subcommand == "all")
      to_run = stage_order();
    else
      to_run = {subcommand};

    if (subcommand != "all") {
      for (const auto& stage : stage_order()) {
        if (stage == subcommand) break;
        if (!detail::stage_current(ctx, stage, stage_signature(cfg, stage))) {
          err << "stage '" << subcommand << "' needs artifacts of stage '" << stage
              << "'; run that stage first\n";
          return 3;
        }
      }
    }

    for (const auto& stage : to_run) {
      std::string sig = stage_signature(cfg, stage);
      if (!ctx.force && detail::stage_current(ctx, stage, sig)) {
        ctx.say("stage " + stage + ": up to date, skipped");
        continue;
      }
      auto t0 = std::chrono::steady_clock::now();
      detail::ArtifactSet artifacts = run_stage_body(ctx, stage);
      double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      StageEntry entry;
      entry.signature = sig;
      entry.wall_seconds = secs;
      entry.artifacts = std::move(artifacts.hashed);
      ctx.manifest.stages[stage] = std::move(entry);
      save_manifest(ctx.out / "run.json", ctx.manifest);
      std::ostringstream line;
      line << "stage " << stage << ": " << ctx.manifest.stages[stage].artifacts.size()
           << " artifacts, " << util::format_double(secs) << "s";
      ctx.say(line.str());
    }
    return 0;
  } catch (const PipelineError& e) {
    err << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    err << e.what() << "\n";
    return 4;
  }
}

}  // namespace xferepi::pipeline
