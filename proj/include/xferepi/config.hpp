#pragma once

#include <cstdint>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../../vendor/json.hpp"
#include "xferepi/datasets.hpp"
#include "xferepi/forest.hpp"
#include "xferepi/neural.hpp"
#include "xferepi/simcore.hpp"
#include "xferepi/transfer.hpp"

namespace xferepi::config {

/// Optional empirical-data block; when present the simulate stage ingests
/// these files instead of running the synthetic grid.
struct ObservedConfig {
  bool enabled = false;
  std::string source_csv;
  std::string target_csv;
  std::string source_label = "observed_source";
  std::string target_label = "observed_target";
  datasets::GapFill gap_fill = datasets::GapFill::zero;
  bool daily = false;           // aggregate 7-day blocks to weeks after ingest
  double split_fraction = 0.5;  // target city train share
};

/// Full experiment description. Seeds inside the member configs are left at 0;
/// the pipeline derives every stream from `master_seed` by label.
struct ExperimentConfig {
  simcore::SimConfig sim;
  simcore::SirdParams source{0.191, 0.05, 0.008, 0.0294};
  std::vector<double> target_betas{0.25, 0.3, 0.35};
  std::vector<double> target_gammas{0.01, 0.1, 0.15};
  ObservedConfig observed;

  datasets::WindowConfig window;
  std::vector<int> cutoffs{25, 30, 35, 100};

  neural::NetConfig net;
  neural::TrainConfig train;
  forest::ForestConfig forest;
  transfer::BoostConfig boost;
  transfer::FinetuneConfig finetune;

  std::vector<std::string> regimes{"rf_baseline",   "nn_baseline",  "rf_no_transfer",
                                   "nn_no_transfer", "rf_tradaboost", "nn_transfer",
                                   "nn_finetuned"};
  std::string out_dir = "runs/default";
  std::uint64_t master_seed = 1;
  int jobs = 1;
};

struct ConfigParse {
  ExperimentConfig config;
  std::vector<std::string> diagnostics;

  bool ok() const { return diagnostics.empty(); }
};

namespace detail {

using nlohmann::json;

inline void note(std::vector<std::string>& diags, const std::string& path, const std::string& msg) {
  diags.push_back(path + ": " + msg);
}

inline void check_keys(const json& j, const std::string& path, const std::set<std::string>& allowed,
                       std::vector<std::string>& diags) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) note(diags, path.empty() ? it.key() : path + "." + it.key(), "unknown field");
}

inline const json* child(const json& j, const std::string& path, const std::string& key,
                         std::vector<std::string>& diags) {
  auto it = j.find(key);
  if (it == j.end()) return nullptr;
  if (!it->is_object()) {
    note(diags, path + key, "expected an object");
    return nullptr;
  }
  return &*it;
}

template <typename T>
inline void get_integer(const json& j, const std::string& path, const std::string& key, T& out,
                        std::int64_t lo, std::int64_t hi, std::vector<std::string>& diags) {
  auto it = j.find(key);
  if (it == j.end()) return;
  if (!it->is_number_integer() && !it->is_number_unsigned()) {
    note(diags, path + key, "expected an integer");
    return;
  }
  std::int64_t v = it->get<std::int64_t>();
  if (v < lo || v > hi) {
    note(diags, path + key, "outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    return;
  }
  out = static_cast<T>(v);
}

inline void get_seed(const json& j, const std::string& path, const std::string& key,
                     std::uint64_t& out, std::vector<std::string>& diags) {
  auto it = j.find(key);
  if (it == j.end()) return;
  if (!it->is_number_unsigned() && !(it->is_number_integer() && it->get<std::int64_t>() >= 0)) {
    note(diags, path + key, "expected a non-negative integer");
    return;
  }
  out = it->get<std::uint64_t>();
}

inline void get_real(const json& j, const std::string& path, const std::string& key, double& out,
                     double lo, double hi, std::vector<std::string>& diags,
                     bool lo_open = false) {
  auto it = j.find(key);
  if (it == j.end()) return;
  if (!it->is_number()) {
    note(diags, path + key, "expected a number");
    return;
  }
  double v = it->get<double>();
  bool below = lo_open ? !(v > lo) : !(v >= lo);
  if (below || v > hi) {
    std::ostringstream msg;
    msg << "outside " << (lo_open ? "(" : "[") << lo << ", " << hi << "]";
    note(diags, path + key, msg.str());
    return;
  }
  out = v;
}

inline void get_bool(const json& j, const std::string& path, const std::string& key, bool& out,
                     std::vector<std::string>& diags) {
  auto it = j.find(key);
  if (it == j.end()) return;
  if (!it->is_boolean()) {
    note(diags, path + key, "expected a boolean");
    return;
  }
  out = it->get<bool>();
}

inline void get_string(const json& j, const std::string& path, const std::string& key,
                       std::string& out, std::vector<std::string>& diags) {
  auto it = j.find(key);
  if (it == j.end()) return;
  if (!it->is_string()) {
    note(diags, path + key, "expected a string");
    return;
  }
  out = it->get<std::string>();
}

inline void get_real_list(const json& j, const std::string& path, const std::string& key,
                          std::vector<double>& out, std::vector<std::string>& diags) {
  auto it = j.find(key);
  if (it == j.end()) return;
  if (!it->is_array()) {
    note(diags, path + key, "expected an array of numbers");
    return;
  }
  std::vector<double> v;
  for (const auto& e : *it) {
    if (!e.is_number()) {
      note(diags, path + key, "expected an array of numbers");
      return;
    }
    v.push_back(e.get<double>());
  }
  out = std::move(v);
}

inline void get_int_list(const json& j, const std::string& path, const std::string& key,
                         std::vector<int>& out, std::vector<std::string>& diags) {
  auto it = j.find(key);
  if (it == j.end()) return;
  if (!it->is_array()) {
    note(diags, path + key, "expected an array of integers");
    return;
  }
  std::vector<int> v;
  for (const auto& e : *it) {
    if (!e.is_number_integer() && !e.is_number_unsigned()) {
      note(diags, path + key, "expected an array of integers");
      return;
    }
    v.push_back(e.get<int>());
  }
  out = std::move(v);
}

}  // namespace detail

/// Structural and invariant validation in one pass; every problem is reported
/// as "field.path: message" and parsing continues so one run surfaces all
/// diagnostics. Unknown keys are errors so typos cannot silently fall back to
/// defaults.
inline ConfigParse parse_config(const nlohmann::json& root) {
  using namespace detail;
  ConfigParse res;
  ExperimentConfig& c = res.config;
  auto& diags = res.diagnostics;

  if (!root.is_object()) {
    note(diags, "config", "top level must be an object");
    return res;
  }
  check_keys(root, "",
             {"version", "master_seed", "out_dir", "jobs", "simulation", "observed", "windows",
              "forest", "network", "boost", "finetune", "regimes"},
             diags);

  int version = 1;
  get_integer(root, "", "version", version, 1, 1, diags);
  get_seed(root, "", "master_seed", c.master_seed, diags);
  get_string(root, "", "out_dir", c.out_dir, diags);
  if (c.out_dir.empty()) note(diags, "out_dir", "must be non-empty");
  get_integer(root, "", "jobs", c.jobs, 1, 4096, diags);

  if (const json* sim = child(root, "", "simulation", diags)) {
    const std::string p = "simulation.";
    check_keys(*sim, "simulation",
               {"population", "initial_infected", "steps", "replicates", "probability_form",
                "record", "source", "target_betas", "target_gammas"},
               diags);
    get_integer(*sim, p, "population", c.sim.population, 1, 1000000000, diags);
    get_integer(*sim, p, "initial_infected", c.sim.initial_infected, 0, 1000000000, diags);
    if (c.sim.initial_infected > c.sim.population)
      note(diags, p + "initial_infected", "exceeds population");
    get_integer(*sim, p, "steps", c.sim.t_max, 1, 10000000, diags);
    get_integer(*sim, p, "replicates", c.sim.replicates, 1, 1000000, diags);
    std::string form = "event_rate";
    get_string(*sim, p, "probability_form", form, diags);
    if (form == "event_rate" || form == "literal_survival")
      c.sim.form = simcore::probability_form_from_string(form);
    else
      note(diags, p + "probability_form", "must be \"event_rate\" or \"literal_survival\"");
    std::string record = "incidence";
    get_string(*sim, p, "record", record, diags);
    if (record == "incidence" || record == "prevalence")
      c.sim.record_prevalence = record == "prevalence";
    else
      note(diags, p + "record", "must be \"incidence\" or \"prevalence\"");
    if (const json* src = child(*sim, p, "source", diags)) {
      check_keys(*src, "simulation.source", {"beta", "gamma", "zeta", "mu"}, diags);
      get_real(*src, p + "source.", "beta", c.source.beta, 0.0, 10.0, diags);
      get_real(*src, p + "source.", "gamma", c.source.gamma, 0.0, 10.0, diags);
      get_real(*src, p + "source.", "zeta", c.source.zeta, 0.0, 10.0, diags);
      get_real(*src, p + "source.", "mu", c.source.mu, 0.0, 10.0, diags);
    }
    get_real_list(*sim, p, "target_betas", c.target_betas, diags);
    get_real_list(*sim, p, "target_gammas", c.target_gammas, diags);
    for (double b : c.target_betas)
      if (!(b >= 0.0 && b < 10.0)) note(diags, p + "target_betas", "rate outside [0, 10)");
    for (double g : c.target_gammas)
      if (!(g >= 0.0 && g < 10.0)) note(diags, p + "target_gammas", "rate outside [0, 10)");
    if (c.target_betas.empty()) note(diags, p + "target_betas", "must be non-empty");
    if (c.target_gammas.empty()) note(diags, p + "target_gammas", "must be non-empty");
  }

  if (const json* obs = child(root, "", "observed", diags)) {
    const std::string p = "observed.";
    check_keys(*obs, "observed",
               {"source_csv", "target_csv", "source_label", "target_label", "gap_fill", "daily",
                "split_fraction"},
               diags);
    c.observed.enabled = true;
    get_string(*obs, p, "source_csv", c.observed.source_csv, diags);
    get_string(*obs, p, "target_csv", c.observed.target_csv, diags);
    if (c.observed.source_csv.empty()) note(diags, p + "source_csv", "must be non-empty");
    if (c.observed.target_csv.empty()) note(diags, p + "target_csv", "must be non-empty");
    get_string(*obs, p, "source_label", c.observed.source_label, diags);
    get_string(*obs, p, "target_label", c.observed.target_label, diags);
    std::string fill = "zero";
    get_string(*obs, p, "gap_fill", fill, diags);
    if (fill == "zero")
      c.observed.gap_fill = datasets::GapFill::zero;
    else if (fill == "interpolate")
      c.observed.gap_fill = datasets::GapFill::interpolate;
    else
      note(diags, p + "gap_fill", "must be \"zero\" or \"interpolate\"");
    get_bool(*obs, p, "daily", c.observed.daily, diags);
    get_real(*obs, p, "split_fraction", c.observed.split_fraction, 0.0, 1.0, diags, true);
    if (!(c.observed.split_fraction < 1.0))
      note(diags, p + "split_fraction", "outside (0, 1)");
  }

  if (const json* win = child(root, "", "windows", diags)) {
    const std::string p = "windows.";
    check_keys(*win, "windows", {"lags", "horizons", "max_horizon", "cutoffs"}, diags);
    get_integer(*win, p, "lags", c.window.lags, 1, 1000, diags);
    get_integer(*win, p, "max_horizon", c.window.max_horizon, 1, 1000, diags);
    get_int_list(*win, p, "horizons", c.window.horizons, diags);
    if (c.window.horizons.empty()) note(diags, p + "horizons", "must be non-empty");
    for (std::size_t i = 0; i < c.window.horizons.size(); ++i) {
      if (c.window.horizons[i] < 1 || c.window.horizons[i] > c.window.max_horizon) {
        note(diags, p + "horizons", "horizon outside [1, max_horizon]");
        break;
      }
      if (i > 0 && c.window.horizons[i] <= c.window.horizons[i - 1]) {
        note(diags, p + "horizons", "must be strictly increasing");
        break;
      }
    }
    get_int_list(*win, p, "cutoffs", c.cutoffs, diags);
    for (std::size_t i = 0; i < c.cutoffs.size(); ++i) {
      if (c.cutoffs[i] <= c.window.first_target()) {
        note(diags, p + "cutoffs",
             "cutoff " + std::to_string(c.cutoffs[i]) +
                 " leaves no training targets (first usable target index is " +
                 std::to_string(c.window.first_target()) + ")");
        break;
      }
      if (i > 0 && c.cutoffs[i] <= c.cutoffs[i - 1]) {
        note(diags, p + "cutoffs", "must be strictly increasing");
        break;
      }
    }
    if (!c.observed.enabled)
      for (int cut : c.cutoffs)
        if (cut > c.sim.t_max) {
          note(diags, p + "cutoffs", "cutoff exceeds simulation.steps");
          break;
        }
  }

  if (const json* fr = child(root, "", "forest", diags)) {
    const std::string p = "forest.";
    check_keys(*fr, "forest",
               {"trees", "max_features", "min_samples_leaf", "max_depth", "bootstrap",
                "bootstrap_draws"},
               diags);
    get_integer(*fr, p, "trees", c.forest.n_trees, 1, 100000, diags);
    get_integer(*fr, p, "max_features", c.forest.max_features, 0, 1000, diags);
    get_integer(*fr, p, "min_samples_leaf", c.forest.min_samples_leaf, 1, 1000000, diags);
    get_integer(*fr, p, "max_depth", c.forest.max_depth, 0, 1000, diags);
    get_bool(*fr, p, "bootstrap", c.forest.bootstrap, diags);
    get_integer(*fr, p, "bootstrap_draws", c.forest.bootstrap_draws, 0, 100000000, diags);
  }

  if (const json* net = child(root, "", "network", diags)) {
    const std::string p = "network.";
    check_keys(*net, "network",
               {"hidden", "activation", "learning_rate", "epochs", "batch", "patience",
                "val_fraction", "lr_decay"},
               diags);
    get_int_list(*net, p, "hidden", c.net.hidden, diags);
    for (int h : c.net.hidden)
      if (h < 1) {
        note(diags, p + "hidden", "layer sizes must be >= 1");
        break;
      }
    std::string act = "relu";
    get_string(*net, p, "activation", act, diags);
    if (act == "relu" || act == "tanh")
      c.net.activation = neural::activation_from_string(act);
    else
      note(diags, p + "activation", "must be \"relu\" or \"tanh\"");
    get_real(*net, p, "learning_rate", c.train.learning_rate, 0.0, 1e6, diags, true);
    get_integer(*net, p, "epochs", c.train.epochs, 0, 1000000, diags);
    get_integer(*net, p, "batch", c.train.batch, 1, 10000000, diags);
    get_integer(*net, p, "patience", c.train.patience, 0, 1000000, diags);
    get_real(*net, p, "val_fraction", c.train.val_fraction, 0.0, 0.999, diags);
    get_real(*net, p, "lr_decay", c.train.lr_decay, 0.0, 1.0, diags, true);
  }

  if (const json* bo = child(root, "", "boost", diags)) {
    const std::string p = "boost.";
    check_keys(*bo, "boost",
               {"rounds", "decay_steps", "cv_folds", "cv_rounds", "cv_trees", "two_stage"}, diags);
    get_integer(*bo, p, "rounds", c.boost.rounds, 1, 10000, diags);
    get_integer(*bo, p, "decay_steps", c.boost.decay_steps, 1, 1000, diags);
    get_integer(*bo, p, "cv_folds", c.boost.cv_folds, 1, 1000, diags);
    get_integer(*bo, p, "cv_rounds", c.boost.cv_rounds, 1, 10000, diags);
    get_integer(*bo, p, "cv_trees", c.boost.cv_trees, 1, 100000, diags);
    get_bool(*bo, p, "two_stage", c.boost.two_stage, diags);
  }

  if (const json* ft = child(root, "", "finetune", diags)) {
    const std::string p = "finetune.";
    check_keys(*ft, "finetune", {"learning_rate", "epochs", "batch"}, diags);
    get_real(*ft, p, "learning_rate", c.finetune.learning_rate, 0.0, 1e6, diags);
    get_integer(*ft, p, "epochs", c.finetune.epochs, 0, 1000000, diags);
    get_integer(*ft, p, "batch", c.finetune.batch, 1, 10000000, diags);
  }

  if (auto it = root.find("regimes"); it != root.end()) {
    if (!it->is_array()) {
      note(diags, "regimes", "expected an array of regime tags");
    } else {
      std::vector<std::string> tags;
      std::set<std::string> seen;
      for (const auto& e : *it) {
        if (!e.is_string()) {
          note(diags, "regimes", "expected an array of regime tags");
          tags.clear();
          break;
        }
        std::string tag = e.get<std::string>();
        try {
          transfer::parse_regime(tag);
        } catch (const std::invalid_argument& bad) {
          note(diags, "regimes", bad.what());
          continue;
        }
        if (!seen.insert(tag).second) {
          note(diags, "regimes", "duplicate regime " + tag);
          continue;
        }
        tags.push_back(tag);
      }
      c.regimes = std::move(tags);
    }
  }

  bool needs_hidden = false;
  for (const auto& tag : c.regimes) {
    transfer::RegimeTag t = transfer::parse_regime(tag);
    if (t.kind == transfer::RegimeKind::nn_transfer || t.kind == transfer::RegimeKind::nn_finetuned)
      needs_hidden = true;
  }
  if (needs_hidden && c.net.hidden.empty())
    note(diags, "network.hidden",
         "layer-transfer regimes need at least one hidden layer");

  c.net.input = c.window.lags;
  c.boost.forest = c.forest;
  return res;
}

inline ConfigParse parse_config_text(const std::string& text) {
  nlohmann::json root = nlohmann::json::parse(text, nullptr, false, true);
  if (root.is_discarded()) {
    ConfigParse res;
    res.diagnostics.push_back("config: not valid JSON");
    return res;
  }
  return parse_config(root);
}

inline ConfigParse load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    ConfigParse res;
    res.diagnostics.push_back("config: cannot open " + path);
    return res;
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

}  // namespace xferepi::config
