#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "xferepi/datasets.hpp"
#include "xferepi/forest.hpp"
#include "xferepi/neural.hpp"
#include "xferepi/rng.hpp"

namespace xferepi::transfer {

enum class RegimeKind { baseline, no_transfer, tradaboost, nn_transfer, nn_finetuned };
enum class Learner { forest, network };

struct RegimeTag {
  RegimeKind kind = RegimeKind::baseline;
  Learner learner = Learner::forest;

  bool operator==(const RegimeTag&) const = default;
};

/// Boosting reweights rows for a tree ensemble; the layer-based regimes only
/// make sense for the network.
inline bool valid_pairing(RegimeKind kind, Learner learner) {
  if (kind == RegimeKind::tradaboost) return learner == Learner::forest;
  if (kind == RegimeKind::nn_transfer || kind == RegimeKind::nn_finetuned)
    return learner == Learner::network;
  return true;
}

inline std::string to_string(RegimeTag tag) {
  switch (tag.kind) {
    case RegimeKind::baseline:
      return tag.learner == Learner::forest ? "rf_baseline" : "nn_baseline";
    case RegimeKind::no_transfer:
      return tag.learner == Learner::forest ? "rf_no_transfer" : "nn_no_transfer";
    case RegimeKind::tradaboost:
      return "rf_tradaboost";
    case RegimeKind::nn_transfer:
      return "nn_transfer";
    case RegimeKind::nn_finetuned:
      return "nn_finetuned";
  }
  throw std::logic_error("to_string: unknown regime");
}

inline RegimeTag parse_regime(const std::string& tag) {
  if (tag == "rf_baseline") return {RegimeKind::baseline, Learner::forest};
  if (tag == "nn_baseline") return {RegimeKind::baseline, Learner::network};
  if (tag == "rf_no_transfer") return {RegimeKind::no_transfer, Learner::forest};
  if (tag == "nn_no_transfer") return {RegimeKind::no_transfer, Learner::network};
  if (tag == "rf_tradaboost") return {RegimeKind::tradaboost, Learner::forest};
  if (tag == "nn_tradaboost")
    throw std::invalid_argument(
        "parse_regime: 'nn_tradaboost' is invalid, tradaboost pairs only with the forest "
        "learner");
  if (tag == "rf_transfer" || tag == "rf_finetuned")
    throw std::invalid_argument("parse_regime: '" + tag +
                                "' is invalid, last-layer transfer and fine-tuning pair only "
                                "with the network learner");
  if (tag == "nn_transfer") return {RegimeKind::nn_transfer, Learner::network};
  if (tag == "nn_finetuned") return {RegimeKind::nn_finetuned, Learner::network};
  throw std::invalid_argument(
      "parse_regime: unknown tag '" + tag +
      "' (valid: rf_baseline, nn_baseline, rf_no_transfer, nn_no_transfer, rf_tradaboost, "
      "nn_transfer, nn_finetuned)");
}

inline const std::vector<std::string>& all_regime_tags() {
  static const std::vector<std::string> tags{
      "rf_baseline",   "nn_baseline", "rf_no_transfer", "nn_no_transfer",
      "rf_tradaboost", "nn_transfer", "nn_finetuned"};
  return tags;
}

/// Lower weighted median: smallest value whose cumulative weight reaches half
/// the total.
inline double weighted_median(std::vector<double> values, std::vector<double> weights) {
  if (values.empty() || values.size() != weights.size())
    throw std::invalid_argument("weighted_median: empty or mismatched inputs");
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("weighted_median: negative weight");
    total += w;
  }
  if (!(total > 0.0)) throw std::invalid_argument("weighted_median: total weight must be positive");
  double acc = 0.0;
  for (std::size_t k : order) {
    acc += weights[k];
    if (acc >= 0.5 * total) return values[k];
  }
  return values[order.back()];
}

struct BoostConfig {
  int rounds = 10;       // boosting rounds with frozen source weights
  int decay_steps = 3;   // candidate source-decay steps, step 0 leaves weights unchanged
  int cv_folds = 5;      // target folds for decay-step selection
  int cv_rounds = 5;     // boosting rounds inside each fold estimate
  int cv_trees = 10;     // forest size inside each fold estimate
  bool two_stage = true; // false selects the classic multiplicative variant
  forest::ForestConfig forest;
  std::uint64_t seed = 0;
  int jobs = 1;

  void validate() const {
    if (rounds < 1) throw std::invalid_argument("rounds must be >= 1");
    if (decay_steps < 1) throw std::invalid_argument("decay_steps must be >= 1");
    if (cv_folds < 1) throw std::invalid_argument("cv_folds must be >= 1");
    if (cv_rounds < 1) throw std::invalid_argument("cv_rounds must be >= 1");
    if (cv_trees < 1) throw std::invalid_argument("cv_trees must be >= 1");
    if (jobs < 1) throw std::invalid_argument("jobs must be >= 1");
  }
};

struct DecayStepTrace {
  int step = 0;
  double target_fraction = 0.0;  // achieved after the decay
  double beta = 1.0;
  double cv_error = 0.0;
  std::vector<double> weights;  // combined weights after the step, sum 1
};

struct RoundTrace {
  int round = 0;
  double epsilon = 0.0;
  double beta = 0.0;
  double confidence = 0.0;
  std::vector<double> target_weights;  // after the update and renormalization
};

struct BoostTrace {
  std::vector<DecayStepTrace> stage1;
  std::vector<RoundTrace> stage2;
  int selected_step = -1;
};

struct BoostedForest {
  int n_features = 0;
  int selected_step = -1;
  std::vector<forest::ForestModel> models;
  std::vector<double> confidences;

  double predict(std::span<const double> x) const {
    std::vector<double> preds(models.size());
    for (std::size_t k = 0; k < models.size(); ++k) preds[k] = models[k].predict(x);
    return weighted_median(std::move(preds), confidences);
  }

  std::vector<double> predict(const datasets::SupervisedDataset& ds) const {
    std::vector<std::vector<double>> per_model(models.size());
    for (std::size_t k = 0; k < models.size(); ++k) per_model[k] = models[k].predict(ds);
    std::vector<double> out(ds.rows());
    std::vector<double> preds(models.size());
    for (std::size_t i = 0; i < ds.rows(); ++i) {
      for (std::size_t k = 0; k < models.size(); ++k) preds[k] = per_model[k][i];
      out[i] = weighted_median(preds, confidences);
    }
    return out;
  }
};

struct TradaboostResult {
  BoostedForest model;
  BoostTrace trace;
};

namespace detail {

struct Stage2Result {
  std::vector<forest::ForestModel> models;
  std::vector<double> confidences;
  std::vector<RoundTrace> trace;
};

/// AdaBoost.R2 rounds with linear loss over the target block; rows before
/// n_source keep their weights frozen for the whole run.
inline Stage2Result run_boost_rounds(const datasets::SupervisedDataset& data,
                                     std::vector<double> weights, std::size_t n_source,
                                     const forest::ForestConfig& base, int rounds,
                                     std::uint64_t seed, int jobs, bool want_trace) {
  const std::size_t n = data.rows();
  if (n_source >= n) throw std::invalid_argument("run_boost_rounds: no target rows");
  Stage2Result out;
  std::vector<double> errs(n - n_source);
  for (int r = 0; r < rounds; ++r) {
    forest::ForestConfig fcfg = base;
    fcfg.seed = util::derive_stream(seed, "round/" + std::to_string(r));
    auto model = forest::fit_forest(data, weights, fcfg, jobs);

    double d_max = 0.0;
    for (std::size_t i = n_source; i < n; ++i) {
      errs[i - n_source] = std::abs(model.predict(data.row(i)) - data.targets[i]);
      d_max = std::max(d_max, errs[i - n_source]);
    }
    std::vector<double> tgt_w(weights.begin() + static_cast<std::ptrdiff_t>(n_source),
                              weights.end());
    if (d_max == 0.0) {
      // Perfect on every target row, nothing left to reweight.
      out.models.push_back(std::move(model));
      out.confidences.push_back(std::log(1.0 / 1e-12));
      if (want_trace) out.trace.push_back({r, 0.0, 1e-12, out.confidences.back(), tgt_w});
      break;
    }

    double target_mass = 0.0, weighted_loss = 0.0;
    for (std::size_t i = n_source; i < n; ++i) {
      target_mass += weights[i];
      weighted_loss += weights[i] * std::min(errs[i - n_source] / d_max, 1.0);
    }
    double epsilon = weighted_loss / target_mass;
    if (epsilon >= 0.5) {
      if (out.models.empty()) {
        out.models.push_back(std::move(model));
        out.confidences.push_back(1.0);
        if (want_trace) out.trace.push_back({r, epsilon, 1.0, 1.0, tgt_w});
      }
      break;
    }
    double beta = std::max(epsilon / (1.0 - epsilon), 1e-12);
    out.models.push_back(std::move(model));
    out.confidences.push_back(std::log(1.0 / beta));

    double updated_mass = 0.0;
    for (std::size_t i = n_source; i < n; ++i) {
      double loss = std::min(errs[i - n_source] / d_max, 1.0);
      weights[i] *= std::pow(beta, 1.0 - loss);
      updated_mass += weights[i];
    }
    // The target block keeps its pre-update mass so the frozen source block
    // never gains relative influence.
    double rescale = target_mass / updated_mass;
    for (std::size_t i = n_source; i < n; ++i) weights[i] *= rescale;

    if (want_trace) {
      tgt_w.assign(weights.begin() + static_cast<std::ptrdiff_t>(n_source), weights.end());
      out.trace.push_back({r, epsilon, beta, out.confidences.back(), tgt_w});
    }
    if (epsilon == 0.0) break;
  }
  return out;
}

/// Solves for beta in [1e-12, 1] so the post-decay target weight fraction hits
/// `want`; falls back to the bound when the schedule is unattainable.
inline double solve_decay_beta(const std::vector<double>& weights,
                               const std::vector<double>& src_exponents, std::size_t n_source,
                               double want) {
  auto fraction_at = [&](double beta) {
    double src = 0.0, tgt = 0.0;
    for (std::size_t i = 0; i < n_source; ++i) src += weights[i] * std::pow(beta, src_exponents[i]);
    for (std::size_t i = n_source; i < weights.size(); ++i) tgt += weights[i];
    return tgt / (tgt + src);
  };
  double lo = 1e-12, hi = 1.0;
  if (fraction_at(hi) >= want) return 1.0;
  if (fraction_at(lo) <= want) return lo;
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    if (fraction_at(mid) >= want)
      lo = mid;
    else
      hi = mid;
  }
  return lo;
}

}  // namespace detail

/// Two-stage instance-transfer boosting: stage 1 decays source-row weights
/// along a target-fraction schedule and picks the step by target-fold CV,
/// stage 2 boosts with the chosen source weights frozen. two_stage=false runs
/// the classic multiplicative variant instead.
inline TradaboostResult fit_tradaboost(const datasets::SupervisedDataset& source,
                                       const datasets::SupervisedDataset& target,
                                       const BoostConfig& cfg) {
  cfg.validate();
  const std::size_t n_src = source.rows();
  const std::size_t n_tgt = target.rows();
  if (n_tgt == 0) throw std::invalid_argument("fit_tradaboost: empty target dataset");
  if (n_src > 0 && source.n_features != target.n_features)
    throw std::invalid_argument("fit_tradaboost: feature arity mismatch");

  datasets::SupervisedDataset combined = n_src > 0 ? source : target;
  if (n_src > 0) datasets::append(combined, target);
  const std::size_t n = combined.rows();
  std::vector<double> weights(n, 1.0 / static_cast<double>(n));

  TradaboostResult out;
  out.model.n_features = combined.n_features;

  if (n_src > 0 && cfg.two_stage) {
    // Fixed target-fold partition shared by every candidate step.
    const std::size_t k_folds = std::min<std::size_t>(cfg.cv_folds, n_tgt);
    std::vector<std::size_t> tgt_order(n_tgt);
    std::iota(tgt_order.begin(), tgt_order.end(), std::size_t{0});
    util::CounterRng part_rng(util::derive_stream(cfg.seed, "cv/partition"));
    util::shuffle(tgt_order, part_rng);
    std::vector<std::size_t> fold_of(n_tgt);
    for (std::size_t i = 0; i < n_tgt; ++i) fold_of[tgt_order[i]] = i % k_folds;

    // Per-fold training sets: all source rows plus the fold's complement.
    struct Fold {
      datasets::SupervisedDataset train;
      std::vector<std::size_t> combined_ids;  // weight index per training row
      std::vector<std::size_t> held_out;      // target row indices
    };
    std::vector<Fold> folds(k_folds);
    for (std::size_t f = 0; f < k_folds; ++f) {
      folds[f].train = source;
      folds[f].combined_ids.resize(n_src);
      std::iota(folds[f].combined_ids.begin(), folds[f].combined_ids.end(), std::size_t{0});
      for (std::size_t i = 0; i < n_tgt; ++i) {
        if (fold_of[i] == f) {
          folds[f].held_out.push_back(i);
        } else {
          folds[f].train.push_row(target.row(i), target.targets[i], target.meta[i]);
          folds[f].combined_ids.push_back(n_src + i);
        }
      }
    }

    const double natural = static_cast<double>(n_tgt) / static_cast<double>(n);
    std::vector<double> cv_errors(cfg.decay_steps);
    std::vector<std::vector<double>> snapshots(cfg.decay_steps);
    std::vector<double> errs(n), exps(n_src);

    for (int t = 0; t < cfg.decay_steps; ++t) {
      double want = cfg.decay_steps == 1
                        ? natural
                        : natural + (static_cast<double>(t) / (cfg.decay_steps - 1)) * (1.0 - natural);
      double beta = 1.0;
      if (t > 0) {
        forest::ForestConfig fcfg = cfg.forest;
        fcfg.seed = util::derive_stream(cfg.seed, "stage1/step/" + std::to_string(t));
        auto model = forest::fit_forest(combined, weights, fcfg, cfg.jobs);
        double d_max = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          errs[i] = std::abs(model.predict(combined.row(i)) - combined.targets[i]);
          d_max = std::max(d_max, errs[i]);
        }
        if (d_max > 0.0) {
          for (std::size_t i = 0; i < n_src; ++i) exps[i] = errs[i] / d_max;
          beta = detail::solve_decay_beta(weights, exps, n_src, want);
          for (std::size_t i = 0; i < n_src; ++i) weights[i] *= std::pow(beta, exps[i]);
          double total = std::accumulate(weights.begin(), weights.end(), 0.0);
          for (auto& w : weights) w /= total;
        }
      }
      double tgt_mass = 0.0;
      for (std::size_t i = n_src; i < n; ++i) tgt_mass += weights[i];

      if (k_folds < 2) {
        // A single target row cannot be cross-validated; keep the undecayed step.
        cv_errors[t] = std::numeric_limits<double>::quiet_NaN();
        snapshots[t] = weights;
        out.trace.stage1.push_back({t, tgt_mass, beta, cv_errors[t], weights});
        continue;
      }

      double abs_err_sum = 0.0;
      for (std::size_t f = 0; f < k_folds; ++f) {
        std::vector<double> fold_w(folds[f].combined_ids.size());
        for (std::size_t i = 0; i < fold_w.size(); ++i)
          fold_w[i] = weights[folds[f].combined_ids[i]];
        forest::ForestConfig cvcfg = cfg.forest;
        cvcfg.n_trees = cfg.cv_trees;
        auto fit = detail::run_boost_rounds(
            folds[f].train, std::move(fold_w), n_src, cvcfg, cfg.cv_rounds,
            util::derive_stream(cfg.seed, "cv/step/" + std::to_string(t) + "/fold/" +
                                              std::to_string(f)),
            cfg.jobs, false);
        std::vector<double> preds(fit.models.size());
        for (std::size_t held : folds[f].held_out) {
          for (std::size_t k = 0; k < fit.models.size(); ++k)
            preds[k] = fit.models[k].predict(target.row(held));
          abs_err_sum += std::abs(weighted_median(preds, fit.confidences) - target.targets[held]);
        }
      }
      cv_errors[t] = abs_err_sum / static_cast<double>(n_tgt);
      snapshots[t] = weights;
      out.trace.stage1.push_back({t, tgt_mass, beta, cv_errors[t], weights});
    }

    int best_step = 0;
    for (int t = 1; t < cfg.decay_steps; ++t)
      if (cv_errors[t] < cv_errors[best_step]) best_step = t;
    out.trace.selected_step = best_step;
    out.model.selected_step = best_step;
    weights = snapshots[static_cast<std::size_t>(best_step)];
  } else if (n_src > 0) {
    // Classic variant: fixed multiplicative source decay, target rows follow
    // the round error, every round's model joins the ensemble.
    const double beta_src =
        1.0 / (1.0 + std::sqrt(2.0 * std::log(static_cast<double>(n_src)) /
                               static_cast<double>(cfg.rounds)));
    std::vector<double> errs(n);
    for (int r = 0; r < cfg.rounds; ++r) {
      forest::ForestConfig fcfg = cfg.forest;
      fcfg.seed = util::derive_stream(cfg.seed, "classic/round/" + std::to_string(r));
      auto model = forest::fit_forest(combined, weights, fcfg, cfg.jobs);
      double d_max = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        errs[i] = std::abs(model.predict(combined.row(i)) - combined.targets[i]);
        d_max = std::max(d_max, errs[i]);
      }
      if (d_max == 0.0) {
        out.model.models.push_back(std::move(model));
        out.model.confidences.push_back(std::log(1.0 / 1e-12));
        break;
      }
      double tgt_mass = 0.0, weighted_loss = 0.0;
      for (std::size_t i = n_src; i < n; ++i) {
        tgt_mass += weights[i];
        weighted_loss += weights[i] * (errs[i] / d_max);
      }
      double epsilon = weighted_loss / tgt_mass;
      if (epsilon >= 0.5) {
        if (out.model.models.empty()) {
          out.model.models.push_back(std::move(model));
          out.model.confidences.push_back(1.0);
        }
        break;
      }
      double beta = std::max(epsilon / (1.0 - epsilon), 1e-12);
      for (std::size_t i = 0; i < n_src; ++i) weights[i] *= std::pow(beta_src, errs[i] / d_max);
      for (std::size_t i = n_src; i < n; ++i) weights[i] *= std::pow(beta, -(errs[i] / d_max));
      double total = std::accumulate(weights.begin(), weights.end(), 0.0);
      for (auto& w : weights) w /= total;
      out.model.models.push_back(std::move(model));
      out.model.confidences.push_back(std::log(1.0 / beta));
      out.trace.stage2.push_back({r, epsilon, beta, out.model.confidences.back(),
                                  {weights.begin() + static_cast<std::ptrdiff_t>(n_src),
                                   weights.end()}});
      if (epsilon == 0.0) break;
    }
    return out;
  }

  auto final_fit = detail::run_boost_rounds(combined, std::move(weights), n_src, cfg.forest,
                                            cfg.rounds,
                                            util::derive_stream(cfg.seed, "stage2"), cfg.jobs,
                                            true);
  out.model.models = std::move(final_fit.models);
  out.model.confidences = std::move(final_fit.confidences);
  out.trace.stage2 = std::move(final_fit.trace);
  return out;
}

inline void save_boosted(std::ostream& out, const BoostedForest& m) {
  out << "xferepi-boosted 1\n";
  out << "n_features " << m.n_features << "\n";
  out << "selected_step " << m.selected_step << "\n";
  out << "models " << m.models.size() << "\n";
  for (std::size_t k = 0; k < m.models.size(); ++k) {
    out << "confidence " << util::format_double(m.confidences[k]) << "\n";
    forest::save_forest(out, m.models[k]);
  }
}

inline BoostedForest load_boosted(std::istream& in) {
  std::string word;
  int version = 0;
  if (!(in >> word >> version) || word != "xferepi-boosted" || version != 1)
    throw std::runtime_error("load_boosted: unrecognized header");
  BoostedForest m;
  std::size_t k = 0;
  if (!(in >> word >> m.n_features) || word != "n_features")
    throw std::runtime_error("load_boosted: bad n_features");
  if (!(in >> word >> m.selected_step) || word != "selected_step")
    throw std::runtime_error("load_boosted: bad selected_step");
  if (!(in >> word >> k) || word != "models")
    throw std::runtime_error("load_boosted: bad model count");
  m.models.reserve(k);
  m.confidences.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    std::string text;
    if (!(in >> word >> text) || word != "confidence")
      throw std::runtime_error("load_boosted: bad confidence");
    m.confidences.push_back(util::parse_double(text, "load_boosted"));
    m.models.push_back(forest::load_forest(in));
  }
  return m;
}

/// Retrains only the output layer on target rows. Hidden activations are
/// computed once and the output layer is trained as a one-layer network,
/// which matches training the full network with frozen hidden layers bit for
/// bit while skipping the repeated hidden passes.
inline neural::TrainResult transfer_last_layer(const neural::NetParams& source_net,
                                               const std::vector<double>& features,
                                               const std::vector<double>& targets,
                                               const neural::TrainConfig& cfg) {
  if (source_net.layers.size() < 2)
    throw std::invalid_argument("transfer_last_layer: network has no hidden layers");
  const std::size_t n = targets.size();
  const std::size_t p = static_cast<std::size_t>(source_net.input_dim());
  if (features.size() != n * p)
    throw std::invalid_argument("transfer_last_layer: feature/target size mismatch");

  const std::size_t penult = static_cast<std::size_t>(source_net.penultimate_dim());
  std::vector<double> hidden(n * penult);
  neural::detail::Workspace ws;
  const std::size_t chunk = 512;
  ws.resize(source_net, std::min(chunk, std::max<std::size_t>(n, 1)));
  const std::size_t hidden_layers = source_net.layers.size() - 1;
  for (std::size_t at = 0; at < n;) {
    std::size_t take = std::min(chunk, n - at);
    std::copy_n(features.data() + at * p, take * p, ws.a[0].data());
    neural::detail::forward_batch(source_net, take, ws);
    std::copy_n(ws.a[hidden_layers].data(), take * penult, hidden.data() + at * penult);
    at += take;
  }

  neural::NetParams reduced;
  reduced.config.input = static_cast<int>(penult);
  reduced.config.hidden = {};
  reduced.config.activation = source_net.config.activation;
  reduced.layers = {source_net.layers.back()};
  reduced.layers[0].trainable = true;

  neural::TrainResult res = neural::train(reduced, hidden, targets, cfg);
  neural::NetParams full = source_net;
  full.layers.back() = res.params.layers[0];
  res.params = std::move(full);
  return res;
}

struct FinetuneConfig {
  double learning_rate = 1e-5;
  int epochs = 10;
  int batch = 256;
  std::uint64_t seed = 0;
};

/// Low-rate full-network update on target rows; no validation split, no early
/// stopping. Divergence falls back to the input parameters.
inline neural::TrainResult finetune_all(const neural::NetParams& net,
                                        const std::vector<double>& features,
                                        const std::vector<double>& targets,
                                        const FinetuneConfig& fc) {
  neural::NetParams open = net;
  for (auto& layer : open.layers) layer.trainable = true;
  if (fc.learning_rate == 0.0 || fc.epochs == 0) {
    neural::TrainResult res;
    res.params = std::move(open);
    return res;
  }
  neural::TrainConfig tc;
  tc.learning_rate = fc.learning_rate;
  tc.epochs = fc.epochs;
  tc.batch = fc.batch;
  tc.val_fraction = 0.0;
  tc.lr_decay = 1.0;
  tc.seed = fc.seed;
  return neural::train(open, features, targets, tc);
}

}  // namespace xferepi::transfer
