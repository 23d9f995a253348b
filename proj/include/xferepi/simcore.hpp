#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "xferepi/parallel.hpp"
#include "xferepi/rng.hpp"
#include "xferepi/series.hpp"

namespace xferepi::simcore {

/// How a per-step rate maps to an event probability.
///  event_rate:      P = 1 - exp(-rate)  (chain-binomial, default)
///  literal_survival: P = exp(-rate)     (alternate reading kept behind a switch)
enum class ProbabilityForm { event_rate, literal_survival };

inline ProbabilityForm probability_form_from_string(const std::string& s) {
  if (s == "event_rate") return ProbabilityForm::event_rate;
  if (s == "literal_survival") return ProbabilityForm::literal_survival;
  throw std::invalid_argument("unknown probability_form: " + s);
}

struct SirdParams {
  double beta = 0.0;   // infection rate
  double gamma = 0.0;  // recovery rate
  double zeta = 0.0;   // waning immunity rate
  double mu = 0.0;     // death rate

  void validate(double bound = 10.0) const {
    const double rates[4] = {beta, gamma, zeta, mu};
    const char* names[4] = {"beta", "gamma", "zeta", "mu"};
    for (int i = 0; i < 4; ++i) {
      if (!(rates[i] >= 0.0) || rates[i] >= bound)
        throw std::invalid_argument(std::string("rate ") + names[i] + " outside [0, " +
                                    std::to_string(bound) + ")");
    }
  }
};

struct SirdState {
  std::int64_t s = 0;
  std::int64_t i = 0;
  std::int64_t r = 0;
  std::int64_t d = 0;
  std::int64_t t = 0;

  std::int64_t population() const { return s + i + r + d; }

  void validate(std::int64_t n) const {
    if (s < 0 || i < 0 || r < 0 || d < 0)
      throw std::invalid_argument("compartment counts must be non-negative");
    if (population() != n) throw std::invalid_argument("compartments must sum to population");
  }
};

struct SimConfig {
  std::int64_t population = 10000;
  std::int64_t initial_infected = 10;
  int t_max = 1000;
  int replicates = 100;
  std::uint64_t seed = 0;
  ProbabilityForm form = ProbabilityForm::event_rate;
  bool record_prevalence = false;  // record I_t instead of new infections

  void validate() const {
    if (population <= 0) throw std::invalid_argument("population must be positive");
    if (initial_infected < 0 || initial_infected > population)
      throw std::invalid_argument("initial_infected outside [0, population]");
    if (t_max <= 0) throw std::invalid_argument("t_max must be positive");
    if (replicates <= 0) throw std::invalid_argument("replicates must be positive");
  }
};

struct StepEvents {
  std::int64_t infections = 0;
  std::int64_t recoveries = 0;
  std::int64_t deaths = 0;
  std::int64_t waned = 0;
};

inline double event_probability(double rate, ProbabilityForm form) {
  double p = form == ProbabilityForm::event_rate ? -std::expm1(-rate) : std::exp(-rate);
  if (p < 0.0) p = 0.0;
  if (p > 1.0) p = 1.0;
  return p;
}

/// One synchronous update: every draw uses the state at time t. Recovery and
/// death compete for the same infectious pool, so their single-event
/// probabilities are rescaled to the exclusive-outcome pair
///   p_total = 1 - (1-p_rec)(1-p_die),  p_i' = p_i * p_total / (p_rec + p_die)
/// which under the event_rate form reduces to splitting 1 - exp(-(gamma+mu))
/// proportionally to gamma and mu.
inline SirdState step(const SirdState& state, const SirdParams& params, util::CounterRng& rng,
                      ProbabilityForm form, StepEvents* events = nullptr) {
  const double n = static_cast<double>(state.population());
  double p_inf = state.i == 0
                     ? 0.0  // no infectious contact possible
                     : event_probability(params.beta * static_cast<double>(state.i) / n, form);
  double p_rec = event_probability(params.gamma, form);
  double p_die = event_probability(params.mu, form);
  double p_wane = event_probability(params.zeta, form);

  double p_sum = p_rec + p_die;
  if (p_sum > 0.0) {
    double p_total = 1.0 - (1.0 - p_rec) * (1.0 - p_die);
    double scale = p_total / p_sum;
    p_rec *= scale;
    p_die *= scale;
  }

  std::int64_t infections = binomial(rng, state.s, p_inf);
  util::TrinomialDraw leave = trinomial(rng, state.i, p_rec, p_die);
  std::int64_t waned = binomial(rng, state.r, p_wane);

  SirdState next;
  next.s = state.s - infections + waned;
  next.i = state.i + infections - leave.first - leave.second;
  next.r = state.r + leave.first - waned;
  next.d = state.d + leave.second;
  next.t = state.t + 1;
  if (next.population() != state.population())
    throw std::logic_error("population not conserved across step");
  if (events) *events = {infections, leave.first, leave.second, waned};
  return next;
}

/// Simulates one replicate. The RNG stream is derived from config.seed plus
/// (disease, stream_tag, unit), so any replicate can be produced in isolation
/// and scheduling order never changes output.
inline series::EpidemicSeries simulate(const SimConfig& config, const SirdParams& params,
                                       const std::string& disease = "sim",
                                       const std::string& unit = "0",
                                       const std::string& stream_tag = "train") {
  config.validate();
  params.validate();
  util::CounterRng rng(
      util::derive_stream(config.seed, "sim/" + disease + "/" + stream_tag + "/" + unit));

  SirdState state;
  state.s = config.population - config.initial_infected;
  state.i = config.initial_infected;
  state.validate(config.population);

  series::EpidemicSeries out;
  out.disease = disease;
  out.unit = unit;
  out.kind = config.record_prevalence ? series::SeriesKind::prevalence : series::SeriesKind::incidence;
  out.values.reserve(static_cast<std::size_t>(config.t_max));
  for (int t = 0; t < config.t_max; ++t) {
    StepEvents ev;
    state = step(state, params, rng, config.form, &ev);
    out.values.push_back(static_cast<double>(config.record_prevalence ? state.i : ev.infections));
  }
  return out;
}

/// One disease with independent train and test replicate sets.
struct DiseaseSet {
  std::string label;
  SirdParams params;
  bool is_source = false;
  std::vector<series::EpidemicSeries> train;
  std::vector<series::EpidemicSeries> test;
};

inline std::string replicate_unit(int r) {
  std::string s = std::to_string(r);
  while (s.size() < 3) s.insert(s.begin(), '0');
  return "r" + s;
}

inline std::string grid_label(double beta, double gamma) {
  return "beta" + util::format_double(beta) + "_gamma" + util::format_double(gamma);
}

/// Source disease plus the (beta x gamma) target grid, zeta and mu inherited
/// from the source. Every series gets its own derived stream.
inline std::vector<DiseaseSet> generate_grid(const SimConfig& config, const SirdParams& source,
                                             const std::vector<double>& betas,
                                             const std::vector<double>& gammas, int jobs = 1) {
  std::vector<DiseaseSet> sets;
  sets.push_back({"source", source, true, {}, {}});
  for (double b : betas)
    for (double g : gammas) {
      SirdParams p = source;
      p.beta = b;
      p.gamma = g;
      sets.push_back({grid_label(b, g), p, false, {}, {}});
    }

  for (auto& set : sets) {
    set.train.resize(static_cast<std::size_t>(config.replicates));
    set.test.resize(static_cast<std::size_t>(config.replicates));
  }
  std::size_t per_set = static_cast<std::size_t>(config.replicates) * 2;
  util::parallel_for(sets.size() * per_set, jobs, [&](std::size_t k) {
    auto& set = sets[k / per_set];
    std::size_t j = k % per_set;
    int rep = static_cast<int>(j / 2);
    bool test = (j % 2) != 0;
    auto& slot = test ? set.test[static_cast<std::size_t>(rep)] : set.train[static_cast<std::size_t>(rep)];
    slot = simulate(config, set.params, set.label, replicate_unit(rep), test ? "test" : "train");
  });
  return sets;
}

}  // namespace xferepi::simcore
