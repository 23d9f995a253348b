#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "xferepi/csv.hpp"
#include "xferepi/datasets.hpp"
#include "xferepi/series.hpp"

namespace xferepi::evaluate {

struct EvalRecord {
  std::string regime;
  std::string disease;
  std::string city;  // replicate series id
  int horizon = 0;
  int cutoff = 0;
  double mae = 0.0;
  double pmae = 0.0;
};

/// mean(|prediction - truth|) / total_cases
inline double percent_mae(const std::vector<double>& predictions,
                          const std::vector<double>& truths, double total_cases) {
  if (predictions.empty() || predictions.size() != truths.size())
    throw std::invalid_argument("percent_mae: empty or mismatched inputs");
  if (!(total_cases > 0.0)) throw std::invalid_argument("percent_mae: total cases must be positive");
  double acc = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) acc += std::abs(predictions[i] - truths[i]);
  return acc / static_cast<double>(predictions.size()) / total_cases;
}

/// NaN when either side has zero variance.
inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || a.size() != b.size())
    throw std::invalid_argument("pearson: empty or mismatched inputs");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty input");
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Quantile by linear interpolation between order statistics.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("quantile: empty input");
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("quantile: q outside [0,1]");
  std::sort(v.begin(), v.end());
  double pos = q * static_cast<double>(v.size() - 1);
  std::size_t lo = static_cast<std::size_t>(pos);
  double frac = pos - static_cast<double>(lo);
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] * (1.0 - frac) + v[lo + 1] * frac;
}

struct SimilarityEntry {
  double beta = 0.0;
  double gamma = 0.0;
  double median_corr = 0.0;
  std::size_t pairs_used = 0;
  std::size_t pairs_skipped = 0;  // zero-variance pairs
};

/// Median pairwise Pearson correlation over every (source replicate, target
/// replicate) pair of raw series values. Zero-variance pairs are skipped and
/// counted. No usable pair leaves median_corr at NaN.
inline SimilarityEntry similarity_entry(const std::vector<series::EpidemicSeries>& source,
                                        const std::vector<series::EpidemicSeries>& target,
                                        double beta, double gamma) {
  SimilarityEntry out;
  out.beta = beta;
  out.gamma = gamma;
  std::vector<double> corrs;
  corrs.reserve(source.size() * target.size());
  for (const auto& s : source)
    for (const auto& t : target) {
      if (s.values.size() != t.values.size())
        throw std::invalid_argument("similarity_entry: series lengths differ");
      double c = pearson(s.values, t.values);
      if (std::isnan(c))
        ++out.pairs_skipped;
      else
        corrs.push_back(c);
    }
  out.pairs_used = corrs.size();
  out.median_corr =
      corrs.empty() ? std::numeric_limits<double>::quiet_NaN() : median(std::move(corrs));
  return out;
}

/// Per-series records for one (regime, disease, horizon, cutoff) prediction
/// batch. Series with no recorded cases are excluded and named in `excluded`.
inline std::vector<EvalRecord> score_predictions(
    const std::string& regime, const std::string& disease,
    const datasets::SupervisedDataset& test, const std::vector<double>& predictions, int horizon,
    int cutoff, const std::map<std::string, double>& total_cases,
    std::vector<std::string>* excluded = nullptr) {
  if (predictions.size() != test.rows())
    throw std::invalid_argument("score_predictions: prediction count mismatch");
  std::map<std::string, std::pair<double, std::size_t>> acc;  // abs error sum, rows
  for (std::size_t i = 0; i < test.rows(); ++i) {
    auto& a = acc[test.meta[i].series_id];
    a.first += std::abs(predictions[i] - test.targets[i]);
    a.second += 1;
  }
  std::vector<EvalRecord> out;
  out.reserve(acc.size());
  for (const auto& [city, a] : acc) {
    auto it = total_cases.find(city);
    if (it == total_cases.end()) throw std::invalid_argument("score_predictions: no total for " + city);
    double mae = a.first / static_cast<double>(a.second);
    if (!(it->second > 0.0)) {
      if (excluded) excluded->push_back(city);
      continue;
    }
    out.push_back({regime, disease, city, horizon, cutoff, mae, mae / it->second});
  }
  return out;
}

struct BestModelRow {
  int horizon = 0;
  int cutoff = 0;
  std::string regime;
  std::size_t count = 0;  // cells won, ties going to the smallest tag
  std::size_t ties = 0;   // cells where this regime tied for best
};

struct BestModelTable {
  std::vector<BestModelRow> rows;
  std::size_t scored_cells = 0;
  std::vector<std::string> warnings;  // skipped cells
};

/// One scoring cell per (disease, city, horizon, cutoff). Cells missing any
/// regime seen elsewhere are skipped. Minimal pmae wins; exact ties go to the
/// lexicographically smallest tag and every tied regime's `ties` increments.
inline BestModelTable best_model_frequency(const std::vector<EvalRecord>& records) {
  BestModelTable out;
  std::set<std::string> regimes;
  for (const auto& r : records) regimes.insert(r.regime);

  using CellKey = std::tuple<std::string, std::string, int, int>;
  std::map<CellKey, std::map<std::string, double>> cells;
  for (const auto& r : records) {
    auto& cell = cells[{r.disease, r.city, r.horizon, r.cutoff}];
    if (!cell.emplace(r.regime, r.pmae).second)
      throw std::invalid_argument("best_model_frequency: duplicate record for " + r.disease + "/" +
                                  r.city + " regime " + r.regime);
  }

  std::map<std::pair<int, int>, std::map<std::string, std::pair<std::size_t, std::size_t>>> table;
  for (const auto& [key, cell] : cells) {
    const auto& [disease, city, horizon, cutoff] = key;
    if (cell.size() != regimes.size()) {
      out.warnings.push_back("cell " + disease + "/" + city + " h" + std::to_string(horizon) +
                             " c" + std::to_string(cutoff) + " missing regimes, skipped");
      continue;
    }
    double best = std::numeric_limits<double>::infinity();
    for (const auto& [_, pmae] : cell) best = std::min(best, pmae);
    std::vector<std::string> winners;
    for (const auto& [regime, pmae] : cell)
      if (pmae == best) winners.push_back(regime);
    ++out.scored_cells;
    auto& slot = table[{horizon, cutoff}];
    ++slot[winners.front()].first;  // map order is lexicographic
    if (winners.size() > 1)
      for (const auto& w : winners) ++slot[w].second;
  }

  for (const auto& [hc, per_regime] : table)
    for (const auto& regime : regimes) {
      auto it = per_regime.find(regime);
      out.rows.push_back({hc.first, hc.second, regime, it == per_regime.end() ? 0 : it->second.first,
                          it == per_regime.end() ? 0 : it->second.second});
    }
  return out;
}

struct PmaeSummaryRow {
  std::string disease;
  std::string regime;
  int horizon = 0;
  int cutoff = 0;
  std::size_t cities = 0;
  double q1 = 0.0;
  double med = 0.0;
  double q3 = 0.0;
};

inline std::vector<PmaeSummaryRow> pmae_summaries(const std::vector<EvalRecord>& records) {
  std::map<std::tuple<std::string, std::string, int, int>, std::vector<double>> groups;
  for (const auto& r : records) groups[{r.disease, r.regime, r.horizon, r.cutoff}].push_back(r.pmae);
  std::vector<PmaeSummaryRow> out;
  out.reserve(groups.size());
  for (const auto& [key, pmaes] : groups) {
    const auto& [disease, regime, horizon, cutoff] = key;
    out.push_back({disease, regime, horizon, cutoff, pmaes.size(), quantile(pmaes, 0.25),
                   median(pmaes), quantile(pmaes, 0.75)});
  }
  return out;
}

struct Report {
  std::string errors_csv;
  std::string best_models_csv;
  std::string similarity_csv;
  std::string pmae_summary_csv;
  std::string summary_txt;
};

/// Pure function of its inputs; rerunning on the same data yields the same
/// bytes. Record order does not matter, everything is sorted internally.
inline Report assemble_report(std::vector<EvalRecord> records,
                              std::vector<SimilarityEntry> similarity,
                              std::vector<std::string> zero_case_cities = {}) {
  Report rep;

  std::sort(records.begin(), records.end(), [](const EvalRecord& a, const EvalRecord& b) {
    return std::tie(a.disease, a.city, a.horizon, a.cutoff, a.regime) <
           std::tie(b.disease, b.city, b.horizon, b.cutoff, b.regime);
  });
  std::ostringstream errors;
  errors << "regime,disease,city,horizon,cutoff,mae,pmae\n";
  for (const auto& r : records)
    errors << r.regime << ',' << r.disease << ',' << r.city << ',' << r.horizon << ',' << r.cutoff
           << ',' << util::format_double(r.mae) << ',' << util::format_double(r.pmae) << "\n";
  rep.errors_csv = errors.str();

  auto best = best_model_frequency(records);
  std::ostringstream bm;
  bm << "horizon,cutoff,regime,count,ties\n";
  for (const auto& row : best.rows)
    bm << row.horizon << ',' << row.cutoff << ',' << row.regime << ',' << row.count << ','
       << row.ties << "\n";
  rep.best_models_csv = bm.str();

  std::sort(similarity.begin(), similarity.end(),
            [](const SimilarityEntry& a, const SimilarityEntry& b) {
              return std::tie(a.beta, a.gamma) < std::tie(b.beta, b.gamma);
            });
  std::ostringstream sim;
  sim << "beta,gamma,median_corr,pairs_used\n";
  for (const auto& e : similarity)
    sim << util::format_double(e.beta) << ',' << util::format_double(e.gamma) << ','
        << util::format_double(e.median_corr) << ',' << e.pairs_used << "\n";
  rep.similarity_csv = sim.str();

  auto summaries = pmae_summaries(records);
  std::ostringstream ps;
  ps << "disease,regime,horizon,cutoff,cities,pmae_q1,pmae_median,pmae_q3\n";
  for (const auto& s : summaries)
    ps << s.disease << ',' << s.regime << ',' << s.horizon << ',' << s.cutoff << ',' << s.cities
       << ',' << util::format_double(s.q1) << ',' << util::format_double(s.med) << ','
       << util::format_double(s.q3) << "\n";
  rep.pmae_summary_csv = ps.str();

  std::ostringstream txt;
  txt << "evaluation records: " << records.size() << "\n";
  txt << "scored best-model cells: " << best.scored_cells << "\n";
  for (const auto& w : best.warnings) txt << "warning: " << w << "\n";
  if (!similarity.empty()) {
    txt << "similarity grid (median Pearson vs source):\n";
    for (const auto& e : similarity)
      txt << "  beta=" << util::format_double(e.beta) << " gamma=" << util::format_double(e.gamma)
          << " median_corr=" << util::format_double(e.median_corr) << " pairs=" << e.pairs_used
          << (e.pairs_skipped ? " skipped=" + std::to_string(e.pairs_skipped) : "") << "\n";
  }
  std::sort(zero_case_cities.begin(), zero_case_cities.end());
  zero_case_cities.erase(std::unique(zero_case_cities.begin(), zero_case_cities.end()),
                         zero_case_cities.end());
  if (!zero_case_cities.empty()) {
    txt << "coverage appendix, zero-case cities excluded from pmae:\n";
    for (const auto& c : zero_case_cities) txt << "  " << c << "\n";
  }
  if (!summaries.empty()) {
    txt << "median pmae by disease/regime (lowest horizon, lowest cutoff):\n";
    int h0 = summaries.front().horizon, c0 = summaries.front().cutoff;
    for (const auto& s : summaries) {
      h0 = std::min(h0, s.horizon);
      c0 = std::min(c0, s.cutoff);
    }
    for (const auto& s : summaries)
      if (s.horizon == h0 && s.cutoff == c0)
        txt << "  " << s.disease << " " << s.regime << " median=" << util::format_double(s.med)
            << "\n";
  }
  rep.summary_txt = txt.str();
  return rep;
}

}  // namespace xferepi::evaluate
