#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "xferepi/csv.hpp"
#include "xferepi/hash.hpp"
#include "xferepi/rng.hpp"
#include "xferepi/series.hpp"

namespace xferepi::datasets {

struct WindowConfig {
  int lags = 9;
  std::vector<int> horizons = {2, 3, 4, 5, 6, 7, 8, 9};
  int max_horizon = 9;

  /// Smallest usable target index. Every horizon shares it, so row sets are
  /// identical across horizons by construction.
  int first_target() const { return lags - 1 + max_horizon; }

  void validate() const {
    if (lags < 1) throw std::invalid_argument("lags must be >= 1");
    if (horizons.empty()) throw std::invalid_argument("horizons must be non-empty");
    for (std::size_t i = 0; i < horizons.size(); ++i) {
      if (horizons[i] < 1 || horizons[i] > max_horizon)
        throw std::invalid_argument("horizon outside [1, max_horizon]");
      if (i > 0 && horizons[i] <= horizons[i - 1])
        throw std::invalid_argument("horizons must be strictly increasing");
    }
  }
};

struct RowMeta {
  std::string series_id;
  int target_t = 0;
  int horizon = 0;
};

/// Flat row-major feature matrix with per-row provenance. Lag features are
/// ordered oldest first.
struct SupervisedDataset {
  int n_features = 0;
  std::vector<double> features;
  std::vector<double> targets;
  std::vector<RowMeta> meta;
  std::vector<std::string> warnings;

  std::size_t rows() const { return targets.size(); }

  std::span<const double> row(std::size_t i) const {
    return {features.data() + i * static_cast<std::size_t>(n_features),
            static_cast<std::size_t>(n_features)};
  }

  void push_row(std::span<const double> x, double y, RowMeta m) {
    features.insert(features.end(), x.begin(), x.end());
    targets.push_back(y);
    meta.push_back(std::move(m));
  }
};

/// Windows one series for one horizon. A row with target index t carries the
/// lag values v[t-h-lags+1 .. t-h]; targets start at lags-1+max_horizon so
/// that every horizon of the same series produces the same target set.
/// A series shorter than lags+max_horizon yields no rows plus a warning.
inline SupervisedDataset make_windows(const series::EpidemicSeries& s, const WindowConfig& cfg,
                                      int horizon) {
  cfg.validate();
  if (horizon < 1 || horizon > cfg.max_horizon)
    throw std::invalid_argument("horizon outside [1, max_horizon]");
  SupervisedDataset out;
  out.n_features = cfg.lags;
  const int len = static_cast<int>(s.values.size());
  if (len < cfg.lags + cfg.max_horizon) {
    out.warnings.push_back("series " + s.id() + " too short for windows (" +
                           std::to_string(len) + " < " +
                           std::to_string(cfg.lags + cfg.max_horizon) + ")");
    return out;
  }
  std::vector<double> row(static_cast<std::size_t>(cfg.lags));
  for (int t = cfg.first_target(); t < len; ++t) {
    const int start = t - horizon - cfg.lags + 1;
    for (int k = 0; k < cfg.lags; ++k)
      row[static_cast<std::size_t>(k)] = s.values[static_cast<std::size_t>(start + k)];
    out.push_row(row, s.values[static_cast<std::size_t>(t)], {s.id(), t, horizon});
  }
  return out;
}

inline void append(SupervisedDataset& into, const SupervisedDataset& from) {
  if (from.rows() == 0 && from.n_features == 0) return;
  if (into.n_features == 0 && into.rows() == 0) into.n_features = from.n_features;
  if (into.n_features != from.n_features)
    throw std::invalid_argument("cannot append datasets of differing arity");
  into.features.insert(into.features.end(), from.features.begin(), from.features.end());
  into.targets.insert(into.targets.end(), from.targets.begin(), from.targets.end());
  into.meta.insert(into.meta.end(), from.meta.begin(), from.meta.end());
  into.warnings.insert(into.warnings.end(), from.warnings.begin(), from.warnings.end());
}

/// Pools windows of every series, in collection order.
inline SupervisedDataset window_collection(const std::vector<series::EpidemicSeries>& all,
                                           const WindowConfig& cfg, int horizon) {
  SupervisedDataset out;
  out.n_features = cfg.lags;
  for (const auto& s : all) append(out, make_windows(s, cfg, horizon));
  return out;
}

/// Restricts per-horizon datasets to the (series, target index) pairs present
/// in all of them. With shared-warm-up windowing this is the identity; it
/// exists to make the fairness contract checkable.
inline void align_warmup(std::vector<SupervisedDataset>& sets) {
  if (sets.size() < 2) return;
  using Key = std::pair<std::string, int>;
  std::map<Key, std::size_t> common;
  for (const auto& m : sets[0].meta) ++common[{m.series_id, m.target_t}];
  for (std::size_t i = 1; i < sets.size(); ++i) {
    std::map<Key, std::size_t> counts;
    for (const auto& m : sets[i].meta) ++counts[{m.series_id, m.target_t}];
    for (auto& [key, c] : common) {
      auto it = counts.find(key);
      c = std::min(c, it == counts.end() ? 0 : it->second);
    }
  }
  for (auto& ds : sets) {
    SupervisedDataset kept;
    kept.n_features = ds.n_features;
    kept.warnings = ds.warnings;
    std::map<Key, std::size_t> used;
    for (std::size_t i = 0; i < ds.rows(); ++i) {
      Key key{ds.meta[i].series_id, ds.meta[i].target_t};
      auto it = common.find(key);
      if (it != common.end() && used[key] < it->second) {
        ++used[key];
        kept.push_row(ds.row(i), ds.targets[i], ds.meta[i]);
      }
    }
    ds = std::move(kept);
  }
}

/// Keeps rows whose target index falls strictly before the cutoff. Training
/// under cutoff c therefore never sees values at or past c as targets.
inline SupervisedDataset apply_cutoff(const SupervisedDataset& ds, int cutoff) {
  SupervisedDataset out;
  out.n_features = ds.n_features;
  out.warnings = ds.warnings;
  for (std::size_t i = 0; i < ds.rows(); ++i)
    if (ds.meta[i].target_t < cutoff) out.push_row(ds.row(i), ds.targets[i], ds.meta[i]);
  return out;
}

/// Disjoint train/test split over whole series. Sizes differ by at most one
/// at fraction 0.5; both halves are always non-empty.
inline std::pair<std::vector<series::EpidemicSeries>, std::vector<series::EpidemicSeries>>
split_units(const std::vector<series::EpidemicSeries>& all, double fraction, std::uint64_t seed) {
  if (all.size() < 2) throw std::invalid_argument("split needs at least two series");
  if (!(fraction > 0.0 && fraction < 1.0))
    throw std::invalid_argument("split fraction outside (0,1)");
  std::vector<std::size_t> idx(all.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  util::CounterRng rng(util::derive_stream(seed, "datasets/split"));
  util::shuffle(idx, rng);
  auto n_train = static_cast<std::size_t>(
      std::llround(fraction * static_cast<double>(all.size())));
  n_train = std::clamp<std::size_t>(n_train, 1, all.size() - 1);
  std::pair<std::vector<series::EpidemicSeries>, std::vector<series::EpidemicSeries>> out;
  for (std::size_t i = 0; i < idx.size(); ++i)
    (i < n_train ? out.first : out.second).push_back(all[idx[i]]);
  return out;
}

/// Per-series scale: max over the first `limit` values (whole series when
/// limit < 0), floored at 1 so flat series stay unscaled instead of dividing
/// by zero.
inline std::map<std::string, double> series_scales(const std::vector<series::EpidemicSeries>& all,
                                                   int limit = -1) {
  std::map<std::string, double> out;
  for (const auto& s : all) {
    std::size_t n = limit < 0 ? s.values.size()
                              : std::min<std::size_t>(s.values.size(),
                                                      static_cast<std::size_t>(limit));
    double m = 1.0;
    for (std::size_t i = 0; i < n; ++i) m = std::max(m, s.values[i]);
    out[s.id()] = m;
  }
  return out;
}

inline double median_scale(const std::map<std::string, double>& scales) {
  if (scales.empty()) throw std::invalid_argument("median_scale: empty scale map");
  std::vector<double> v;
  v.reserve(scales.size());
  for (const auto& [_, s] : scales) v.push_back(s);
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Divides features and target of each row by its series scale.
[[nodiscard]] inline SupervisedDataset scale_rows(const SupervisedDataset& ds,
                                                  const std::map<std::string, double>& scales) {
  SupervisedDataset out = ds;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto it = scales.find(out.meta[i].series_id);
    if (it == scales.end())
      throw std::invalid_argument("no scale for series " + out.meta[i].series_id);
    double s = it->second;
    for (int k = 0; k < out.n_features; ++k)
      out.features[i * static_cast<std::size_t>(out.n_features) + static_cast<std::size_t>(k)] /= s;
    out.targets[i] /= s;
  }
  return out;
}

inline std::string dataset_header(int lags) {
  std::string h = "series_id,target_t,horizon";
  for (int k = 1; k <= lags; ++k) h += ",lag_" + std::to_string(k);
  return h + ",target";
}

inline void write_dataset_csv(const std::string& path, const SupervisedDataset& ds) {
  util::CsvWriter out(path);
  out.raw_line(dataset_header(ds.n_features));
  std::vector<std::string> fields;
  for (std::size_t i = 0; i < ds.rows(); ++i) {
    fields.clear();
    fields.push_back(ds.meta[i].series_id);
    fields.push_back(util::format_int(ds.meta[i].target_t));
    fields.push_back(util::format_int(ds.meta[i].horizon));
    for (double v : ds.row(i)) fields.push_back(util::format_double(v));
    fields.push_back(util::format_double(ds.targets[i]));
    out.row(fields);
  }
}

inline SupervisedDataset read_dataset_csv(const std::string& path) {
  util::CsvReader in(path);
  std::vector<std::string_view> fields;
  if (!in.next(fields) || fields.size() < 5 || fields[0] != "series_id")
    throw std::runtime_error(in.where() + ": expected dataset header");
  SupervisedDataset ds;
  ds.n_features = static_cast<int>(fields.size()) - 4;
  std::string joined;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) joined += ',';
    joined += std::string(fields[i]);
  }
  if (joined != dataset_header(ds.n_features))
    throw std::runtime_error(in.where() + ": malformed dataset header");
  std::vector<double> row(static_cast<std::size_t>(ds.n_features));
  while (in.next(fields)) {
    if (fields.size() != static_cast<std::size_t>(ds.n_features) + 4)
      throw std::runtime_error(in.where() + ": wrong field count");
    RowMeta m;
    m.series_id = std::string(fields[0]);
    m.target_t = static_cast<int>(util::parse_int(fields[1], in.where()));
    m.horizon = static_cast<int>(util::parse_int(fields[2], in.where()));
    for (int k = 0; k < ds.n_features; ++k)
      row[static_cast<std::size_t>(k)] =
          util::parse_double(fields[static_cast<std::size_t>(k) + 3], in.where());
    ds.push_row(row, util::parse_double(fields.back(), in.where()), std::move(m));
  }
  return ds;
}

/// Content hash over the canonical CSV encoding of the rows.
inline std::uint64_t dataset_hash(const SupervisedDataset& ds) {
  std::uint64_t h = util::fnv1a64(dataset_header(ds.n_features));
  for (std::size_t i = 0; i < ds.rows(); ++i) {
    h = util::fnv1a64(ds.meta[i].series_id, h);
    h = util::fnv1a64(util::format_int(ds.meta[i].target_t), h);
    h = util::fnv1a64(util::format_int(ds.meta[i].horizon), h);
    for (double v : ds.row(i)) h = util::fnv1a64(util::format_double(v), h);
    h = util::fnv1a64(util::format_double(ds.targets[i]), h);
  }
  return h;
}

enum class GapFill { zero, interpolate };

/// Days since 1970-01-01 for a proleptic Gregorian date.
inline std::int64_t days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = static_cast<unsigned>((153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1);
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

/// Reads observed surveillance counts. Header must be city,week,cases
/// (integer week index) or city,date,cases (YYYY-MM-DD, bucketed into weeks
/// from each city's first report). Weeks with no row are filled per `fill`;
/// duplicate rows for a week are summed. Malformed input fails with the
/// offending line number.
inline std::vector<series::EpidemicSeries> read_observed_csv(const std::string& path,
                                                             GapFill fill = GapFill::zero,
                                                             const std::string& disease = "observed") {
  util::CsvReader in(path);
  std::vector<std::string_view> fields;
  if (!in.next(fields)) throw std::runtime_error(path + ": empty file");
  bool by_date;
  if (fields.size() == 3 && fields[0] == "city" && fields[1] == "week" && fields[2] == "cases")
    by_date = false;
  else if (fields.size() == 3 && fields[0] == "city" && fields[1] == "date" && fields[2] == "cases")
    by_date = true;
  else
    throw std::runtime_error(in.where() + ": expected header city,week,cases or city,date,cases");

  struct CityData {
    std::map<std::int64_t, double> by_index;  // week index or day number
    std::int64_t first = 0;
  };
  std::vector<std::string> order;
  std::map<std::string, CityData> cities;
  while (in.next(fields)) {
    if (fields.size() != 3) throw std::runtime_error(in.where() + ": expected 3 fields");
    std::string city(fields[0]);
    if (city.empty()) throw std::runtime_error(in.where() + ": empty city name");
    std::int64_t index;
    if (by_date) {
      auto sv = fields[1];
      if (sv.size() != 10 || sv[4] != '-' || sv[7] != '-')
        throw std::runtime_error(in.where() + ": expected YYYY-MM-DD date");
      int y = static_cast<int>(util::parse_int(sv.substr(0, 4), in.where()));
      int mo = static_cast<int>(util::parse_int(sv.substr(5, 2), in.where()));
      int d = static_cast<int>(util::parse_int(sv.substr(8, 2), in.where()));
      if (mo < 1 || mo > 12 || d < 1 || d > 31)
        throw std::runtime_error(in.where() + ": date out of range");
      index = days_from_civil(y, mo, d);
    } else {
      index = util::parse_int(fields[1], in.where());
      if (index < 0) throw std::runtime_error(in.where() + ": negative week index");
    }
    double cases = util::parse_double(fields[2], in.where());
    if (!(cases >= 0.0)) throw std::runtime_error(in.where() + ": negative case count");
    if (!cities.count(city)) {
      order.push_back(city);
      cities[city].first = index;
    }
    auto& cd = cities[city];
    cd.first = std::min(cd.first, index);
    cd.by_index[index] += cases;
  }

  std::vector<series::EpidemicSeries> out;
  for (const auto& city : order) {
    auto& cd = cities[city];
    std::map<std::int64_t, double> weekly;
    for (auto& [idx, cases] : cd.by_index)
      weekly[by_date ? (idx - cd.first) / 7 : idx - cd.first] += cases;
    series::EpidemicSeries s{disease, city, series::SeriesKind::incidence, {}};
    std::int64_t last = weekly.rbegin()->first;
    s.values.assign(static_cast<std::size_t>(last) + 1, 0.0);
    for (auto& [w, cases] : weekly) s.values[static_cast<std::size_t>(w)] = cases;
    if (fill == GapFill::interpolate) {
      std::int64_t prev = 0;
      for (auto it = weekly.begin(); it != weekly.end(); ++it) {
        std::int64_t cur = it->first;
        if (cur - prev > 1) {
          double lo = s.values[static_cast<std::size_t>(prev)];
          double hi = s.values[static_cast<std::size_t>(cur)];
          for (std::int64_t w = prev + 1; w < cur; ++w)
            s.values[static_cast<std::size_t>(w)] =
                lo + (hi - lo) * static_cast<double>(w - prev) / static_cast<double>(cur - prev);
        }
        prev = cur;
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Sums blocks of 7 values; a trailing partial week is dropped.
inline series::EpidemicSeries daily_to_weekly(const series::EpidemicSeries& s) {
  series::EpidemicSeries out{s.disease, s.unit, s.kind, {}};
  for (std::size_t start = 0; start + 7 <= s.values.size(); start += 7) {
    double acc = 0;
    for (std::size_t k = 0; k < 7; ++k) acc += s.values[start + k];
    out.values.push_back(acc);
  }
  return out;
}

}  // namespace xferepi::datasets
