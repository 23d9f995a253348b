#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "xferepi/csv.hpp"

namespace xferepi::series {

enum class SeriesKind { incidence, prevalence };

/// One observed or simulated case-count sequence at a fixed time step.
/// `unit` names the replicate or city the sequence belongs to.
struct EpidemicSeries {
  std::string disease;
  std::string unit;
  SeriesKind kind = SeriesKind::incidence;
  std::vector<double> values;

  std::string id() const { return disease + "/" + unit; }

  double total() const {
    double acc = 0.0;
    for (double v : values) acc += v;
    return acc;
  }

  void validate() const {
    for (double v : values)
      if (!(v >= 0.0)) throw std::invalid_argument("series " + id() + ": negative or NaN value");
  }
};

/// Columns: disease, replicate, t, cases. Rows grouped by series, t ascending.
inline void write_series_csv(const std::string& path, const std::vector<EpidemicSeries>& all) {
  util::CsvWriter out(path);
  out.raw_line("disease,replicate,t,cases");
  for (const auto& s : all)
    for (std::size_t t = 0; t < s.values.size(); ++t)
      out.row({s.disease, s.unit, util::format_int(static_cast<std::int64_t>(t)),
               util::format_double(s.values[t])});
}

inline std::vector<EpidemicSeries> read_series_csv(const std::string& path) {
  util::CsvReader in(path);
  std::vector<std::string_view> fields;
  if (!in.next(fields) || fields.size() != 4 || fields[0] != "disease")
    throw std::runtime_error(in.where() + ": expected header disease,replicate,t,cases");
  std::vector<EpidemicSeries> out;
  while (in.next(fields)) {
    if (fields.size() != 4) throw std::runtime_error(in.where() + ": expected 4 fields");
    std::string disease(fields[0]);
    std::string unit(fields[1]);
    std::int64_t t = util::parse_int(fields[2], in.where());
    double cases = util::parse_double(fields[3], in.where());
    if (out.empty() || out.back().disease != disease || out.back().unit != unit) {
      out.push_back({disease, unit, SeriesKind::incidence, {}});
      if (t != 0) throw std::runtime_error(in.where() + ": series must start at t=0");
    } else if (t != static_cast<std::int64_t>(out.back().values.size())) {
      throw std::runtime_error(in.where() + ": non-contiguous t for series " + out.back().id());
    }
    out.back().values.push_back(cases);
  }
  return out;
}

}  // namespace xferepi::series
