// Estimation data model: CSV ingestion with schema mapping, instrument
// re-indexing, and first-stage diagnostics (mean gaps, one-sided KS,
// quantile-crossing flags).
#pragma once

#include <Eigen/Dense>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "driv/common.hpp"

namespace driv {

struct Schema {
  std::string outcome;
  std::string treatment;
  std::string instrument;
  std::vector<std::string> covariates;
  // Optional declared ordering of raw instrument codes. When present, codes
  // are re-indexed 0..K in this order and every declared code must occur.
  std::vector<double> instrument_order;
};

struct Dataset {
  Eigen::VectorXd outcome;         // Y
  Eigen::VectorXd treatment;       // T
  Eigen::MatrixXd covariates;      // X, n x d_x
  std::vector<int> instrument;     // Z, dense codes 0..K
  int n = 0;
  int d_x = 0;
  int K = 0;  // codes are 0..K
  std::map<int, std::string> instrument_labels;
  std::string outcome_name = "y";
  std::string treatment_name = "t";
  std::string instrument_name = "z";
  std::vector<std::string> covariate_names;
  int dropped_rows = 0;
  bool treatment_ties = false;
  bool discrete_suspect = false;
  std::vector<std::string> warnings;

  std::vector<int> cell_rows(int code) const {
    std::vector<int> rows;
    for (int i = 0; i < n; ++i)
      if (instrument[static_cast<size_t>(i)] == code) rows.push_back(i);
    return rows;
  }
  int cell_count(int code) const {
    int c = 0;
    for (int z : instrument) c += (z == code);
    return c;
  }
};

namespace detail {

// One CSV record, RFC-4180 quoting. Returns false at end of stream.
inline bool read_csv_record(std::istream& in, std::vector<std::string>& out) {
  out.clear();
  std::string field;
  bool in_quotes = false;
  bool saw_any = false;
  int ch;
  while ((ch = in.get()) != EOF) {
    saw_any = true;
    char c = static_cast<char>(ch);
    if (in_quotes) {
      if (c == '"') {
        if (in.peek() == '"') {
          field.push_back('"');
          in.get();
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      in_quotes = true;
    } else if (c == ',') {
      out.push_back(field);
      field.clear();
    } else if (c == '\n') {
      break;
    } else if (c == '\r') {
      if (in.peek() == '\n') in.get();
      break;
    } else {
      field.push_back(c);
    }
  }
  if (!saw_any) return false;
  out.push_back(field);
  return true;
}

inline std::string trim_ws(const std::string& s) {
  size_t a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t");
  return s.substr(a, b - a + 1);
}

inline bool is_missing_token(const std::string& s) {
  std::string t = trim_ws(s);
  if (t.empty()) return true;
  std::string u;
  for (char c : t) u.push_back(static_cast<char>(std::toupper(c)));
  return u == "NA" || u == "NAN" || u == "NULL" || u == ".";
}

inline std::optional<double> parse_number(const std::string& s) {
  std::string t = trim_ws(s);
  if (t.empty()) return std::nullopt;
  const char* begin = t.c_str();
  char* end = nullptr;
  double val = std::strtod(begin, &end);
  if (end == begin || *end != '\0') return std::nullopt;
  if (!std::isfinite(val)) return std::nullopt;
  return val;
}

inline std::string format_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline Dataset load_dataset(std::istream& in, const Schema& schema) {
  require(!schema.outcome.empty() && !schema.treatment.empty() &&
              !schema.instrument.empty(),
          ErrorKind::schema,
          "schema must name outcome, treatment and instrument columns");
  std::vector<std::string> header;
  require(detail::read_csv_record(in, header), ErrorKind::parse,
          "empty input: no header row");
  std::map<std::string, int> col_of;
  for (size_t j = 0; j < header.size(); ++j) {
    col_of[detail::trim_ws(header[j])] = static_cast<int>(j);
  }
  auto col_index = [&](const std::string& name) {
    auto it = col_of.find(name);
    require(it != col_of.end(), ErrorKind::schema,
            "column '" + name + "' not found in header");
    return it->second;
  };
  const int cy = col_index(schema.outcome);
  const int ct = col_index(schema.treatment);
  const int cz = col_index(schema.instrument);
  std::vector<int> cx;
  for (const auto& name : schema.covariates) cx.push_back(col_index(name));
  const int d_x = static_cast<int>(cx.size());

  std::vector<double> ys, ts, zs;
  std::vector<std::vector<double>> xs(static_cast<size_t>(d_x));
  std::vector<std::string> record;
  int line = 1;
  int dropped = 0;
  while (detail::read_csv_record(in, record)) {
    ++line;
    if (record.size() == 1 && detail::trim_ws(record[0]).empty()) continue;
    require(record.size() == header.size(), ErrorKind::parse,
            "row " + std::to_string(line) + " has " +
                std::to_string(record.size()) + " fields, expected " +
                std::to_string(header.size()));
    bool missing = false;
    auto get = [&](int c) -> double {
      const std::string& cell = record[static_cast<size_t>(c)];
      if (detail::is_missing_token(cell)) {
        missing = true;
        return 0.0;
      }
      auto v = detail::parse_number(cell);
      require(v.has_value(), ErrorKind::parse,
              "non-numeric cell at row " + std::to_string(line) +
                  ", column '" + detail::trim_ws(header[static_cast<size_t>(c)]) +
                  "': '" + cell + "'");
      return *v;
    };
    double y = get(cy), t = get(ct), z = get(cz);
    std::vector<double> xrow(static_cast<size_t>(d_x));
    for (int j = 0; j < d_x; ++j) xrow[static_cast<size_t>(j)] = get(cx[static_cast<size_t>(j)]);
    if (missing) {
      ++dropped;
      continue;
    }
    ys.push_back(y);
    ts.push_back(t);
    zs.push_back(z);
    for (int j = 0; j < d_x; ++j) xs[static_cast<size_t>(j)].push_back(xrow[static_cast<size_t>(j)]);
  }
  const int n = static_cast<int>(ys.size());
  require(n >= 1, ErrorKind::parse, "no usable data rows after ingestion");

  // Dense re-indexing of instrument codes.
  std::vector<double> raw_order;
  if (!schema.instrument_order.empty()) {
    raw_order = schema.instrument_order;
  } else {
    std::set<double> uniq(zs.begin(), zs.end());
    raw_order.assign(uniq.begin(), uniq.end());
  }
  std::map<double, int> code_of;
  for (size_t k = 0; k < raw_order.size(); ++k)
    code_of[raw_order[k]] = static_cast<int>(k);

  Dataset d;
  d.n = n;
  d.d_x = d_x;
  d.K = static_cast<int>(raw_order.size()) - 1;
  d.outcome = Eigen::Map<Eigen::VectorXd>(ys.data(), n);
  d.treatment = Eigen::Map<Eigen::VectorXd>(ts.data(), n);
  d.covariates.resize(n, d_x);
  for (int j = 0; j < d_x; ++j)
    for (int i = 0; i < n; ++i)
      d.covariates(i, j) = xs[static_cast<size_t>(j)][static_cast<size_t>(i)];
  d.instrument.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto it = code_of.find(zs[static_cast<size_t>(i)]);
    require(it != code_of.end(), ErrorKind::support,
            "instrument value " + detail::format_full(zs[static_cast<size_t>(i)]) +
                " not in declared instrument order");
    d.instrument[static_cast<size_t>(i)] = it->second;
  }
  for (size_t k = 0; k < raw_order.size(); ++k)
    d.instrument_labels[static_cast<int>(k)] = detail::format_full(raw_order[k]);
  d.outcome_name = schema.outcome;
  d.treatment_name = schema.treatment;
  d.instrument_name = schema.instrument;
  d.covariate_names = schema.covariates;
  d.dropped_rows = dropped;
  if (dropped > 0)
    d.warnings.push_back(std::to_string(dropped) +
                         " row(s) with missing fields dropped at ingestion");

  // Support check: every code 0..K occurs at least once.
  std::vector<int> counts(raw_order.size(), 0);
  for (int z : d.instrument) counts[static_cast<size_t>(z)]++;
  for (size_t k = 0; k < counts.size(); ++k) {
    require(counts[k] > 0, ErrorKind::support,
            "instrument class with raw value " + detail::format_full(raw_order[k]) +
                " has no observations");
  }

  // Continuity heuristics on T.
  std::set<double> t_uniq(ts.begin(), ts.end());
  d.treatment_ties = static_cast<int>(t_uniq.size()) < n;
  d.discrete_suspect = static_cast<double>(t_uniq.size()) < 0.5 * n;
  if (d.treatment_ties)
    d.warnings.push_back("treatment has tied values");
  if (d.discrete_suspect)
    d.warnings.push_back(
        "treatment flagged discrete-suspect: fewer than n/2 distinct values");
  return d;
}

inline Dataset load_dataset_file(const std::string& path, const Schema& schema) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::parse, "cannot open data file: " + path);
  return load_dataset(in, schema);
}

inline void save_dataset(std::ostream& out, const Dataset& d) {
  out << d.outcome_name << "," << d.treatment_name;
  for (const auto& c : d.covariate_names) out << "," << c;
  out << "," << d.instrument_name << "\n";
  for (int i = 0; i < d.n; ++i) {
    out << detail::format_full(d.outcome(i)) << ","
        << detail::format_full(d.treatment(i));
    for (int j = 0; j < d.d_x; ++j)
      out << "," << detail::format_full(d.covariates(i, j));
    out << "," << d.instrument[static_cast<size_t>(i)] << "\n";
  }
}

// ---------------------------------------------------------------------------
// Diagnostics

struct PairDiagnostics {
  int low_code = 0;
  int high_code = 1;
  double mean_gap = 0.0;      // mean T in high cell minus low cell
  double mean_gap_se = 0.0;
  double ks_statistic = 0.0;  // one-sided: violation of high >= low dominance
  double ks_pvalue = 1.0;
  bool quantile_crossing = false;
};

struct Diagnostics {
  std::map<int, int> cell_counts;
  std::map<int, double> mean_treatment_by_cell;
  std::vector<PairDiagnostics> pairs;
  std::vector<std::string> warnings;
};

inline Diagnostics diagnose(const Dataset& d, int grid_size) {
  require(grid_size >= 2, ErrorKind::config, "diagnose: grid_size must be >= 2");
  Diagnostics out;
  out.warnings = d.warnings;
  std::map<int, std::vector<double>> samples;
  for (int i = 0; i < d.n; ++i)
    samples[d.instrument[static_cast<size_t>(i)]].push_back(d.treatment(i));
  for (auto& [code, vals] : samples) {
    out.cell_counts[code] = static_cast<int>(vals.size());
    out.mean_treatment_by_cell[code] = mean(vals);
    std::sort(vals.begin(), vals.end());
  }
  for (int k = 1; k <= d.K; ++k) {
    const auto& lo = samples[k - 1];
    const auto& hi = samples[k];
    PairDiagnostics pd;
    pd.low_code = k - 1;
    pd.high_code = k;
    pd.mean_gap = mean(hi) - mean(lo);
    double v_lo = sample_sd(lo), v_hi = sample_sd(hi);
    pd.mean_gap_se = std::sqrt(v_hi * v_hi / static_cast<double>(hi.size()) +
                               v_lo * v_lo / static_cast<double>(lo.size()));
    // One-sided two-sample KS: sup_t { Fhat_hi(t) - Fhat_lo(t) }, positive
    // values measure violations of first-order dominance of the high cell.
    double dplus = 0.0;
    {
      size_t i = 0, j = 0;
      const double n1 = static_cast<double>(lo.size());
      const double n2 = static_cast<double>(hi.size());
      while (i < lo.size() && j < hi.size()) {
        double t = std::min(lo[i], hi[j]);
        while (i < lo.size() && lo[i] <= t) ++i;
        while (j < hi.size() && hi[j] <= t) ++j;
        double diff = static_cast<double>(j) / n2 - static_cast<double>(i) / n1;
        dplus = std::max(dplus, diff);
      }
      dplus = std::max(dplus, 0.0);
      double en = std::sqrt(n1 * n2 / (n1 + n2));
      pd.ks_statistic = dplus;
      pd.ks_pvalue = std::min(1.0, std::exp(-2.0 * en * en * dplus * dplus));
    }
    // Empirical quantile gap sign switches over a midpoint grid.
    bool any_pos = false, any_neg = false;
    const double tol = 1e-12 * (1.0 + std::abs(mean(hi)) + std::abs(mean(lo)));
    for (int j = 1; j <= grid_size; ++j) {
      double u = (static_cast<double>(j) - 0.5) / static_cast<double>(grid_size);
      double gap = quantile_sorted(hi, u) - quantile_sorted(lo, u);
      if (gap > tol) any_pos = true;
      if (gap < -tol) any_neg = true;
    }
    pd.quantile_crossing = any_pos && any_neg;
    out.pairs.push_back(pd);
  }
  return out;
}

}  // namespace driv
