// Monte Carlo harness: generate -> estimate per replicate, aggregate bias,
// dispersion and CI coverage against the quadrature oracle.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "driv/common.hpp"
#include "driv/driver.hpp"
#include "driv/oracle.hpp"
#include "driv/simulate.hpp"

namespace driv {

struct McEstimator {
  std::string label;
  EstimatorRequest request;
  OracleTarget target;
};

struct McRow {
  std::string label;
  double oracle_value = std::numeric_limits<double>::quiet_NaN();
  double oracle_bound = 0.0;
  double mean = std::numeric_limits<double>::quiet_NaN();
  double bias = std::numeric_limits<double>::quiet_NaN();
  double sd = std::numeric_limits<double>::quiet_NaN();
  double rmse = std::numeric_limits<double>::quiet_NaN();
  double se_mean = std::numeric_limits<double>::quiet_NaN();
  double coverage = std::numeric_limits<double>::quiet_NaN();
  int failures = 0;
  int reps_used = 0;
};

struct McReport {
  std::vector<McRow> rows;
  int reps = 0;
  int n = 0;
  uint64_t seed = 0;
  bool flagged = false;  // some estimator failed in > 20% of replicates
  std::vector<std::string> warnings;
};

inline McReport monte_carlo(const CompiledDgp& dgp,
                            const std::vector<McEstimator>& estimators,
                            int reps, int n, uint64_t seed, int workers = 0,
                            int oracle_resolution = 256) {
  require(reps >= 2, ErrorKind::config, "monte_carlo needs reps >= 2");
  McReport report;
  report.reps = reps;
  report.n = n;
  report.seed = seed;

  std::vector<OracleResult> truths;
  truths.reserve(estimators.size());
  for (const auto& est : estimators)
    truths.push_back(oracle(dgp, est.target, oracle_resolution));

  struct Cell {
    bool ok = false;
    double point = 0.0, lo = 0.0, hi = 0.0, se = 0.0;
    bool has_se = false;
  };
  std::vector<std::vector<Cell>> slots(
      estimators.size(), std::vector<Cell>(static_cast<size_t>(reps)));

  parallel_for(static_cast<size_t>(reps), workers, [&](size_t r) {
    Dataset d = generate(dgp, n, mix_seed(seed, r));
    for (size_t e = 0; e < estimators.size(); ++e) {
      EstimatorRequest req = estimators[e].request;
      req.config.workers = 1;
      req.seed = mix_seed(seed, 0x0B00757269ULL + r);
      Cell& cell = slots[e][r];
      try {
        std::vector<EstimateReport> res = run_estimator(d, req);
        require(res.size() == 1, ErrorKind::config,
                "monte_carlo estimators must produce a single report");
        cell.point = res[0].point;
        cell.lo = res[0].ci_lo;
        cell.hi = res[0].ci_hi;
        if (res[0].se_plugin.has_value()) {
          cell.se = *res[0].se_plugin;
          cell.has_se = true;
        } else if (res[0].se_bootstrap.has_value()) {
          cell.se = *res[0].se_bootstrap;
          cell.has_se = true;
        }
        cell.ok = std::isfinite(cell.point);
      } catch (const Error&) {
        cell.ok = false;
      }
    }
  });

  for (size_t e = 0; e < estimators.size(); ++e) {
    McRow row;
    row.label = estimators[e].label;
    row.oracle_value = truths[e].value;
    row.oracle_bound = truths[e].error_bound;
    std::vector<double> points, ses;
    int covered = 0, with_ci = 0;
    for (int r = 0; r < reps; ++r) {
      const Cell& cell = slots[e][static_cast<size_t>(r)];
      if (!cell.ok) {
        ++row.failures;
        continue;
      }
      points.push_back(cell.point);
      if (cell.has_se) {
        ses.push_back(cell.se);
        ++with_ci;
        if (cell.lo <= truths[e].value && truths[e].value <= cell.hi) ++covered;
      }
    }
    row.reps_used = static_cast<int>(points.size());
    if (!points.empty()) {
      row.mean = mean(points);
      row.bias = row.mean - truths[e].value;
      row.sd = sample_sd(points);
      row.rmse = std::sqrt(row.bias * row.bias + row.sd * row.sd);
    }
    if (!ses.empty()) row.se_mean = mean(ses);
    if (with_ci > 0) row.coverage = static_cast<double>(covered) / with_ci;
    if (row.failures > 0.20 * reps) {
      report.flagged = true;
      report.warnings.push_back(row.label + " failed in " +
                                std::to_string(row.failures) + " of " +
                                std::to_string(reps) + " replicates");
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace driv
