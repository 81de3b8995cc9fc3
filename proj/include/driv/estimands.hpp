// Point estimands: Wald ratio, covariate-adjusted Wald, trimmed quantile-gap
// ratios pi(x,v), pi(v), the doubly robust aggregate and its signed variants,
// instrument-pair weights for a multi-valued instrument, and the
// distributional-outcome wrapper.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "driv/common.hpp"
#include "driv/dataset.hpp"
#include "driv/quantreg.hpp"
#include "driv/sieve.hpp"

namespace driv {

enum class SignMode { absolute, positive, negative };

inline const char* sign_mode_name(SignMode s) {
  switch (s) {
    case SignMode::absolute: return "abs";
    case SignMode::positive: return "positive";
    case SignMode::negative: return "negative";
  }
  return "abs";
}

struct TrimRule {
  enum Kind { baseline, multiple, fixed } kind = baseline;
  double value = 1.0;  // multiplier for `multiple`, threshold for `fixed`

  static TrimRule Baseline() { return {baseline, 1.0}; }
  static TrimRule Multiple(double m) { return {multiple, m}; }
  static TrimRule Fixed(double rho) { return {fixed, rho}; }
};

struct TrimmingSpec {
  double rho = 0.0;
  TrimRule rule;
  std::vector<std::string> warnings;
};

struct EstimandConfig {
  int grid_l = 99;
  BasisSpec basis;  // default: power, J=2 (constant + linear term in t)
  TrimRule trim = TrimRule::Baseline();
  SignMode sign = SignMode::absolute;
  bool use_covariates = true;
  std::pair<int, int> pair{0, 1};
  bool multi = false;
  bool rearrange_quantiles = true;
  QrOptions qr;
  double level = 0.95;
  int workers = 0;
};

struct EstimateReport {
  std::string estimand_id;
  double point = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> se_plugin;
  std::optional<double> se_bootstrap;
  double ci_lo = std::numeric_limits<double>::quiet_NaN();
  double ci_hi = std::numeric_limits<double>::quiet_NaN();
  double ci_level = 0.95;
  double trimmed_fraction = 0.0;
  double b_hat = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> b_plus;
  std::optional<double> b_minus;
  struct PairBreakdown {
    std::pair<int, int> pair;
    double lambda = 0.0;
    double point = std::numeric_limits<double>::quiet_NaN();
    double se = std::numeric_limits<double>::quiet_NaN();
    double b_hat = std::numeric_limits<double>::quiet_NaN();
    double trimmed_fraction = 0.0;
    bool degenerate = false;
  };
  std::vector<PairBreakdown> per_pair;
  std::vector<std::string> warnings;
};

// ---------------------------------------------------------------------------
// Wald ratio and its covariate-adjusted version.

namespace estdetail {

struct CellMoments {
  double y_mean = 0, t_mean = 0, y_var = 0, t_var = 0, yt_cov = 0;
  int count = 0;
};

inline CellMoments cell_moments(const Dataset& d, int code) {
  CellMoments m;
  for (int i = 0; i < d.n; ++i) {
    if (d.instrument[static_cast<size_t>(i)] != code) continue;
    ++m.count;
    m.y_mean += d.outcome(i);
    m.t_mean += d.treatment(i);
  }
  require(m.count > 0, ErrorKind::support,
          "instrument cell " + std::to_string(code) + " is empty");
  m.y_mean /= m.count;
  m.t_mean /= m.count;
  for (int i = 0; i < d.n; ++i) {
    if (d.instrument[static_cast<size_t>(i)] != code) continue;
    double dy = d.outcome(i) - m.y_mean, dt = d.treatment(i) - m.t_mean;
    m.y_var += dy * dy;
    m.t_var += dt * dt;
    m.yt_cov += dy * dt;
  }
  if (m.count > 1) {
    m.y_var /= (m.count - 1);
    m.t_var /= (m.count - 1);
    m.yt_cov /= (m.count - 1);
  }
  return m;
}

inline double treatment_sd(const Dataset& d) {
  std::vector<double> t(d.treatment.data(), d.treatment.data() + d.n);
  return sample_sd(t);
}

// Errors when the mean first stage is numerically negligible (absolute floor
// relative to the treatment scale) or statistically indistinguishable from
// zero at the 5% level.
inline void check_first_stage(double denom, double denom_se, double sd_t) {
  const bool negligible = std::abs(denom) < 1e-3 * std::max(sd_t, 1e-300);
  const bool insignificant = std::abs(denom) < 1.959963984540054 * denom_se;
  if (negligible || insignificant) {
    fail(ErrorKind::weak_first_stage,
         "first-stage mean treatment change " + std::to_string(denom) +
             " (se " + std::to_string(denom_se) +
             ") is indistinguishable from zero");
  }
}

}  // namespace estdetail

inline EstimateReport wald(const Dataset& d, std::pair<int, int> pair,
                           double level = 0.95) {
  auto m0 = estdetail::cell_moments(d, pair.first);
  auto m1 = estdetail::cell_moments(d, pair.second);
  const double dy = m1.y_mean - m0.y_mean;
  const double dt = m1.t_mean - m0.t_mean;
  const double dt_se = std::sqrt(m1.t_var / m1.count + m0.t_var / m0.count);
  estdetail::check_first_stage(dt, dt_se, estdetail::treatment_sd(d));
  EstimateReport r;
  r.estimand_id = "wald";
  r.point = dy / dt;
  // delta-method variance of the ratio from within-cell moments
  double var = 0.0;
  for (const auto& m : {m0, m1}) {
    var += (m.y_var - 2.0 * r.point * m.yt_cov + r.point * r.point * m.t_var) /
           m.count;
  }
  var /= dt * dt;
  r.se_plugin = std::sqrt(std::max(var, 0.0));
  r.ci_level = level;
  double z = normal_quantile(0.5 + level / 2.0);
  r.ci_lo = r.point - z * (*r.se_plugin);
  r.ci_hi = r.point + z * (*r.se_plugin);
  r.b_hat = dt;
  return r;
}

// Conditional means of Y and T linear in X, fully interacted with the pair
// indicator; numerator and denominator averaged over the pooled empirical X.
inline EstimateReport wald_x(const Dataset& d, std::pair<int, int> pair,
                             double level = 0.95) {
  std::vector<int> rows;
  std::vector<int> z01;
  for (int i = 0; i < d.n; ++i) {
    int z = d.instrument[static_cast<size_t>(i)];
    if (z == pair.first || z == pair.second) {
      rows.push_back(i);
      z01.push_back(z == pair.second ? 1 : 0);
    }
  }
  const int m = static_cast<int>(rows.size());
  const int p = 2 * (d.d_x + 1);
  require(m > p, ErrorKind::sample_size, "pair subsample too small for wald_x");
  Eigen::MatrixXd S(m, p);
  Eigen::VectorXd y(m), t(m);
  for (int i = 0; i < m; ++i) {
    const int row = rows[static_cast<size_t>(i)];
    const double z = static_cast<double>(z01[static_cast<size_t>(i)]);
    S(i, 0) = 1.0;
    for (int j = 0; j < d.d_x; ++j) S(i, 1 + j) = d.covariates(row, j);
    S(i, 1 + d.d_x) = z;
    for (int j = 0; j < d.d_x; ++j) S(i, 2 + d.d_x + j) = z * d.covariates(row, j);
    y(i) = d.outcome(row);
    t(i) = d.treatment(row);
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(S);
  qr.setThreshold(1e-10);
  require(qr.rank() == p, ErrorKind::singular_design,
          "collinear covariates in the interacted conditional-mean design");
  Eigen::VectorXd by = qr.solve(y);
  Eigen::VectorXd bt = qr.solve(t);
  Eigen::VectorXd xbar = Eigen::VectorXd::Zero(d.d_x);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d.d_x; ++j)
      xbar(j) += d.covariates(rows[static_cast<size_t>(i)], j);
  if (m > 0) xbar /= static_cast<double>(m);
  auto gap_at_mean = [&](const Eigen::VectorXd& b) {
    double g = b(1 + d.d_x);
    for (int j = 0; j < d.d_x; ++j) g += xbar(j) * b(2 + d.d_x + j);
    return g;
  };
  const double num = gap_at_mean(by);
  const double den = gap_at_mean(bt);
  // crude se of the denominator from the unadjusted cells, used in messages
  auto m0 = estdetail::cell_moments(d, pair.first);
  auto m1 = estdetail::cell_moments(d, pair.second);
  double dt_se = std::sqrt(m1.t_var / m1.count + m0.t_var / m0.count);
  estdetail::check_first_stage(den, dt_se, estdetail::treatment_sd(d));
  EstimateReport r;
  r.estimand_id = "wald_x";
  r.point = num / den;
  r.b_hat = den;
  r.ci_level = level;
  return r;
}

// ---------------------------------------------------------------------------
// Quantile-gap evaluation shared by the pi-estimands and the influence code.

struct PairEval {
  Eigen::MatrixXd q0, q1;  // n_sub x l fitted cell quantiles (opt. rearranged)
  Eigen::MatrixXd dq;      // q1 - q0
  Eigen::MatrixXd dm;      // outcome-regression gaps at those quantiles
};

inline PairEval eval_pair(const QuantileFit& qf, const SeriesFit& sf,
                          const Dataset& d, bool rearrange = true) {
  const int m = qf.n_sub();
  const int l = qf.grid.l;
  PairEval ev;
  ev.q0.resize(m, l);
  ev.q1.resize(m, l);
  ev.dq.resize(m, l);
  ev.dm.resize(m, l);
  Eigen::VectorXd x(qf.d_x);
  std::vector<double> q0, q1;
  for (int i = 0; i < m; ++i) {
    const int row = qf.subsample[static_cast<size_t>(i)];
    for (int j = 0; j < qf.d_x; ++j) x(j) = d.covariates(row, j);
    eval_quantile_curves(qf, x, rearrange, q0, q1);
    for (int j = 0; j < l; ++j) {
      ev.q0(i, j) = q0[static_cast<size_t>(j)];
      ev.q1(i, j) = q1[static_cast<size_t>(j)];
      ev.dq(i, j) = q1[static_cast<size_t>(j)] - q0[static_cast<size_t>(j)];
      ev.dm(i, j) = sf.m_hat(x, q1[static_cast<size_t>(j)], 1) -
                    sf.m_hat(x, q0[static_cast<size_t>(j)], 0);
    }
  }
  return ev;
}

// signed trimming weight of one cell: sgn / chi+ / -chi- depending on mode
inline double cell_weight_sign(double dq, double rho, SignMode mode) {
  switch (mode) {
    case SignMode::absolute:
      if (dq > 0.0 && dq >= rho) return 1.0;
      if (dq < 0.0 && dq <= -rho) return -1.0;
      return 0.0;
    case SignMode::positive:
      return (dq > 0.0 && dq >= rho) ? 1.0 : 0.0;
    case SignMode::negative:
      return (dq < 0.0 && dq <= -rho) ? 1.0 : 0.0;
  }
  return 0.0;
}

inline double pi_xv(const QuantileFit& qf, const SeriesFit& sf,
                    const Eigen::VectorXd& x, double v,
                    const TrimmingSpec& trim, bool rearrange = true) {
  const int j = qf.grid.index_of(v);
  std::vector<double> q0, q1;
  eval_quantile_curves(qf, x, rearrange, q0, q1);
  const double dq = q1[static_cast<size_t>(j)] - q0[static_cast<size_t>(j)];
  if (std::abs(dq) < trim.rho || dq == 0.0) return 0.0;
  const double dm = sf.m_hat(x, q1[static_cast<size_t>(j)], 1) -
                    sf.m_hat(x, q0[static_cast<size_t>(j)], 0);
  return dm / dq;
}

inline double pi_v(const QuantileFit& qf, const SeriesFit& sf, const Dataset& d,
                   double v, const TrimmingSpec& trim, bool rearrange = true,
                   const PairEval* eval = nullptr) {
  const int j = qf.grid.index_of(v);
  PairEval local;
  if (!eval) {
    local = eval_pair(qf, sf, d, rearrange);
    eval = &local;
  }
  double a = 0.0, b = 0.0;
  int kept = 0;
  for (int i = 0; i < qf.n_sub(); ++i) {
    double sg = cell_weight_sign(eval->dq(i, j), trim.rho, SignMode::absolute);
    if (sg != 0.0) ++kept;
    a += eval->dm(i, j) * sg;
    b += eval->dq(i, j) * sg;
  }
  require(kept > 0, ErrorKind::all_trimmed,
          "all observations trimmed at v=" + std::to_string(v));
  return a / b;
}

struct PiDrResult {
  double point = std::numeric_limits<double>::quiet_NaN();
  double a_hat = 0.0;   // numerator mean over (i,v) cells
  double b_hat = 0.0;   // normalizer mean over (i,v) cells (signed)
  double trimmed_fraction = 0.0;
};

inline PiDrResult pi_dr_from_eval(const PairEval& ev, const TrimmingSpec& trim,
                                  SignMode mode) {
  const Eigen::Index m = ev.dq.rows(), l = ev.dq.cols();
  double a = 0.0, b = 0.0;
  long kept_any = 0, kept_mode = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < l; ++j) {
      const double dq = ev.dq(i, j);
      if (std::abs(dq) >= trim.rho && dq != 0.0) ++kept_any;
      // abs: signed indicator chi+ - chi-; plus/minus: plain chi so the
      // normalizer keeps its sign and pi*B decomposes across the sign sets
      double sg = cell_weight_sign(dq, trim.rho, mode);
      if (sg != 0.0) ++kept_mode;
      a += ev.dm(i, j) * sg;
      b += ev.dq(i, j) * sg;
    }
  }
  const double cells = static_cast<double>(m * l);
  if (kept_mode == 0) {
    if (kept_any == 0)
      fail(ErrorKind::all_trimmed, "every (i,v) cell fell below the trimming "
                                   "threshold");
    fail(ErrorKind::empty_sign_set,
         std::string("no cells with ") +
             (mode == SignMode::negative ? "negative" : "positive") +
             " quantile gap beyond the trimming threshold");
  }
  PiDrResult r;
  r.a_hat = a / cells;
  r.b_hat = b / cells;
  r.point = a / b;
  r.trimmed_fraction = 1.0 - static_cast<double>(kept_any) / cells;
  return r;
}

inline EstimateReport pi_dr(const QuantileFit& qf, const SeriesFit& sf,
                            const Dataset& d, const TrimmingSpec& trim,
                            SignMode mode = SignMode::absolute,
                            bool rearrange = true) {
  PairEval ev = eval_pair(qf, sf, d, rearrange);
  PiDrResult res = pi_dr_from_eval(ev, trim, mode);
  EstimateReport r;
  r.estimand_id = std::string("pi_dr") +
                  (mode == SignMode::absolute
                       ? ""
                       : (mode == SignMode::positive ? "_plus" : "_minus"));
  r.point = res.point;
  r.b_hat = res.b_hat;
  r.trimmed_fraction = res.trimmed_fraction;
  r.warnings = trim.warnings;
  return r;
}

// ---------------------------------------------------------------------------
// Multi-valued instruments.

struct LambdaWeights {
  std::vector<int> order;      // codes sorted by ascending cell mean of T
  std::vector<double> lambda;  // one weight per adjacent ordered pair
  std::vector<double> cell_means;   // aligned with `order`
  std::vector<double> cell_shares;  // aligned with `order`
  std::vector<std::string> warnings;
};

inline LambdaWeights lambda_weights(const Dataset& d) {
  require(d.K >= 1, ErrorKind::support,
          "instrument must take at least two values");
  const int K = d.K;
  std::vector<double> p(static_cast<size_t>(K) + 1, 0.0);
  std::vector<double> r(static_cast<size_t>(K) + 1, 0.0);
  for (int k = 0; k <= K; ++k) {
    auto m = estdetail::cell_moments(d, k);
    p[static_cast<size_t>(k)] = m.t_mean;
    r[static_cast<size_t>(k)] = static_cast<double>(m.count) / d.n;
  }
  LambdaWeights out;
  out.order.resize(static_cast<size_t>(K) + 1);
  std::iota(out.order.begin(), out.order.end(), 0);
  std::stable_sort(out.order.begin(), out.order.end(), [&](int a, int b) {
    return p[static_cast<size_t>(a)] < p[static_cast<size_t>(b)];
  });
  const double sd_t = estdetail::treatment_sd(d);
  const double tie_tol = 1e-10 * std::max(1.0, sd_t);
  for (int k = 0; k < K; ++k) {
    if (std::abs(p[static_cast<size_t>(out.order[static_cast<size_t>(k)])] -
                 p[static_cast<size_t>(out.order[static_cast<size_t>(k + 1)])]) <=
        tie_tol) {
      out.warnings.push_back(
          "tied cell treatment means; ordering falls back to code order for "
          "codes " +
          std::to_string(out.order[static_cast<size_t>(k)]) + "," +
          std::to_string(out.order[static_cast<size_t>(k + 1)]));
    }
  }
  double pbar = d.treatment.mean();
  std::vector<double> ps(static_cast<size_t>(K) + 1), rs(static_cast<size_t>(K) + 1);
  for (int k = 0; k <= K; ++k) {
    ps[static_cast<size_t>(k)] = p[static_cast<size_t>(out.order[static_cast<size_t>(k)])];
    rs[static_cast<size_t>(k)] = r[static_cast<size_t>(out.order[static_cast<size_t>(k)])];
  }
  out.cell_means = ps;
  out.cell_shares = rs;
  std::vector<double> num(static_cast<size_t>(K), 0.0);
  double den = 0.0;
  for (int k = 1; k <= K; ++k) {
    double tail = 0.0;
    for (int l = k; l <= K; ++l)
      tail += rs[static_cast<size_t>(l)] * (ps[static_cast<size_t>(l)] - pbar);
    num[static_cast<size_t>(k - 1)] = (ps[static_cast<size_t>(k)] - ps[static_cast<size_t>(k - 1)]) * tail;
    den += num[static_cast<size_t>(k - 1)];
  }
  require(std::abs(den) > 1e-10 * std::max(1.0, sd_t * sd_t),
          ErrorKind::weak_multi_first_stage,
          "pair-weight normalizer is numerically zero (no mean first stage "
          "across cells)");
  out.lambda.resize(static_cast<size_t>(K));
  for (int k = 0; k < K; ++k) {
    double lam = num[static_cast<size_t>(k)] / den;
    if (lam < 0.0 && lam > -1e-10) lam = 0.0;
    out.lambda[static_cast<size_t>(k)] = lam;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trimming threshold and the per-pair pipeline bundle.

// baseline: 1.96 * min over grid points and observations of se(dq_hat) / log n
inline TrimmingSpec resolve_trimming(const QuantileFit& qf, const Dataset& d,
                                     const TrimRule& rule) {
  TrimmingSpec spec;
  spec.rule = rule;
  if (rule.kind == TrimRule::fixed) {
    require(rule.value >= 0.0 && std::isfinite(rule.value), ErrorKind::config,
            "fixed trimming threshold must be finite and nonnegative");
    spec.rho = rule.value;
    return spec;
  }
  const int m = qf.n_sub();
  double min_se = std::numeric_limits<double>::infinity();
  Eigen::VectorXd x(qf.d_x);
  for (int j = 0; j < qf.grid.l; ++j) {
    if (qf.d_x == 0) {
      min_se = std::min(min_se, se_delta_q(qf, x, j));
    } else {
      for (int i = 0; i < m; ++i) {
        const int row = qf.subsample[static_cast<size_t>(i)];
        for (int k = 0; k < qf.d_x; ++k) x(k) = d.covariates(row, k);
        min_se = std::min(min_se, se_delta_q(qf, x, j));
      }
    }
  }
  double rho = 1.96 * min_se / std::log(static_cast<double>(m));
  if (rule.kind == TrimRule::multiple) rho *= rule.value;
  const double sd_t = estdetail::treatment_sd(d);
  if (!(rho > 1e-12 * std::max(1.0, sd_t))) {
    spec.warnings.push_back(
        "degenerate quantile-gap standard errors; trimming threshold set to 0");
    rho = 0.0;
  }
  spec.rho = rho;
  return spec;
}

struct PairFits {
  QuantileFit qf;
  SeriesFit sf;
  TrimmingSpec trim;
  PairEval eval;
  PiDrResult result;
};

// Full Step 1-3 run for one instrument pair. `outcome_override` substitutes a
// transformed outcome in the second stage (used for distributional effects).
inline PairFits fit_pair_pipeline(const Dataset& d, std::pair<int, int> pair,
                                  const EstimandConfig& config,
                                  const Eigen::VectorXd* outcome_override = nullptr) {
  PairFits out;
  out.qf = fit_grid(d, QuantileGrid::midpoint(config.grid_l), pair, config.qr,
                    config.workers);
  out.trim = resolve_trimming(out.qf, d, config.trim);
  out.sf = fit_series(d, config.basis, pair, outcome_override);
  out.eval = eval_pair(out.qf, out.sf, d, config.rearrange_quantiles);
  out.result = pi_dr_from_eval(out.eval, out.trim, config.sign);
  return out;
}

inline Dataset strip_covariates(const Dataset& d) {
  Dataset out = d;
  out.covariates.resize(d.n, 0);
  out.d_x = 0;
  out.covariate_names.clear();
  return out;
}

inline EstimateReport pi_dr_report(const PairFits& fits, SignMode mode) {
  EstimateReport r;
  r.estimand_id = std::string("pi_dr") +
                  (mode == SignMode::absolute
                       ? ""
                       : (mode == SignMode::positive ? "_plus" : "_minus"));
  r.point = fits.result.point;
  r.b_hat = fits.result.b_hat;
  r.trimmed_fraction = fits.result.trimmed_fraction;
  r.warnings = fits.trim.warnings;
  for (const auto& w : fits.qf.warnings) r.warnings.push_back(w);
  for (const auto& w : fits.sf.warnings) r.warnings.push_back(w);
  return r;
}

struct MultiFit {
  LambdaWeights lw;
  std::vector<std::pair<int, int>> pairs;
  std::vector<PairFits> fits;      // entries valid where pair_ok
  std::vector<bool> pair_ok;
  EstimateReport report;
};

// Aggregate over adjacent ordered instrument pairs with plug-in weights.
// A pair whose cells are degenerate (fully trimmed / no first stage) is
// reported with a warning and excluded from the aggregate.
inline MultiFit pi_dr_multi(const Dataset& d, const EstimandConfig& config,
                            const Eigen::VectorXd* outcome_override = nullptr) {
  require(d.K >= 2, ErrorKind::support, "multi-IV aggregate needs K >= 2");
  MultiFit mf;
  mf.lw = lambda_weights(d);
  EstimateReport& r = mf.report;
  r.estimand_id = "pi_dr_multi";
  r.warnings = mf.lw.warnings;
  double agg = 0.0;
  double trimmed_cells = 0.0, total_cells = 0.0;
  for (int k = 1; k <= d.K; ++k) {
    std::pair<int, int> pr{mf.lw.order[static_cast<size_t>(k - 1)],
                           mf.lw.order[static_cast<size_t>(k)]};
    mf.pairs.push_back(pr);
    EstimateReport::PairBreakdown pb;
    pb.pair = pr;
    pb.lambda = mf.lw.lambda[static_cast<size_t>(k - 1)];
    try {
      PairFits pf = fit_pair_pipeline(d, pr, config, outcome_override);
      pb.point = pf.result.point;
      pb.b_hat = pf.result.b_hat;
      pb.trimmed_fraction = pf.result.trimmed_fraction;
      agg += pb.lambda * pb.point;
      trimmed_cells += pf.result.trimmed_fraction *
                       static_cast<double>(pf.qf.n_sub()) * config.grid_l;
      total_cells += static_cast<double>(pf.qf.n_sub()) * config.grid_l;
      mf.fits.push_back(std::move(pf));
      mf.pair_ok.push_back(true);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::all_trimmed ||
          e.kind() == ErrorKind::weak_first_stage) {
        pb.degenerate = true;
        r.warnings.push_back("pair (" + std::to_string(pr.first) + "," +
                             std::to_string(pr.second) +
                             ") degenerate and excluded: " + e.what());
        mf.fits.emplace_back();
        mf.pair_ok.push_back(false);
      } else {
        throw Error(e.kind(), std::string("pair (") +
                                  std::to_string(pr.first) + "," +
                                  std::to_string(pr.second) + "): " + e.what());
      }
    }
    r.per_pair.push_back(pb);
  }
  r.point = agg;
  if (total_cells > 0.0) r.trimmed_fraction = trimmed_cells / total_cells;
  return mf;
}

// Weighted average effect of T on the outcome CDF at y_threshold: the whole
// pipeline applied to the transformed outcome 1(Y <= y).
inline PairFits distributional_fit(const Dataset& d, double y_threshold,
                                   const EstimandConfig& config) {
  Eigen::VectorXd ind(d.n);
  for (int i = 0; i < d.n; ++i)
    ind(i) = d.outcome(i) <= y_threshold ? 1.0 : 0.0;
  return fit_pair_pipeline(d, config.pair, config, &ind);
}

inline EstimateReport distributional_dr(const Dataset& d, double y_threshold,
                                        const EstimandConfig& config) {
  PairFits fits = distributional_fit(d, y_threshold, config);
  EstimateReport r = pi_dr_report(fits, config.sign);
  r.estimand_id = "distributional_dr";
  return r;
}

inline EstimateReport wald_x_multi(const Dataset& d, double level = 0.95) {
  require(d.K >= 2, ErrorKind::support, "multi-IV aggregate needs K >= 2");
  LambdaWeights lw = lambda_weights(d);
  EstimateReport r;
  r.estimand_id = "wald_x_multi";
  r.ci_level = level;
  double agg = 0.0;
  for (int k = 1; k <= d.K; ++k) {
    std::pair<int, int> pr{lw.order[static_cast<size_t>(k - 1)],
                           lw.order[static_cast<size_t>(k)]};
    EstimateReport rk = wald_x(d, pr, level);
    EstimateReport::PairBreakdown pb;
    pb.pair = pr;
    pb.lambda = lw.lambda[static_cast<size_t>(k - 1)];
    pb.point = rk.point;
    pb.b_hat = rk.b_hat;
    r.per_pair.push_back(pb);
    agg += pb.lambda * pb.point;
  }
  r.point = agg;
  r.warnings = lw.warnings;
  return r;
}

}  // namespace driv
