// Plug-in influence-function variances for the trimmed ratio estimands, the
// pairs bootstrap, and the multiplier score bootstrap for uniform bands.
//
// Per-observation channels: r1 carries the first-stage quantile process, r2
// the series least squares stage, r3 the direct aggregation channel. The
// variance is n^-1 sum (r1+r2+r3)^2 / B^2.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "driv/common.hpp"
#include "driv/dataset.hpp"
#include "driv/estimands.hpp"
#include "driv/quantreg.hpp"
#include "driv/sieve.hpp"

namespace driv {

inline TrimmingSpec trim_threshold(const QuantileFit& qf, const Dataset& d,
                                   const TrimRule& rule) {
  return resolve_trimming(qf, d, rule);
}

struct InfluenceDecomposition {
  Eigen::VectorXd r1, r2, r3;  // per observation of the fit subsample
  double b_hat = std::numeric_limits<double>::quiet_NaN();
  double sigma_hat = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::string> warnings;
};

namespace infdetail {

// indicator pair defining the trimming weight as a function of the scalar
// quantile-gap u, per sign mode
inline double trim_indicator(double u, double rho, SignMode mode) {
  switch (mode) {
    case SignMode::absolute:
      return (u >= rho ? 1.0 : 0.0) - (u <= -rho ? 1.0 : 0.0);
    case SignMode::positive:
      return u >= rho ? 1.0 : 0.0;
    case SignMode::negative:
      return u <= -rho ? 1.0 : 0.0;
  }
  return 0.0;
}

}  // namespace infdetail

// Central-difference estimate (coordinate by coordinate) of the gradient in
// the quantile coefficients of E[(dm - point*dq) * trim_indicator(DS'a)].
// A degenerate step (iota <= 0) returns the zero vector: no mass moves
// across the threshold.
inline Eigen::VectorXd numeric_weight_derivative(
    const QuantileFit& qf, const PairEval& ev, const Dataset& d, int j,
    double iota, double point, double rho, SignMode mode) {
  const int m = qf.n_sub();
  const int p2 = 2 * (qf.d_x + 1);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(p2);
  if (!(iota > 0.0)) return grad;
  const Eigen::VectorXd& a = qf.coef[static_cast<size_t>(j)];
  Eigen::VectorXd x(qf.d_x);
  for (int i = 0; i < m; ++i) {
    const int row = qf.subsample[static_cast<size_t>(i)];
    for (int k = 0; k < qf.d_x; ++k) x(k) = d.covariates(row, k);
    Eigen::VectorXd ds = qf.delta_s(x);
    const double base = ds.dot(a);
    const double val = ev.dm(i, j) - point * ev.dq(i, j);
    for (int c = 0; c < p2; ++c) {
      if (ds(c) == 0.0) continue;
      double hi = infdetail::trim_indicator(base + 0.5 * iota * ds(c), rho, mode);
      double lo = infdetail::trim_indicator(base - 0.5 * iota * ds(c), rho, mode);
      if (hi != lo) grad(c) += val * (hi - lo);
    }
  }
  grad /= (iota * static_cast<double>(m));
  return grad;
}

// Spec'd entry point: evaluates at a quantile level rather than a grid index.
inline Eigen::VectorXd numeric_weight_derivative(
    const QuantileFit& qf, const SeriesFit& sf, const Dataset& d, double v,
    double iota, double point, const TrimmingSpec& trim,
    SignMode mode = SignMode::absolute, bool rearrange = true) {
  require(iota > 0.0, ErrorKind::config, "numeric derivative step must be > 0");
  const int j = qf.grid.index_of(v);
  PairEval ev = eval_pair(qf, sf, d, rearrange);
  return numeric_weight_derivative(qf, ev, d, j, iota, point, trim.rho, mode);
}

namespace infdetail {

// Shared influence computation. grid_j < 0 averages over the whole grid
// (the DR aggregate); grid_j >= 0 is the pointwise-in-v version.
inline InfluenceDecomposition influence_core(const QuantileFit& qf,
                                             const SeriesFit& sf,
                                             const PairEval& ev,
                                             const Dataset& d, double rho,
                                             SignMode mode, double point,
                                             int grid_j) {
  const int m = qf.n_sub();
  const int l = qf.grid.l;
  const int dim = sf.dim;
  const int p2 = 2 * (qf.d_x + 1);
  InfluenceDecomposition out;
  out.r1 = Eigen::VectorXd::Zero(m);
  out.r2 = Eigen::VectorXd::Zero(m);
  out.r3 = Eigen::VectorXd::Zero(m);

  std::vector<int> js;
  if (grid_j >= 0) {
    js.push_back(grid_j);
  } else {
    js.resize(static_cast<size_t>(l));
    std::iota(js.begin(), js.end(), 0);
  }
  const double navg = static_cast<double>(js.size());

  Eigen::VectorXd x(qf.d_x);
  Eigen::VectorXd dcal = Eigen::VectorXd::Zero(dim);
  double b_acc = 0.0;

  for (int j : js) {
    const double v = qf.grid.points[static_cast<size_t>(j)];
    const Eigen::VectorXd& a = qf.coef[static_cast<size_t>(j)];

    // per-v gradient pieces and the v-slice of D, B, R3
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(p2);
    double sd_acc = 0.0, sd_acc2 = 0.0;
    for (int i = 0; i < m; ++i) {
      const int row = qf.subsample[static_cast<size_t>(i)];
      for (int k = 0; k < qf.d_x; ++k) x(k) = d.covariates(row, k);
      const double dq = ev.dq(i, j);
      const double w = cell_weight_sign(dq, rho, mode);
      const double dmv = ev.dm(i, j);
      out.r3(i) += (dmv - point * dq) * w / navg;
      b_acc += dq * w / (navg * static_cast<double>(m));
      if (w != 0.0) {
        Eigen::VectorXd psi1 = build_basis(sf.spec, x, ev.q1(i, j), 1);
        Eigen::VectorXd psi0 = build_basis(sf.spec, x, ev.q0(i, j), 0);
        dcal.noalias() += (w / (navg * static_cast<double>(m))) * (psi1 - psi0);
        const double dm1 = sf.dm_dt_hat(x, ev.q1(i, j), 1);
        const double dm0 = sf.dm_dt_hat(x, ev.q0(i, j), 0);
        // (dm1*S1 - dm0*S0 - point*DS) w; S1,S0 share the (1,x') head
        grad(0) += (dm1 - dm0) * w;
        for (int k = 0; k < qf.d_x; ++k) grad(1 + k) += (dm1 - dm0) * x(k) * w;
        grad(1 + qf.d_x) += (dm1 - point) * w;
        for (int k = 0; k < qf.d_x; ++k)
          grad(2 + qf.d_x + k) += (dm1 - point) * x(k) * w;
      }
      const double lin = qf.delta_s(x).dot(a);
      sd_acc += lin;
      sd_acc2 += lin * lin;
    }
    grad /= static_cast<double>(m);

    double sd_lin = std::sqrt(std::max(
        sd_acc2 / m - (sd_acc / m) * (sd_acc / m), 0.0));
    double iota = std::pow(static_cast<double>(m), -0.25) * sd_lin;
    grad += numeric_weight_derivative(qf, ev, d, j, iota, point, rho, mode);

    // contract against the first-stage scores
    Eigen::VectorXd wvec = qf.theta_inv[static_cast<size_t>(j)] * grad;
    for (int i = 0; i < m; ++i) {
      Eigen::VectorXd s = qf.s_row(d, i);
      double ind =
          (d.treatment(qf.subsample[static_cast<size_t>(i)]) <= s.dot(a)) ? 1.0
                                                                          : 0.0;
      out.r1(i) += (ind - v) * s.dot(wvec) / navg;
    }
  }

  Eigen::VectorXd gd = sf.gram_pinv * dcal;
  for (int i = 0; i < m; ++i)
    out.r2(i) = gd.dot(sf.psi.row(i)) * sf.residuals(i);

  out.b_hat = b_acc;
  double s2 = 0.0;
  for (int i = 0; i < m; ++i) {
    double r = out.r1(i) + out.r2(i) + out.r3(i);
    s2 += r * r;
  }
  s2 /= static_cast<double>(m);
  out.sigma_hat = std::sqrt(s2) / std::abs(b_acc);
  out.se = out.sigma_hat / std::sqrt(static_cast<double>(m));
  return out;
}

}  // namespace infdetail

inline InfluenceDecomposition influence_pi_dr(const PairFits& fits,
                                              const Dataset& d, SignMode mode,
                                              double point) {
  return infdetail::influence_core(fits.qf, fits.sf, fits.eval, d,
                                   fits.trim.rho, mode, point, -1);
}

// Pointwise-in-v variant; returns sigma(v)/sqrt(n) as `se`.
inline InfluenceDecomposition influence_pi_v(const PairFits& fits,
                                             const Dataset& d, double v,
                                             double point) {
  const int j = fits.qf.grid.index_of(v);
  return infdetail::influence_core(fits.qf, fits.sf, fits.eval, d,
                                   fits.trim.rho, SignMode::absolute, point, j);
}

// ---------------------------------------------------------------------------
// Multi-valued instruments: embed the pairwise channels through the cell
// indicators and add the weight-estimation channel r4.

struct MultiInfluence {
  Eigen::VectorXd r_total;  // per full-sample observation
  double sigma_hat = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  std::vector<InfluenceDecomposition> per_pair;
  Eigen::VectorXd r4;  // aggregated weight channel
};

inline MultiInfluence influence_multi(const MultiFit& mf, const Dataset& d) {
  const int n = d.n;
  const int K = d.K;
  MultiInfluence out;
  out.r_total = Eigen::VectorXd::Zero(n);
  out.r4 = Eigen::VectorXd::Zero(n);

  const auto& ord = mf.lw.order;
  const auto& ps = mf.lw.cell_means;
  const auto& rs = mf.lw.cell_shares;
  const double pbar = d.treatment.mean();
  double bnorm = 0.0;
  for (int k = 1; k <= K; ++k) {
    double tail = 0.0;
    for (int l = k; l <= K; ++l)
      tail += rs[static_cast<size_t>(l)] * (ps[static_cast<size_t>(l)] - pbar);
    bnorm += (ps[static_cast<size_t>(k)] - ps[static_cast<size_t>(k - 1)]) * tail;
  }
  // ordered-cell index of each observation
  std::vector<int> cell(static_cast<size_t>(n), -1);
  for (int i = 0; i < n; ++i) {
    int code = d.instrument[static_cast<size_t>(i)];
    for (int k = 0; k <= K; ++k)
      if (ord[static_cast<size_t>(k)] == code) cell[static_cast<size_t>(i)] = k;
  }

  for (int k = 1; k <= K; ++k) {
    if (!mf.pair_ok[static_cast<size_t>(k - 1)]) {
      out.per_pair.emplace_back();
      continue;
    }
    const PairFits& pf = mf.fits[static_cast<size_t>(k - 1)];
    const double lambda = mf.lw.lambda[static_cast<size_t>(k - 1)];
    const double pik = pf.result.point;
    InfluenceDecomposition dec = influence_pi_dr(pf, d, SignMode::absolute, pik);
    const double share = rs[static_cast<size_t>(k)] + rs[static_cast<size_t>(k - 1)];
    for (int i = 0; i < pf.qf.n_sub(); ++i) {
      const int row = pf.qf.subsample[static_cast<size_t>(i)];
      double r = dec.r1(i) + dec.r2(i) + dec.r3(i);
      out.r_total(row) += lambda * r / (share * pf.result.b_hat);
    }
    // weight-estimation channel
    const double scale = (pik - mf.report.point) / bnorm;
    double tail = 0.0;
    for (int l = k; l <= K; ++l)
      tail += rs[static_cast<size_t>(l)] * (ps[static_cast<size_t>(l)] - pbar);
    for (int i = 0; i < n; ++i) {
      const int ci = cell[static_cast<size_t>(i)];
      double mean_part = 0.0;
      if (ci == k)
        mean_part += (d.treatment(i) - ps[static_cast<size_t>(k)]) /
                     rs[static_cast<size_t>(k)];
      if (ci == k - 1)
        mean_part -= (d.treatment(i) - ps[static_cast<size_t>(k - 1)]) /
                     rs[static_cast<size_t>(k - 1)];
      double share_part = 0.0;
      for (int l = k; l <= K; ++l) {
        double dl = (ci == l ? 1.0 : 0.0) - rs[static_cast<size_t>(l)];
        share_part += dl;
      }
      double r4 = (mean_part * tail +
                   (ps[static_cast<size_t>(k)] - ps[static_cast<size_t>(k - 1)]) *
                       (d.treatment(i) - pbar) * share_part) *
                  scale;
      out.r4(i) += r4;
      out.r_total(i) += r4;
    }
    out.per_pair.push_back(std::move(dec));
  }
  double s2 = out.r_total.squaredNorm() / static_cast<double>(n);
  out.sigma_hat = std::sqrt(s2);
  out.se = out.sigma_hat / std::sqrt(static_cast<double>(n));
  return out;
}

// ---------------------------------------------------------------------------
// Pairs bootstrap: resample rows, re-run the full pipeline, drop and count
// failed replicates.

struct BootstrapResult {
  double se = std::numeric_limits<double>::quiet_NaN();
  double ci_lo = std::numeric_limits<double>::quiet_NaN();
  double ci_hi = std::numeric_limits<double>::quiet_NaN();
  int requested = 0;
  int failed = 0;
  std::vector<double> replicates;
};

inline Dataset resample_rows(const Dataset& d, Rng& rng) {
  Dataset out = d;
  out.warnings.clear();
  for (int i = 0; i < d.n; ++i) {
    int pick = static_cast<int>(rng.next_u64() % static_cast<uint64_t>(d.n));
    out.outcome(i) = d.outcome(pick);
    out.treatment(i) = d.treatment(pick);
    for (int j = 0; j < d.d_x; ++j) out.covariates(i, j) = d.covariates(pick, j);
    out.instrument[static_cast<size_t>(i)] = d.instrument[static_cast<size_t>(pick)];
  }
  return out;
}

inline BootstrapResult pairs_bootstrap(
    const Dataset& d, const std::function<double(const Dataset&)>& estimator,
    int B, uint64_t seed, double level = 0.95, int workers = 0) {
  require(B >= 2, ErrorKind::config, "bootstrap needs B >= 2");
  std::vector<double> est(static_cast<size_t>(B),
                          std::numeric_limits<double>::quiet_NaN());
  std::vector<char> ok(static_cast<size_t>(B), 0);
  parallel_for(static_cast<size_t>(B), workers, [&](size_t b) {
    Rng rng = Rng::stream(seed, b);
    Dataset rd = resample_rows(d, rng);
    try {
      est[b] = estimator(rd);
      ok[b] = 1;
    } catch (const Error&) {
      ok[b] = 0;
    }
  });
  BootstrapResult out;
  out.requested = B;
  for (int b = 0; b < B; ++b) {
    if (ok[static_cast<size_t>(b)])
      out.replicates.push_back(est[static_cast<size_t>(b)]);
    else
      ++out.failed;
  }
  if (out.failed > 0.20 * B) {
    fail(ErrorKind::bootstrap_unstable,
         std::to_string(out.failed) + " of " + std::to_string(B) +
             " bootstrap replicates failed");
  }
  out.se = sample_sd(out.replicates);
  std::vector<double> sorted = out.replicates;
  std::sort(sorted.begin(), sorted.end());
  out.ci_lo = quantile_sorted(sorted, (1.0 - level) / 2.0);
  out.ci_hi = quantile_sorted(sorted, (1.0 + level) / 2.0);
  return out;
}

// ---------------------------------------------------------------------------
// Multiplier score bootstrap for a uniform band over (x,v) evaluation points.

enum class MultiplierLaw { normal, rademacher, mammen };

struct ScoreBandResult {
  double critical_value = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> sigma;  // per surviving evaluation point
  std::vector<size_t> kept;   // indices into the input eval set
  std::vector<std::string> warnings;
};

inline ScoreBandResult score_bootstrap_band(
    const PairFits& fits, const Dataset& d,
    const std::vector<std::pair<Eigen::VectorXd, double>>& eval_set, int B,
    double level, MultiplierLaw law = MultiplierLaw::normal, uint64_t seed = 1,
    int workers = 0) {
  require(B >= 2, ErrorKind::config, "score bootstrap needs B >= 2");
  const SeriesFit& sf = fits.sf;
  const QuantileFit& qf = fits.qf;
  const int m = sf.n_sub();

  struct Point {
    Eigen::VectorXd dpsi;
    double dq;
    double sigma;
  };
  std::vector<Point> pts;
  ScoreBandResult out;
  std::vector<double> q0, q1;
  for (size_t e = 0; e < eval_set.size(); ++e) {
    const auto& [x, v] = eval_set[e];
    int j = qf.grid.index_of(v);
    eval_quantile_curves(qf, x, true, q0, q1);
    double dq = q1[static_cast<size_t>(j)] - q0[static_cast<size_t>(j)];
    if (std::abs(dq) < fits.trim.rho || dq == 0.0) {
      out.warnings.push_back("evaluation point " + std::to_string(e) +
                             " trimmed (|dq| below threshold)");
      continue;
    }
    Point p;
    p.dpsi = build_basis(sf.spec, x, q1[static_cast<size_t>(j)], 1) -
             build_basis(sf.spec, x, q0[static_cast<size_t>(j)], 0);
    p.dq = dq;
    p.sigma = std::sqrt(std::max(p.dpsi.dot(sf.mho * p.dpsi), 0.0)) /
              std::abs(dq);
    require(p.sigma > 0.0, ErrorKind::convergence,
            "degenerate sieve variance at an evaluation point");
    pts.push_back(std::move(p));
    out.kept.push_back(e);
  }
  require(!pts.empty(), ErrorKind::all_trimmed,
          "no evaluation points survive trimming");
  for (const auto& p : pts) out.sigma.push_back(p.sigma);

  // rows psi_i * e_i, pre-multiplied so each draw is one pass
  Eigen::MatrixXd score_rows(m, sf.dim);
  for (int i = 0; i < m; ++i)
    score_rows.row(i) = sf.psi.row(i) * sf.residuals(i);
  std::vector<Eigen::VectorXd> proj;  // per point: Ginv'dpsi / (dq sigma sqrt(n))
  proj.reserve(pts.size());
  for (const auto& p : pts) {
    proj.push_back(sf.gram_pinv * p.dpsi /
                   (p.dq * p.sigma * std::sqrt(static_cast<double>(m))));
  }
  std::vector<double> sups(static_cast<size_t>(B), 0.0);
  parallel_for(static_cast<size_t>(B), workers, [&](size_t b) {
    Rng rng = Rng::stream(seed, b);
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(sf.dim);
    for (int i = 0; i < m; ++i) {
      double w;
      switch (law) {
        case MultiplierLaw::normal: w = rng.normal(); break;
        case MultiplierLaw::rademacher:
          w = rng.uniform() < 0.5 ? -1.0 : 1.0;
          break;
        case MultiplierLaw::mammen: {
          // two-point law with mean 0, variance 1, third moment 1
          static const double golden = (1.0 + std::sqrt(5.0)) / 2.0;
          double plo = golden / std::sqrt(5.0);
          w = rng.uniform() < plo ? (1.0 - golden) : golden;
          break;
        }
      }
      acc.noalias() += score_rows.row(i).transpose() * w;
    }
    double sup = 0.0;
    for (const auto& pr : proj) sup = std::max(sup, std::abs(pr.dot(acc)));
    sups[b] = sup;
  });
  std::sort(sups.begin(), sups.end());
  out.critical_value = quantile_sorted(sups, level);
  return out;
}

}  // namespace driv
