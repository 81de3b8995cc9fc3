// First-stage linear quantile regression over a quantile grid.
//
// The check-loss minimizer is a primal-dual interior-point solve of the LP
// dual (box-constrained), followed by a polish step that lands on an exact
// basic solution. Ties on the optimal face are broken toward the smallest
// total fitted value, which makes the returned solution invariant to
// nonsingular reparameterizations of the design.
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "driv/common.hpp"
#include "driv/dataset.hpp"

namespace driv {

struct QuantileGrid {
  int l = 99;
  std::vector<double> points;

  static QuantileGrid midpoint(int l) {
    require(l >= 1, ErrorKind::config, "quantile grid needs l >= 1");
    QuantileGrid g;
    g.l = l;
    g.points.resize(static_cast<size_t>(l));
    for (int j = 1; j <= l; ++j)
      g.points[static_cast<size_t>(j - 1)] =
          (static_cast<double>(j) - 0.5) / static_cast<double>(l);
    return g;
  }
  int index_of(double v, double tol = 1e-10) const {
    for (size_t j = 0; j < points.size(); ++j)
      if (std::abs(points[j] - v) <= tol) return static_cast<int>(j);
    fail(ErrorKind::grid, "quantile " + std::to_string(v) +
                              " is not a grid point (no interpolation)");
  }
};

struct QrOptions {
  double tol = 1e-8;    // relative duality-gap tolerance
  int max_iter = 200;
  bool polish = true;
};

struct QrSolveInfo {
  int iterations = 0;
  double duality_gap = 0.0;
  bool polished = false;
};

inline double check_loss(const Eigen::MatrixXd& design,
                         const Eigen::VectorXd& response, double v,
                         const Eigen::VectorXd& coef) {
  Eigen::VectorXd r = response - design * coef;
  double s = 0.0;
  for (Eigen::Index i = 0; i < r.size(); ++i)
    s += r(i) * (v - (r(i) < 0.0 ? 1.0 : 0.0));
  return s;
}

namespace qrdetail {

// Names the column combination responsible for a rank deficiency.
inline void check_design_rank(const Eigen::MatrixXd& X) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  qr.setThreshold(1e-10);
  if (qr.rank() < X.cols()) {
    auto perm = qr.colsPermutation().indices();
    std::string dep = "dependent design columns {";
    for (Eigen::Index k = qr.rank(); k < X.cols(); ++k) {
      dep += std::to_string(perm(k));
      if (k + 1 < X.cols()) dep += ",";
    }
    dep += "} (rank " + std::to_string(qr.rank()) + " of " +
           std::to_string(X.cols()) + ")";
    fail(ErrorKind::singular_design, dep);
  }
}

// Exact-fit polish: rebuild the optimal vertex from the rows with the
// smallest interior-point residuals, then resolve near-ties by total fitted
// value (the lower-quantile convention).
inline bool polish_vertex(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                          double v, Eigen::VectorXd& coef) {
  const Eigen::Index n = X.rows(), p = X.cols();
  if (n < p) return false;
  Eigen::VectorXd r = y - X * coef;
  std::vector<Eigen::Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return std::abs(r(a)) < std::abs(r(b));
  });

  // Greedy full-rank basis from smallest residuals.
  std::vector<Eigen::Index> basis;
  Eigen::MatrixXd B(p, p);
  {
    Eigen::MatrixXd acc(0, p);
    for (Eigen::Index pos = 0; pos < n && static_cast<Eigen::Index>(basis.size()) < p; ++pos) {
      Eigen::Index row = order[static_cast<size_t>(pos)];
      Eigen::MatrixXd trial(acc.rows() + 1, p);
      trial << acc, X.row(row);
      Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(trial);
      qr.setThreshold(1e-12);
      if (qr.rank() == trial.rows()) {
        acc = trial;
        basis.push_back(row);
      }
    }
    if (static_cast<Eigen::Index>(basis.size()) < p) return false;
    for (Eigen::Index k = 0; k < p; ++k) B.row(k) = X.row(basis[static_cast<size_t>(k)]);
  }

  auto vertex_of = [&](const std::vector<Eigen::Index>& rows)
      -> std::optional<Eigen::VectorXd> {
    Eigen::MatrixXd M(p, p);
    Eigen::VectorXd rhs(p);
    for (Eigen::Index k = 0; k < p; ++k) {
      M.row(k) = X.row(rows[static_cast<size_t>(k)]);
      rhs(k) = y(rows[static_cast<size_t>(k)]);
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(M);
    if (!lu.isInvertible()) return std::nullopt;
    return lu.solve(rhs);
  };

  const double loss_ip = check_loss(X, y, v, coef);
  const double loss_scale = 1.0 + std::abs(loss_ip);

  struct Candidate {
    Eigen::VectorXd a;
    double loss;
    double fitted_sum;
  };
  std::vector<Candidate> cands;
  auto consider = [&](const std::vector<Eigen::Index>& rows) {
    auto a = vertex_of(rows);
    if (!a) return;
    double loss = check_loss(X, y, v, *a);
    cands.push_back({*a, loss, (X * (*a)).sum()});
  };
  consider(basis);

  // The last basis slot is the ambiguous one on a one-dimensional optimal
  // face; try swapping it for rows with comparable residual magnitude.
  double r_last = std::abs(r(basis.back()));
  int tried = 0;
  for (Eigen::Index pos = 0; pos < n && tried < 12; ++pos) {
    Eigen::Index row = order[static_cast<size_t>(pos)];
    if (std::find(basis.begin(), basis.end(), row) != basis.end()) continue;
    if (std::abs(r(row)) > 2.0 * r_last + 1e-8 * loss_scale) break;
    std::vector<Eigen::Index> rows(basis);
    rows.back() = row;
    consider(rows);
    ++tried;
  }
  if (cands.empty()) return false;

  const Candidate* best = &cands[0];
  for (const auto& c : cands) {
    if (c.loss < best->loss - 1e-11 * loss_scale ||
        (std::abs(c.loss - best->loss) <= 1e-11 * loss_scale &&
         c.fitted_sum < best->fitted_sum - 1e-11 * loss_scale)) {
      best = &c;
    }
  }
  if (best->loss <= loss_ip + 1e-9 * loss_scale) {
    coef = best->a;
    return true;
  }
  return false;
}

}  // namespace qrdetail

// Minimizes sum_i rho_v(y_i - x_i'a) by a Frisch-Newton style predictor-
// corrector interior-point method on the LP dual, with Mehrotra correction.
inline Eigen::VectorXd fit_check_loss(const Eigen::MatrixXd& design,
                                      const Eigen::VectorXd& response,
                                      double v, const QrOptions& opts = {},
                                      QrSolveInfo* info = nullptr) {
  const Eigen::Index n = design.rows(), p = design.cols();
  require(v > 0.0 && v < 1.0, ErrorKind::config,
          "quantile level must lie in (0,1)");
  require(n > p, ErrorKind::sample_size,
          "need more observations than design columns");
  qrdetail::check_design_rank(design);

  // Primal coefficients are recovered as the multipliers b of the dual
  //   min y'z  s.t.  X'z = v X'1, 0 <= z <= 1.
  Eigen::VectorXd b(p);
  {
    // least squares warm start
    b = design.colPivHouseholderQr().solve(response);
  }
  Eigen::VectorXd r = response - design * b;
  const double zeta = std::max(1e-8, 1e-4 * r.cwiseAbs().mean());
  Eigen::VectorXd u = r.cwiseMax(0.0).array() + zeta;
  Eigen::VectorXd w = (-r).cwiseMax(0.0).array() + zeta;
  Eigen::VectorXd z = Eigen::VectorXd::Constant(n, v);
  Eigen::VectorXd s = Eigen::VectorXd::Constant(n, 1.0 - v);
  const Eigen::VectorXd c = v * (design.transpose() * Eigen::VectorXd::Ones(n));

  auto max_step = [](const Eigen::VectorXd& x, const Eigen::VectorXd& dx) {
    double a = 1.0;
    for (Eigen::Index i = 0; i < x.size(); ++i)
      if (dx(i) < 0.0) a = std::min(a, -x(i) / dx(i));
    return a;
  };

  int it = 0;
  double gap = z.dot(u) + s.dot(w);
  bool converged = false;
  Eigen::VectorXd dz_a(n), du_a(n), dw_a(n), dz(n), du(n), dw(n);
  for (; it < opts.max_iter; ++it) {
    const double loss_scale = 1.0 + std::abs(check_loss(design, response, v, b));
    gap = z.dot(u) + s.dot(w);
    if (gap <= opts.tol * loss_scale) {
      converged = true;
      break;
    }
    Eigen::VectorXd q = (u.array() / z.array() + w.array() / s.array()).inverse().matrix();
    Eigen::VectorXd r2 = response - design * b - u + w;
    Eigen::VectorXd r1 = c - design.transpose() * z;

    Eigen::MatrixXd XQX = design.transpose() * q.asDiagonal() * design;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(XQX);
    if (ldlt.info() != Eigen::Success) {
      XQX.diagonal().array() += 1e-12 * XQX.diagonal().mean();
      ldlt.compute(XQX);
      require(ldlt.info() == Eigen::Success, ErrorKind::convergence,
              "interior-point normal equations not factorizable");
    }

    // Affine (predictor) direction.
    Eigen::VectorXd rhs_aff = r2 + u - w;  // = current residual r
    Eigen::VectorXd db = ldlt.solve(r1 + design.transpose() * (q.asDiagonal() * rhs_aff));
    dz_a = q.asDiagonal() * (design * db - rhs_aff);
    du_a = -u.array() - (u.array() / z.array()) * dz_a.array();
    dw_a = -w.array() + (w.array() / s.array()) * dz_a.array();
    double ap = std::min(max_step(z, dz_a), max_step(s, -dz_a));
    double ad = std::min(max_step(u, du_a), max_step(w, dw_a));
    double gap_aff = (z + ap * dz_a).dot(u + ad * du_a) +
                     (s - ap * dz_a).dot(w + ad * dw_a);
    double sigma = std::pow(std::max(gap_aff, 0.0) / gap, 3.0);
    double mu = sigma * gap / (2.0 * static_cast<double>(n));

    // Corrector with Mehrotra second-order terms.
    Eigen::VectorXd g1 = (mu - dz_a.array() * du_a.array()).matrix();
    Eigen::VectorXd g2 = (mu + dz_a.array() * dw_a.array()).matrix();
    Eigen::VectorXd rhs = rhs_aff - (g1.array() / z.array()).matrix() +
                          (g2.array() / s.array()).matrix();
    db = ldlt.solve(r1 + design.transpose() * (q.asDiagonal() * rhs));
    dz = q.asDiagonal() * (design * db - rhs);
    du = ((g1 - u.asDiagonal() * dz).array() / z.array()).matrix() - u;
    dw = ((g2 + w.asDiagonal() * dz).array() / s.array()).matrix() - w;

    ap = 0.9995 * std::min(max_step(z, dz), max_step(s, -dz));
    ad = 0.9995 * std::min(max_step(u, du), max_step(w, dw));
    ap = std::min(ap, 1.0);
    ad = std::min(ad, 1.0);
    if (ap < 1e-14 && ad < 1e-14) break;
    z += ap * dz;
    s -= ap * dz;
    u += ad * du;
    w += ad * dw;
    b += ad * db;
  }

  bool polished = false;
  if (opts.polish) polished = qrdetail::polish_vertex(design, response, v, b);
  if (!converged && !polished) {
    fail(ErrorKind::convergence,
         "interior-point did not reach duality gap tolerance (gap " +
             std::to_string(gap) + " after " + std::to_string(it) +
             " iterations)");
  }
  if (info) {
    info->iterations = it;
    info->duality_gap = gap;
    info->polished = polished;
  }
  return b;
}

// ---------------------------------------------------------------------------
// Grid fit on the interacted first-stage design S_i = (1, X_i', Z_i, Z_i X_i').

struct QuantileFit {
  QuantileGrid grid;
  std::pair<int, int> pair{0, 1};
  int d_x = 0;
  int p = 2;  // 2*(d_x+1)
  std::vector<int> subsample;          // row indices into the parent dataset
  std::vector<int> z01;                // recoded indicator per subsample row
  std::vector<Eigen::VectorXd> coef;   // a(v) per grid point
  std::vector<Eigen::VectorXd> coef_lo, coef_hi;  // a(v -/+ h)
  std::vector<double> bandwidth;
  std::vector<Eigen::MatrixXd> theta;      // density-weighted Gram per point
  std::vector<Eigen::MatrixXd> theta_inv;
  std::vector<Eigen::MatrixXd> score_outer;  // E_n[(v-1(.))^2 S S']
  std::vector<double> theta_min_eig;
  std::vector<int> density_floored;
  double density_floor = 0.0;
  double density_cap = 0.0;
  std::vector<std::string> warnings;

  int n_sub() const { return static_cast<int>(subsample.size()); }

  Eigen::VectorXd s_row(const Dataset& d, int sub_i) const {
    Eigen::VectorXd s(p);
    const int row = subsample[static_cast<size_t>(sub_i)];
    const double z = static_cast<double>(z01[static_cast<size_t>(sub_i)]);
    s(0) = 1.0;
    for (int j = 0; j < d_x; ++j) s(1 + j) = d.covariates(row, j);
    s(1 + d_x) = z;
    for (int j = 0; j < d_x; ++j) s(2 + d_x + j) = z * d.covariates(row, j);
    return s;
  }
  // Delta S(x) = (0, 0', 1, x')'
  Eigen::VectorXd delta_s(const Eigen::VectorXd& x) const {
    Eigen::VectorXd s = Eigen::VectorXd::Zero(p);
    s(1 + d_x) = 1.0;
    for (int j = 0; j < d_x; ++j) s(2 + d_x + j) = x(j);
    return s;
  }
  double q_at(const Eigen::VectorXd& x, int j, int z) const {
    const Eigen::VectorXd& a = coef[static_cast<size_t>(j)];
    double q = a(0);
    for (int k = 0; k < d_x; ++k) q += x(k) * a(1 + k);
    if (z == 1) {
      q += a(1 + d_x);
      for (int k = 0; k < d_x; ++k) q += x(k) * a(2 + d_x + k);
    }
    return q;
  }
};

inline double hall_sheather_bandwidth(double v, int n) {
  const double z975 = 1.959963984540054;
  double phi_q = normal_pdf(normal_quantile(v));
  double q = normal_quantile(v);
  double num = 1.5 * phi_q * phi_q;
  double den = 2.0 * q * q + 1.0;
  double h = std::pow(static_cast<double>(n), -1.0 / 3.0) *
             std::pow(z975, 2.0 / 3.0) * std::cbrt(num / den);
  h = std::min(h, 0.995 * std::min(v, 1.0 - v));
  return std::max(h, 1e-6);
}

inline QuantileFit fit_grid(const Dataset& d, const QuantileGrid& grid,
                            std::pair<int, int> pair, const QrOptions& opts = {},
                            int workers = 0) {
  require(pair.first >= 0 && pair.first <= d.K && pair.second >= 0 &&
              pair.second <= d.K && pair.first != pair.second,
          ErrorKind::support, "instrument pair codes must be distinct and present");
  QuantileFit fit;
  fit.grid = grid;
  fit.pair = pair;
  fit.d_x = d.d_x;
  fit.p = 2 * (d.d_x + 1);
  for (int i = 0; i < d.n; ++i) {
    int z = d.instrument[static_cast<size_t>(i)];
    if (z == pair.first || z == pair.second) {
      fit.subsample.push_back(i);
      fit.z01.push_back(z == pair.second ? 1 : 0);
    }
  }
  const int m = fit.n_sub();
  require(m > fit.p, ErrorKind::sample_size,
          "pair subsample too small for the first-stage design");
  bool has0 = false, has1 = false;
  for (int z : fit.z01) (z ? has1 : has0) = true;
  require(has0 && has1, ErrorKind::support, "both pair cells must be nonempty");

  Eigen::MatrixXd S(m, fit.p);
  Eigen::VectorXd t(m);
  for (int i = 0; i < m; ++i) {
    S.row(i) = fit.s_row(d, i).transpose();
    t(i) = d.treatment(fit.subsample[static_cast<size_t>(i)]);
  }
  std::vector<double> tvals(t.data(), t.data() + m);
  double iqr = iqr_of(tvals);
  if (iqr <= 0.0) iqr = std::max(1e-12, sample_sd(tvals));
  if (iqr <= 0.0) iqr = 1.0;
  fit.density_floor = 1e-3 / iqr;
  fit.density_cap = 1e12 / iqr;

  const int l = grid.l;
  fit.coef.resize(static_cast<size_t>(l));
  fit.coef_lo.resize(static_cast<size_t>(l));
  fit.coef_hi.resize(static_cast<size_t>(l));
  fit.bandwidth.resize(static_cast<size_t>(l));
  fit.theta.resize(static_cast<size_t>(l));
  fit.theta_inv.resize(static_cast<size_t>(l));
  fit.score_outer.resize(static_cast<size_t>(l));
  fit.theta_min_eig.resize(static_cast<size_t>(l));
  fit.density_floored.assign(static_cast<size_t>(l), 0);

  std::vector<std::string> point_warnings(static_cast<size_t>(l));
  parallel_for(static_cast<size_t>(l), workers, [&](size_t j) {
    const double v = grid.points[j];
    Eigen::VectorXd a;
    try {
      a = fit_check_loss(S, t, v, opts);
    } catch (const Error& e) {
      throw Error(e.kind(), std::string(e.what()) + " at v=" + std::to_string(v));
    }
    const double h = hall_sheather_bandwidth(v, m);
    Eigen::VectorXd alo = fit_check_loss(S, t, v - h, opts);
    Eigen::VectorXd ahi = fit_check_loss(S, t, v + h, opts);

    Eigen::MatrixXd theta = Eigen::MatrixXd::Zero(fit.p, fit.p);
    Eigen::MatrixXd jmat = Eigen::MatrixXd::Zero(fit.p, fit.p);
    int floored = 0;
    for (int i = 0; i < m; ++i) {
      const Eigen::VectorXd s = S.row(i).transpose();
      double denom = s.dot(ahi - alo);
      double f;
      if (denom <= 0.0) {
        f = fit.density_floor;
        ++floored;
      } else {
        f = 2.0 * h / denom;
        if (f < fit.density_floor) {
          f = fit.density_floor;
          ++floored;
        } else if (f > fit.density_cap) {
          f = fit.density_cap;
        }
      }
      theta.noalias() += f * s * s.transpose();
      double ind = (t(i) <= s.dot(a)) ? 1.0 : 0.0;
      double sc = v - ind;
      jmat.noalias() += sc * sc * s * s.transpose();
    }
    theta /= static_cast<double>(m);
    jmat /= static_cast<double>(m);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(theta);
    double mineig = es.eigenvalues().minCoeff();
    Eigen::MatrixXd theta_inv;
    if (mineig > 1e-12 * es.eigenvalues().maxCoeff()) {
      theta_inv = theta.ldlt().solve(Eigen::MatrixXd::Identity(fit.p, fit.p));
    } else {
      // pseudo-inverse on the stable eigenspace
      Eigen::VectorXd ev = es.eigenvalues();
      Eigen::MatrixXd V = es.eigenvectors();
      Eigen::VectorXd inv = ev;
      double cut = 1e-12 * ev.maxCoeff();
      for (Eigen::Index k = 0; k < inv.size(); ++k)
        inv(k) = ev(k) > cut ? 1.0 / ev(k) : 0.0;
      theta_inv = V * inv.asDiagonal() * V.transpose();
      point_warnings[j] = "near-singular density-weighted Gram at v=" +
                          std::to_string(v);
    }
    fit.coef[j] = a;
    fit.coef_lo[j] = alo;
    fit.coef_hi[j] = ahi;
    fit.bandwidth[j] = h;
    fit.theta[j] = theta;
    fit.theta_inv[j] = theta_inv;
    fit.score_outer[j] = jmat;
    fit.theta_min_eig[j] = mineig;
    fit.density_floored[j] = floored;
  });
  int total_floored = 0;
  for (int f : fit.density_floored) total_floored += f;
  if (total_floored > 0.10 * static_cast<double>(m) * l) {
    fit.warnings.push_back(
        "ill-conditioning: more than 10% of conditional density quotients "
        "were floored");
  }
  for (auto& w : point_warnings)
    if (!w.empty()) fit.warnings.push_back(w);
  return fit;
}

inline double delta_q(const QuantileFit& f, const Eigen::VectorXd& x, double v) {
  int j = f.grid.index_of(v);
  require(x.size() == f.d_x, ErrorKind::config,
          "covariate vector has wrong length");
  const Eigen::VectorXd& a = f.coef[static_cast<size_t>(j)];
  double dq = a(1 + f.d_x);
  for (int k = 0; k < f.d_x; ++k) dq += x(k) * a(2 + f.d_x + k);
  return dq;
}

// Standard error of the quantile-gap estimate at (x, grid point j):
// sqrt(DS' theta^-1 J theta^-1 DS / n) on the fit subsample.
inline double se_delta_q(const QuantileFit& f, const Eigen::VectorXd& x, int j) {
  Eigen::VectorXd ds = f.delta_s(x);
  const Eigen::MatrixXd& ti = f.theta_inv[static_cast<size_t>(j)];
  Eigen::VectorXd w = ti * ds;
  double var = w.dot(f.score_outer[static_cast<size_t>(j)] * w) /
               static_cast<double>(f.n_sub());
  return std::sqrt(std::max(var, 0.0));
}

// Per-observation first-stage scores phi_i(v_j) as rows of an n_sub x p matrix.
inline Eigen::MatrixXd qr_scores(const QuantileFit& f, const Dataset& d, int j) {
  const int m = f.n_sub();
  Eigen::MatrixXd phi(m, f.p);
  const Eigen::VectorXd& a = f.coef[static_cast<size_t>(j)];
  const double v = f.grid.points[static_cast<size_t>(j)];
  for (int i = 0; i < m; ++i) {
    Eigen::VectorXd s = f.s_row(d, i);
    double ind = (d.treatment(f.subsample[static_cast<size_t>(i)]) <= s.dot(a))
                     ? 1.0
                     : 0.0;
    phi.row(i) =
        (f.theta_inv[static_cast<size_t>(j)] * ((ind - v) * s)).transpose();
  }
  return phi;
}

// Quantile evaluations q_z(x, v_j) for all grid points; optionally rearranged
// to be monotone in v (sorting each z-curve over the grid).
inline void eval_quantile_curves(const QuantileFit& f, const Eigen::VectorXd& x,
                                 bool rearrange, std::vector<double>& q0,
                                 std::vector<double>& q1) {
  const int l = f.grid.l;
  q0.resize(static_cast<size_t>(l));
  q1.resize(static_cast<size_t>(l));
  for (int j = 0; j < l; ++j) {
    q0[static_cast<size_t>(j)] = f.q_at(x, j, 0);
    q1[static_cast<size_t>(j)] = f.q_at(x, j, 1);
  }
  if (rearrange) {
    std::sort(q0.begin(), q0.end());
    std::sort(q1.begin(), q1.end());
  }
}

}  // namespace driv
