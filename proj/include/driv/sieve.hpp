// Second-stage partially linear series least squares:
//   m_z(x,t) = x'b0 + g0(t) + z x'b1 + z g1(t)
// with the t-block spanned by a power or B-spline basis, interacted with the
// binary pair indicator. Fit is minimum-norm least squares via SVD; the Gram
// pseudo-inverse and the residual-weighted matrices back the plug-in
// variances downstream.
#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "driv/common.hpp"
#include "driv/dataset.hpp"

namespace driv {

enum class BasisFamily { power, bspline };

struct BasisSpec {
  BasisFamily family = BasisFamily::power;
  int J = 2;        // basis functions in t (includes the constant)
  int order = 4;    // B-spline order (degree + 1)
  std::string knot_rule = "uniform";  // or "quantile"
  double t_lo = std::numeric_limits<double>::quiet_NaN();
  double t_hi = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> knots;  // full clamped knot vector, filled at fit time

  bool has_range() const { return std::isfinite(t_lo) && std::isfinite(t_hi); }
};

namespace sievedetail {

inline void validate(const BasisSpec& spec) {
  require(spec.J >= 1, ErrorKind::config, "basis size J must be >= 1");
  if (spec.family == BasisFamily::bspline) {
    require(spec.order >= 2, ErrorKind::config, "B-spline order must be >= 2");
    require(spec.J >= spec.order, ErrorKind::config,
            "B-spline needs J >= order");
  }
}

// map t to [-1,1] over [t_lo, t_hi]
inline double standardize(const BasisSpec& spec, double t) {
  return 2.0 * (t - spec.t_lo) / (spec.t_hi - spec.t_lo) - 1.0;
}
inline double standardize_slope(const BasisSpec& spec) {
  return 2.0 / (spec.t_hi - spec.t_lo);
}

inline std::vector<double> make_knots(const BasisSpec& spec,
                                      const std::vector<double>& t_sorted) {
  const int interior = spec.J - spec.order;
  std::vector<double> knots;
  for (int k = 0; k < spec.order; ++k) knots.push_back(spec.t_lo);
  if (spec.knot_rule == "quantile" && !t_sorted.empty()) {
    for (int k = 1; k <= interior; ++k) {
      double u = static_cast<double>(k) / (interior + 1);
      double q = quantile_sorted(t_sorted, u);
      q = std::min(std::max(q, std::nextafter(spec.t_lo, spec.t_hi)),
                   std::nextafter(spec.t_hi, spec.t_lo));
      knots.push_back(q);
    }
  } else {
    for (int k = 1; k <= interior; ++k)
      knots.push_back(spec.t_lo + (spec.t_hi - spec.t_lo) * k / (interior + 1));
  }
  for (int k = 0; k < spec.order; ++k) knots.push_back(spec.t_hi);
  std::sort(knots.begin(), knots.end());
  return knots;
}

// Cox-de Boor evaluation of all J B-spline basis functions (and optionally
// first derivatives) at t.
inline void bspline_eval(const BasisSpec& spec, double t,
                         Eigen::VectorXd& val, Eigen::VectorXd* der) {
  const int J = spec.J, ord = spec.order;
  const auto& kn = spec.knots;
  val = Eigen::VectorXd::Zero(J);
  if (der) *der = Eigen::VectorXd::Zero(J);
  // clamp evaluation to the closed support
  double tt = std::min(std::max(t, kn.front()), kn.back());
  // order-1 (piecewise constant) seed
  std::vector<double> N(static_cast<size_t>(J + ord), 0.0);
  int last = J - 1;
  for (int i = 0; i < J + ord - 1; ++i) {
    bool in = kn[static_cast<size_t>(i)] <= tt && tt < kn[static_cast<size_t>(i + 1)];
    if (tt >= kn.back() && kn[static_cast<size_t>(i + 1)] >= kn.back() &&
        kn[static_cast<size_t>(i)] < kn.back())
      in = true;  // right-closed at the last span
    N[static_cast<size_t>(i)] = in ? 1.0 : 0.0;
  }
  std::vector<double> Nprev;
  for (int k = 2; k <= ord; ++k) {
    Nprev = N;
    for (int i = 0; i + k - 1 < J + ord - 1; ++i) {
      double left = 0.0, right = 0.0;
      double den1 = kn[static_cast<size_t>(i + k - 1)] - kn[static_cast<size_t>(i)];
      double den2 = kn[static_cast<size_t>(i + k)] - kn[static_cast<size_t>(i + 1)];
      if (den1 > 0.0) left = (tt - kn[static_cast<size_t>(i)]) / den1 * Nprev[static_cast<size_t>(i)];
      if (den2 > 0.0)
        right = (kn[static_cast<size_t>(i + k)] - tt) / den2 * Nprev[static_cast<size_t>(i + 1)];
      N[static_cast<size_t>(i)] = left + right;
    }
    if (der && k == ord) {
      for (int i = 0; i <= last; ++i) {
        double d1 = kn[static_cast<size_t>(i + ord - 1)] - kn[static_cast<size_t>(i)];
        double d2 = kn[static_cast<size_t>(i + ord)] - kn[static_cast<size_t>(i + 1)];
        double a = d1 > 0.0 ? Nprev[static_cast<size_t>(i)] / d1 : 0.0;
        double b = d2 > 0.0 ? Nprev[static_cast<size_t>(i + 1)] / d2 : 0.0;
        (*der)(i) = static_cast<double>(ord - 1) * (a - b);
      }
    }
  }
  for (int i = 0; i <= last; ++i) val(i) = N[static_cast<size_t>(i)];
}

// t-block values and d/dt derivatives in original units
inline void t_block(const BasisSpec& spec, double t, Eigen::VectorXd& val,
                    Eigen::VectorXd* der) {
  if (spec.family == BasisFamily::power) {
    double u = spec.has_range() ? standardize(spec, t) : t;
    double slope = spec.has_range() ? standardize_slope(spec) : 1.0;
    val.resize(spec.J);
    if (der) der->resize(spec.J);
    double up = 1.0;
    for (int j = 0; j < spec.J; ++j) {
      val(j) = up;
      if (der)
        (*der)(j) = j == 0 ? 0.0 : static_cast<double>(j) * std::pow(u, j - 1) * slope;
      up *= u;
    }
  } else {
    require(spec.has_range() && !spec.knots.empty(), ErrorKind::config,
            "B-spline basis requires a fitted knot vector");
    require(t >= spec.t_lo && t <= spec.t_hi, ErrorKind::extrapolation,
            "t outside B-spline support [" + std::to_string(spec.t_lo) + "," +
                std::to_string(spec.t_hi) + "]");
    bspline_eval(spec, t, val, der);
  }
}

}  // namespace sievedetail

// psi^J(x,t,z) = (x', b(t)', z x', z b(t)')' with b the t-block.
inline Eigen::VectorXd build_basis(const BasisSpec& spec,
                                   const Eigen::VectorXd& x, double t, int z) {
  sievedetail::validate(spec);
  const int d_x = static_cast<int>(x.size());
  Eigen::VectorXd tb;
  sievedetail::t_block(spec, t, tb, nullptr);
  Eigen::VectorXd out(2 * (d_x + spec.J));
  for (int j = 0; j < d_x; ++j) out(j) = x(j);
  for (int j = 0; j < spec.J; ++j) out(d_x + j) = tb(j);
  const double zz = z ? 1.0 : 0.0;
  for (int j = 0; j < d_x; ++j) out(d_x + spec.J + j) = zz * x(j);
  for (int j = 0; j < spec.J; ++j) out(2 * d_x + spec.J + j) = zz * tb(j);
  return out;
}

// d/dt of psi^J: only the t-blocks contribute.
inline Eigen::VectorXd build_basis_dt(const BasisSpec& spec,
                                      const Eigen::VectorXd& x, double t, int z) {
  sievedetail::validate(spec);
  const int d_x = static_cast<int>(x.size());
  Eigen::VectorXd tb, dtb;
  sievedetail::t_block(spec, t, tb, &dtb);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(2 * (d_x + spec.J));
  for (int j = 0; j < spec.J; ++j) out(d_x + j) = dtb(j);
  const double zz = z ? 1.0 : 0.0;
  for (int j = 0; j < spec.J; ++j) out(2 * d_x + spec.J + j) = zz * dtb(j);
  return out;
}

struct SeriesFit {
  BasisSpec spec;
  std::pair<int, int> pair{0, 1};
  int d_x = 0;
  int dim = 0;  // 2*(d_x+J)
  std::vector<int> subsample;
  std::vector<int> z01;
  Eigen::VectorXd coef;
  Eigen::MatrixXd psi;        // n_sub x dim design
  Eigen::VectorXd residuals;  // e_i
  Eigen::MatrixXd gram;       // G = Psi'Psi/n
  Eigen::MatrixXd gram_pinv;
  Eigen::MatrixXd omega;      // n^-1 sum e_i^2 psi psi'
  Eigen::MatrixXd mho;        // G^- Omega G^-
  int effective_rank = 0;
  bool rank_deficient = false;
  std::vector<std::string> warnings;

  int n_sub() const { return static_cast<int>(subsample.size()); }
  double m_hat(const Eigen::VectorXd& x, double t, int z) const {
    return build_basis(spec, x, t, z).dot(coef);
  }
  double dm_dt_hat(const Eigen::VectorXd& x, double t, int z) const {
    return build_basis_dt(spec, x, t, z).dot(coef);
  }
};

inline SeriesFit fit_series(const Dataset& d, BasisSpec spec,
                            std::pair<int, int> pair,
                            const Eigen::VectorXd* outcome_override = nullptr) {
  sievedetail::validate(spec);
  SeriesFit fit;
  fit.pair = pair;
  fit.d_x = d.d_x;
  for (int i = 0; i < d.n; ++i) {
    int z = d.instrument[static_cast<size_t>(i)];
    if (z == pair.first || z == pair.second) {
      fit.subsample.push_back(i);
      fit.z01.push_back(z == pair.second ? 1 : 0);
    }
  }
  const int m = fit.n_sub();
  fit.dim = 2 * (d.d_x + spec.J);
  require(m > fit.dim, ErrorKind::sample_size,
          "pair subsample size " + std::to_string(m) +
              " too small for series dimension " + std::to_string(fit.dim));

  if (!spec.has_range()) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (int i : fit.subsample) {
      lo = std::min(lo, d.treatment(i));
      hi = std::max(hi, d.treatment(i));
    }
    double pad = 0.01 * std::max(hi - lo, 1e-12);
    spec.t_lo = lo - pad;
    spec.t_hi = hi + pad;
  }
  if (spec.family == BasisFamily::bspline && spec.knots.empty()) {
    std::vector<double> t_sorted;
    t_sorted.reserve(static_cast<size_t>(m));
    for (int i : fit.subsample) t_sorted.push_back(d.treatment(i));
    std::sort(t_sorted.begin(), t_sorted.end());
    spec.knots = sievedetail::make_knots(spec, t_sorted);
  }
  fit.spec = spec;

  Eigen::MatrixXd Psi(m, fit.dim);
  Eigen::VectorXd y(m);
  Eigen::VectorXd x(d.d_x);
  for (int i = 0; i < m; ++i) {
    const int row = fit.subsample[static_cast<size_t>(i)];
    for (int j = 0; j < d.d_x; ++j) x(j) = d.covariates(row, j);
    Psi.row(i) =
        build_basis(spec, x, d.treatment(row), fit.z01[static_cast<size_t>(i)])
            .transpose();
    y(i) = outcome_override ? (*outcome_override)(row) : d.outcome(row);
  }

  Eigen::BDCSVD<Eigen::MatrixXd> svd(Psi, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const double smax = svd.singularValues().size() ? svd.singularValues()(0) : 0.0;
  const double cut = 1e-10 * smax;
  int rank = 0;
  for (Eigen::Index k = 0; k < svd.singularValues().size(); ++k)
    if (svd.singularValues()(k) > cut) ++rank;
  fit.effective_rank = rank;
  fit.rank_deficient = rank < fit.dim;
  if (fit.rank_deficient)
    fit.warnings.push_back("rank-deficient series design: effective rank " +
                           std::to_string(rank) + " of " +
                           std::to_string(fit.dim) +
                           "; minimum-norm solution used");
  // minimum-norm least squares and Gram pseudo-inverse from the same SVD
  Eigen::VectorXd sv_inv = svd.singularValues();
  for (Eigen::Index k = 0; k < sv_inv.size(); ++k)
    sv_inv(k) = svd.singularValues()(k) > cut ? 1.0 / svd.singularValues()(k) : 0.0;
  fit.coef = svd.matrixV() * sv_inv.asDiagonal() *
             (svd.matrixU().transpose() * y);
  fit.gram = Psi.transpose() * Psi / static_cast<double>(m);
  fit.gram_pinv = static_cast<double>(m) * svd.matrixV() *
                  sv_inv.cwiseProduct(sv_inv).asDiagonal() *
                  svd.matrixV().transpose();
  fit.psi = std::move(Psi);
  fit.residuals = y - fit.psi * fit.coef;
  fit.omega = Eigen::MatrixXd::Zero(fit.dim, fit.dim);
  for (int i = 0; i < m; ++i) {
    double e2 = fit.residuals(i) * fit.residuals(i);
    fit.omega.noalias() += e2 * fit.psi.row(i).transpose() * fit.psi.row(i);
  }
  fit.omega /= static_cast<double>(m);
  fit.mho = fit.gram_pinv * fit.omega * fit.gram_pinv;
  return fit;
}

inline double predict_m(const SeriesFit& f, const Eigen::VectorXd& x, double t,
                        int z) {
  return f.m_hat(x, t, z);
}
inline double predict_dm_dt(const SeriesFit& f, const Eigen::VectorXd& x,
                            double t, int z) {
  return f.dm_dt_hat(x, t, z);
}

}  // namespace driv
