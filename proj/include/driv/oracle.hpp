// Ground-truth estimand values by deterministic quadrature over the DGP's
// structural functions, with a Richardson error bound from re-running at half
// resolution. These values anchor every Monte Carlo bias and coverage check.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "driv/common.hpp"
#include "driv/simulate.hpp"

namespace driv {

enum class OracleKind {
  tau_u,
  tau_dr,
  tau_dr_plus,
  tau_dr_minus,
  wald_weighted_late,
  pi_dr,
  pi_dr_multi,
  distributional,
};

struct OracleTarget {
  OracleKind kind = OracleKind::pi_dr;
  double param = 0.0;  // u for tau_u, y threshold for distributional
  std::pair<int, int> pair{0, 1};

  static OracleTarget TauU(double u) { return {OracleKind::tau_u, u, {0, 1}}; }
  static OracleTarget TauDr() { return {OracleKind::tau_dr, 0.0, {0, 1}}; }
  static OracleTarget PiDr(std::pair<int, int> pr = {0, 1}) {
    return {OracleKind::pi_dr, 0.0, pr};
  }
  static OracleTarget PiDrMulti() { return {OracleKind::pi_dr_multi, 0.0, {0, 1}}; }
  static OracleTarget Distributional(double y) {
    return {OracleKind::distributional, y, {0, 1}};
  }
};

struct OracleResult {
  double value = std::numeric_limits<double>::quiet_NaN();
  double error_bound = 0.0;
};

namespace oracledetail {

struct XNode {
  std::vector<double> x;
  double weight = 1.0;
};

inline std::vector<XNode> x_nodes(const CompiledDgp& c, int res) {
  std::vector<XNode> nodes;
  nodes.push_back({{}, 1.0});
  for (const auto& law : c.covariates) {
    std::vector<std::pair<double, double>> atom;  // (value, weight)
    switch (law.kind) {
      case CovariateLaw::bernoulli:
        atom = {{0.0, 1.0 - law.a}, {1.0, law.a}};
        break;
      case CovariateLaw::uniform:
        for (int g = 0; g < res; ++g) {
          double u = (g + 0.5) / res;
          atom.push_back({law.a + (law.b - law.a) * u, 1.0 / res});
        }
        break;
      case CovariateLaw::normal:
        for (int g = 0; g < res; ++g) {
          double u = (g + 0.5) / res;
          atom.push_back({law.a + law.b * normal_quantile(u), 1.0 / res});
        }
        break;
    }
    std::vector<XNode> next;
    next.reserve(nodes.size() * atom.size());
    for (const auto& nd : nodes) {
      for (const auto& [val, wt] : atom) {
        XNode nn = nd;
        nn.x.push_back(val);
        nn.weight *= wt;
        next.push_back(std::move(nn));
      }
    }
    nodes = std::move(next);
    require(nodes.size() <= 2000000, ErrorKind::resolution,
            "covariate quadrature grid too large at this resolution");
  }
  return nodes;
}

// propensity of each arm at x (empty arm_weights: marginal arm_probs)
inline std::vector<double> arm_propensity(const CompiledDgp& c,
                                          const std::vector<double>& x) {
  const int arms = c.spec.arms();
  std::vector<double> p(static_cast<size_t>(arms));
  if (c.arm_weights.empty()) {
    for (int k = 0; k < arms; ++k) p[static_cast<size_t>(k)] = c.arm_probs[static_cast<size_t>(k)];
    return p;
  }
  EvalEnv env;
  env.x = x.data();
  env.dx = static_cast<int>(x.size());
  double tot = 0.0;
  for (int k = 0; k < arms; ++k) {
    p[static_cast<size_t>(k)] = eval_expr(*c.arm_weights[static_cast<size_t>(k)], env);
    tot += p[static_cast<size_t>(k)];
  }
  for (auto& v : p) v /= tot;
  return p;
}

struct GapIntegrand {
  const CompiledDgp* c;
  bool distributional = false;
  double y_threshold = 0.0;
  int res = 128;
  // quasi-random nu points for high-dimensional disturbances
  std::vector<std::vector<double>> qmc;

  double g_value(const std::vector<double>& x, double t,
                 const std::vector<double>& eps) const {
    EvalEnv env;
    env.t = t;
    env.x = x.data();
    env.dx = static_cast<int>(x.size());
    env.eps = eps.data();
    env.neps = static_cast<int>(eps.size());
    double g = eval_expr(*c->outcome, env);
    if (distributional) return g <= y_threshold ? 1.0 : 0.0;
    return g;
  }

  double eps_and_gap(const std::vector<double>& x, double w,
                     const std::vector<double>& nu, double t_hi,
                     double t_lo) const {
    std::vector<double> eps(c->eps.size());
    EvalEnv env;
    env.w = w;
    env.nu = nu.data();
    env.nnu = static_cast<int>(nu.size());
    env.x = x.data();
    env.dx = static_cast<int>(x.size());
    for (size_t j = 0; j < c->eps.size(); ++j) eps[j] = eval_expr(*c->eps[j], env);
    return g_value(x, t_hi, eps) - g_value(x, t_lo, eps);
  }

  // E[ g(t_hi,x,eps) - g(t_lo,x,eps) | rank = v, X = x ]
  double delta_g(const std::vector<double>& x, double v, double t_hi,
                 double t_lo) const {
    const int nnu = c->spec.n_nu;
    double keep = 0.0;
    if (!qmc.empty()) {
      for (const auto& pt : qmc) {
        std::vector<double> nu(static_cast<size_t>(nnu));
        for (int k = 0; k < nnu; ++k) nu[static_cast<size_t>(k)] = normal_quantile(pt[static_cast<size_t>(k)]);
        keep += eps_and_gap(x, v, nu, t_hi, t_lo);
      }
      keep /= static_cast<double>(qmc.size());
    } else if (nnu == 0) {
      keep = eps_and_gap(x, v, {}, t_hi, t_lo);
    } else {
      // tensor midpoint grid over the nu probabilities
      int per = nnu == 1 ? res : std::max(8, res / 8);
      std::vector<int> idx(static_cast<size_t>(nnu), 0);
      long total = 1;
      for (int k = 0; k < nnu; ++k) total *= per;
      std::vector<double> nu(static_cast<size_t>(nnu));
      for (long a = 0; a < total; ++a) {
        long rem = a;
        for (int k = 0; k < nnu; ++k) {
          int g = static_cast<int>(rem % per);
          rem /= per;
          nu[static_cast<size_t>(k)] = normal_quantile((g + 0.5) / static_cast<double>(per));
        }
        keep += eps_and_gap(x, v, nu, t_hi, t_lo);
      }
      keep /= static_cast<double>(total);
    }
    if (c->coupling == CompiledDgp::invariant) return keep;
    if (c->coupling == CompiledDgp::similar) {
      // rank refreshed with probability kappa: mix in the unconditional eps law
      const double kappa = c->spec.similar_mix;
      int wres = std::max(8, res / 4);
      double refresh = 0.0;
      const int nnu2 = c->spec.n_nu;
      int per = nnu2 <= 1 ? std::max(8, res / 4) : std::max(8, res / 8);
      std::vector<double> nu(static_cast<size_t>(std::max(nnu2, 1)));
      for (int gw = 0; gw < wres; ++gw) {
        double w = (gw + 0.5) / static_cast<double>(wres);
        if (nnu2 == 0) {
          refresh += eps_and_gap(x, w, {}, t_hi, t_lo);
        } else {
          long total = 1;
          for (int k = 0; k < nnu2; ++k) total *= per;
          double acc = 0.0;
          for (long a = 0; a < total; ++a) {
            long rem = a;
            for (int k = 0; k < nnu2; ++k) {
              int g = static_cast<int>(rem % per);
              rem /= per;
              nu[static_cast<size_t>(k)] = normal_quantile((g + 0.5) / static_cast<double>(per));
            }
            acc += eps_and_gap(x, w, nu, t_hi, t_lo);
          }
          refresh += acc / static_cast<double>(total);
        }
      }
      refresh /= static_cast<double>(wres);
      return (1.0 - kappa) * keep + kappa * refresh;
    }
    fail(ErrorKind::dgp_spec,
         "no causal target under a violated rank coupling");
  }

  double treatment(const std::vector<double>& x, int arm, double u) const {
    EvalEnv env;
    env.u = u;
    env.x = x.data();
    env.dx = static_cast<int>(x.size());
    return eval_expr(*c->first_stage[static_cast<size_t>(arm)], env);
  }
};

inline GapIntegrand make_integrand(const CompiledDgp& c, int res,
                                   bool distributional, double y) {
  GapIntegrand gi;
  gi.c = &c;
  gi.res = res;
  gi.distributional = distributional;
  gi.y_threshold = y;
  if (c.spec.n_nu >= 3) {
    const uint64_t N = 1000000;
    gi.qmc.reserve(N);
    for (uint64_t i = 0; i < N; ++i)
      gi.qmc.push_back(halton_point(i, c.spec.n_nu));
  }
  return gi;
}

// single-resolution evaluation of a pairwise ratio target
inline double pair_ratio_value(const CompiledDgp& c, const OracleTarget& t,
                               int res) {
  const bool dist = t.kind == OracleKind::distributional;
  GapIntegrand gi = make_integrand(c, res, dist, t.param);
  auto nodes = x_nodes(c, res);
  const int lo = t.pair.first, hi = t.pair.second;
  require(lo >= 0 && hi >= 0 && lo < c.spec.arms() && hi < c.spec.arms(),
          ErrorKind::dgp_spec, "oracle pair out of range");

  if (t.kind == OracleKind::tau_u) {
    require(c.spec.d_x() == 0, ErrorKind::dgp_spec,
            "rank-level effect oracle requires no covariates");
    double v = t.param;
    double ta = gi.treatment({}, lo, v), tb = gi.treatment({}, hi, v);
    double dq = tb - ta;
    require(std::abs(dq) > 1e-14, ErrorKind::dgp_spec,
            "treatment gap is zero at the requested rank");
    return gi.delta_g({}, v, tb, ta) / dq;
  }

  double num = 0.0, den = 0.0;
  for (const auto& nd : nodes) {
    for (int gv = 0; gv < res; ++gv) {
      double v = (gv + 0.5) / static_cast<double>(res);
      double ta = gi.treatment(nd.x, lo, v);
      double tb = gi.treatment(nd.x, hi, v);
      double dq = tb - ta;
      if (dq == 0.0) continue;
      double use_sign = 0.0;
      switch (t.kind) {
        case OracleKind::tau_dr:
        case OracleKind::pi_dr:
        case OracleKind::distributional:
          use_sign = dq > 0.0 ? 1.0 : -1.0;
          break;
        case OracleKind::tau_dr_plus:
        case OracleKind::wald_weighted_late:
          use_sign = dq > 0.0 ? 1.0 : 0.0;
          break;
        case OracleKind::tau_dr_minus:
          use_sign = dq < 0.0 ? 1.0 : 0.0;
          break;
        default:
          break;
      }
      if (use_sign == 0.0) continue;
      double dg = gi.delta_g(nd.x, v, tb, ta);
      double wt = nd.weight / static_cast<double>(res);
      num += wt * use_sign * dg;
      den += wt * use_sign * dq;
    }
  }
  require(std::abs(den) > 1e-14, ErrorKind::dgp_spec,
          "oracle normalizer is zero: no treatment variation in the target set");
  return num / den;
}

inline double multi_value(const CompiledDgp& c, int res) {
  const int arms = c.spec.arms();
  require(arms >= 3, ErrorKind::dgp_spec, "multi-IV oracle needs >= 3 arms");
  auto nodes = x_nodes(c, res);
  // population cell means of T and arm shares under the propensity
  std::vector<double> pk(static_cast<size_t>(arms), 0.0);
  std::vector<double> rk(static_cast<size_t>(arms), 0.0);
  GapIntegrand gi = make_integrand(c, res, false, 0.0);
  for (const auto& nd : nodes) {
    auto prop = arm_propensity(c, nd.x);
    for (int k = 0; k < arms; ++k) {
      rk[static_cast<size_t>(k)] += nd.weight * prop[static_cast<size_t>(k)];
      double et = 0.0;
      for (int gv = 0; gv < res; ++gv) {
        double v = (gv + 0.5) / static_cast<double>(res);
        et += gi.treatment(nd.x, k, v) / static_cast<double>(res);
      }
      pk[static_cast<size_t>(k)] += nd.weight * prop[static_cast<size_t>(k)] * et;
    }
  }
  for (int k = 0; k < arms; ++k) pk[static_cast<size_t>(k)] /= rk[static_cast<size_t>(k)];
  std::vector<int> order(static_cast<size_t>(arms));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return pk[static_cast<size_t>(a)] < pk[static_cast<size_t>(b)]; });
  double pbar = 0.0;
  for (int k = 0; k < arms; ++k) pbar += rk[static_cast<size_t>(k)] * pk[static_cast<size_t>(k)];
  std::vector<double> lam(static_cast<size_t>(arms - 1), 0.0);
  double den = 0.0;
  for (int k = 1; k < arms; ++k) {
    double tail = 0.0;
    for (int l = k; l < arms; ++l)
      tail += rk[static_cast<size_t>(order[static_cast<size_t>(l)])] *
              (pk[static_cast<size_t>(order[static_cast<size_t>(l)])] - pbar);
    lam[static_cast<size_t>(k - 1)] =
        (pk[static_cast<size_t>(order[static_cast<size_t>(k)])] -
         pk[static_cast<size_t>(order[static_cast<size_t>(k - 1)])]) *
        tail;
    den += lam[static_cast<size_t>(k - 1)];
  }
  require(std::abs(den) > 1e-14, ErrorKind::dgp_spec,
          "multi-IV oracle: degenerate pair weights");
  double agg = 0.0;
  for (int k = 1; k < arms; ++k) {
    OracleTarget t = OracleTarget::PiDr({order[static_cast<size_t>(k - 1)],
                                         order[static_cast<size_t>(k)]});
    agg += (lam[static_cast<size_t>(k - 1)] / den) * pair_ratio_value(c, t, res);
  }
  return agg;
}

inline double oracle_value_at(const CompiledDgp& c, const OracleTarget& t,
                              int res) {
  if (t.kind == OracleKind::pi_dr_multi) return multi_value(c, res);
  return pair_ratio_value(c, t, res);
}

}  // namespace oracledetail

inline OracleResult oracle(const CompiledDgp& c, const OracleTarget& target,
                           int resolution = 256) {
  require(resolution >= 16, ErrorKind::resolution, "oracle resolution too small");
  const int r1 = resolution;
  const int r2 = std::max(8, resolution / 2);
  const int r4 = std::max(8, resolution / 4);
  double v1 = oracledetail::oracle_value_at(c, target, r1);
  double v2 = oracledetail::oracle_value_at(c, target, r2);
  double v4 = oracledetail::oracle_value_at(c, target, r4);
  const double scale = 1.0 + std::abs(v1);
  const double d1 = std::abs(v1 - v2);
  const double d2 = std::abs(v2 - v4);
  if (d1 > 1e-9 * scale && d1 > 0.75 * d2) {
    fail(ErrorKind::resolution,
         "quadrature not converging under refinement (deltas " +
             std::to_string(d2) + " -> " + std::to_string(d1) +
             "); raise resolution");
  }
  OracleResult out;
  out.value = v1;
  out.error_bound = std::max(2.0 * d1, 1e-10 * scale);
  return out;
}

inline OracleResult oracle(const DgpSpec& spec, const OracleTarget& target,
                           int resolution = 256) {
  return oracle(compile_dgp(spec), target, resolution);
}

// ---------------------------------------------------------------------------
// Preset DGP library.

// Monotone mean shift with an endogenous rank-linked disturbance and a
// constant unit-gain effect of 0.7.
inline DgpSpec dgp_m() {
  DgpSpec s;
  s.name = "dgp_m";
  s.first_stage = {"1 + u", "1.5 + u"};
  s.outcome = "0.7*t + eps0";
  s.disturbances = {"0.8*(w - 0.5) + 0.5*nu0"};
  s.n_nu = 1;
  s.coupling = "invariant";
  s.arm_probabilities = {0.5, 0.5};
  s.monotone = true;
  s.rank_similar = true;
  return s;
}

// Pure variance shift: identical cell means, sign-switching quantile gap,
// quadratic outcome so effects vary across ranks.
inline DgpSpec dgp_rs() {
  DgpSpec s;
  s.name = "dgp_rs";
  s.first_stage = {"4 + 2*u", "3 + 4*u"};
  s.outcome = "t^2/10 + eps0";
  s.disturbances = {"0.5*nu0"};
  s.n_nu = 1;
  s.coupling = "invariant";
  s.arm_probabilities = {0.5, 0.5};
  s.monotone = false;
  s.rank_similar = true;
  return s;
}

// Three arms, seven binary covariates, covariate-dependent assignment; the
// covariate-ignoring Wald ratio is biased here while the adjusted one is not.
inline DgpSpec dgp_x() {
  DgpSpec s;
  s.name = "dgp_x";
  s.first_stage = {
      "5 + 0.3*x0 - 0.2*x1 + 0.1*x4 + 0.8*u",
      "5.35 + 0.3*x0 - 0.2*x1 + 0.1*x4 + 0.9*u",
      "5.7 + 0.3*x0 - 0.2*x1 + 0.1*x4 + 1.0*u",
  };
  s.outcome = "0.4*t + 0.3*x0 - 0.25*x1 + 0.15*x4 + eps0";
  s.disturbances = {"0.7*(w - 0.5) + 0.5*nu0"};
  s.n_nu = 1;
  s.coupling = "invariant";
  s.covariate_laws = {"bernoulli(0.65)", "bernoulli(0.25)", "bernoulli(0.25)",
                      "bernoulli(0.25)", "bernoulli(0.5)",  "bernoulli(0.4)",
                      "bernoulli(0.3)"};
  s.arm_weights = {"1", "exp(0.5*x0 - 0.3*x1)", "exp(0.4*x4 - 0.4*x0)"};
  s.monotone = true;
  s.rank_similar = true;
  return s;
}

// Rank-similarity and monotonicity both violated (rank reversal driven by the
// outcome disturbance); marginal quantile curves do not cross, so the
// violation is invisible to the dominance diagnostics.
inline DgpSpec dgp_v() {
  DgpSpec s;
  s.name = "dgp_v";
  s.first_stage = {"2 + u", "2.2 + 0.9*u"};
  s.outcome = "0.5*t + eps0";
  s.disturbances = {"0.6*(w - 0.5) + 0.4*nu0"};
  s.n_nu = 1;
  s.coupling = "violated";
  s.arm_probabilities = {0.5, 0.5};
  s.monotone = false;
  s.rank_similar = false;
  return s;
}

inline DgpSpec dgp_preset(const std::string& name) {
  if (name == "dgp_m") return dgp_m();
  if (name == "dgp_rs") return dgp_rs();
  if (name == "dgp_x") return dgp_x();
  if (name == "dgp_v") return dgp_v();
  fail(ErrorKind::config, "unknown DGP preset '" + name + "'");
}

}  // namespace driv
