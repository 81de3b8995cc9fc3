// Dispatch layer binding fits, estimands and inference into named estimator
// runs; shared by the CLI, the bootstrap closures, and the Monte Carlo
// harness.
#pragma once

#include <string>
#include <vector>

#include "driv/common.hpp"
#include "driv/dataset.hpp"
#include "driv/estimands.hpp"
#include "driv/inference.hpp"

namespace driv {

struct EstimatorRequest {
  std::string id = "pi_dr";  // wald | wald_x | wald_x_multi | pi_dr |
                             // pi_dr_plus | pi_dr_minus | pi_dr_multi |
                             // pi_v | dist_dr
  EstimandConfig config;
  double y_threshold = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> vs;  // quantile levels for pi_v (grid points)
  enum class Infer { none, plugin, bootstrap, both } infer = Infer::plugin;
  int bootstrap_B = 200;
  uint64_t seed = 1;
  MultiplierLaw multiplier = MultiplierLaw::normal;
};

namespace driverdetail {

inline SignMode sign_for(const std::string& id, SignMode base) {
  if (id == "pi_dr_plus") return SignMode::positive;
  if (id == "pi_dr_minus") return SignMode::negative;
  return base;
}

inline double point_only(const Dataset& d, const EstimatorRequest& req) {
  EstimandConfig cfg = req.config;
  cfg.workers = 1;
  const Dataset* work = &d;
  Dataset stripped;
  if (!cfg.use_covariates && d.d_x > 0) {
    stripped = strip_covariates(d);
    work = &stripped;
  }
  if (req.id == "wald") return wald(*work, cfg.pair, cfg.level).point;
  if (req.id == "wald_x") return wald_x(*work, cfg.pair, cfg.level).point;
  if (req.id == "wald_x_multi") return wald_x_multi(*work, cfg.level).point;
  if (req.id == "pi_dr_multi") return pi_dr_multi(*work, cfg).report.point;
  if (req.id == "dist_dr") {
    return distributional_fit(*work, req.y_threshold, cfg).result.point;
  }
  if (req.id == "pi_v") {
    require(req.vs.size() == 1, ErrorKind::config,
            "bootstrap of pi_v needs exactly one quantile level");
    cfg.sign = SignMode::absolute;
    PairFits fits = fit_pair_pipeline(*work, cfg.pair, cfg);
    return pi_v(fits.qf, fits.sf, *work, req.vs[0], fits.trim,
                cfg.rearrange_quantiles, &fits.eval);
  }
  cfg.sign = sign_for(req.id, cfg.sign);
  return fit_pair_pipeline(*work, cfg.pair, cfg).result.point;
}

inline void attach_ci(EstimateReport& r, double level) {
  if (r.se_plugin.has_value()) {
    double z = normal_quantile(0.5 + level / 2.0);
    r.ci_lo = r.point - z * (*r.se_plugin);
    r.ci_hi = r.point + z * (*r.se_plugin);
    r.ci_level = level;
  }
}

}  // namespace driverdetail

inline std::vector<EstimateReport> run_estimator(const Dataset& d,
                                                 const EstimatorRequest& req) {
  using Infer = EstimatorRequest::Infer;
  EstimandConfig cfg = req.config;
  const Dataset* work = &d;
  Dataset stripped;
  if (!cfg.use_covariates && d.d_x > 0) {
    stripped = strip_covariates(d);
    work = &stripped;
  }
  const bool want_plugin = req.infer == Infer::plugin || req.infer == Infer::both;
  const bool want_boot = req.infer == Infer::bootstrap || req.infer == Infer::both;
  std::vector<EstimateReport> out;

  auto bootstrap_fill = [&](EstimateReport& r, const EstimatorRequest& point_req) {
    BootstrapResult br = pairs_bootstrap(
        *work,
        [&](const Dataset& rd) { return driverdetail::point_only(rd, point_req); },
        req.bootstrap_B, req.seed, cfg.level, cfg.workers);
    r.se_bootstrap = br.se;
    if (!r.se_plugin.has_value()) {
      r.ci_lo = br.ci_lo;
      r.ci_hi = br.ci_hi;
      r.ci_level = cfg.level;
    }
    if (br.failed > 0)
      r.warnings.push_back(std::to_string(br.failed) + " of " +
                           std::to_string(br.requested) +
                           " bootstrap replicates failed and were dropped");
  };

  if (req.id == "wald") {
    EstimateReport r = wald(*work, cfg.pair, cfg.level);
    if (!want_plugin) r.se_plugin.reset();
    if (want_boot) bootstrap_fill(r, req);
    driverdetail::attach_ci(r, cfg.level);
    out.push_back(std::move(r));
    return out;
  }
  if (req.id == "wald_x" || req.id == "wald_x_multi") {
    EstimateReport r = req.id == "wald_x" ? wald_x(*work, cfg.pair, cfg.level)
                                          : wald_x_multi(*work, cfg.level);
    if (want_boot) bootstrap_fill(r, req);
    out.push_back(std::move(r));
    return out;
  }
  if (req.id == "pi_dr_multi") {
    MultiFit mf = pi_dr_multi(*work, cfg);
    EstimateReport r = mf.report;
    if (want_plugin) {
      MultiInfluence inf = influence_multi(mf, *work);
      r.se_plugin = inf.se;
      driverdetail::attach_ci(r, cfg.level);
    }
    if (want_boot) bootstrap_fill(r, req);
    out.push_back(std::move(r));
    return out;
  }
  if (req.id == "pi_v") {
    require(!req.vs.empty(), ErrorKind::config, "pi_v needs quantile levels");
    cfg.sign = SignMode::absolute;
    PairFits fits = fit_pair_pipeline(*work, cfg.pair, cfg);
    for (double v : req.vs) {
      EstimateReport r;
      r.estimand_id = "pi_v@" + std::to_string(v);
      r.point = pi_v(fits.qf, fits.sf, *work, v, fits.trim,
                     cfg.rearrange_quantiles, &fits.eval);
      r.trimmed_fraction = fits.result.trimmed_fraction;
      if (want_plugin) {
        InfluenceDecomposition inf = influence_pi_v(fits, *work, v, r.point);
        r.se_plugin = inf.se;
        r.b_hat = inf.b_hat;
        driverdetail::attach_ci(r, cfg.level);
      }
      if (want_boot) {
        EstimatorRequest sub = req;
        sub.vs = {v};
        bootstrap_fill(r, sub);
      }
      out.push_back(std::move(r));
    }
    return out;
  }
  if (req.id == "dist_dr") {
    require(std::isfinite(req.y_threshold), ErrorKind::config,
            "dist_dr needs a y threshold");
    PairFits fits = distributional_fit(*work, req.y_threshold, cfg);
    EstimateReport r = pi_dr_report(fits, cfg.sign);
    r.estimand_id = "dist_dr@" + std::to_string(req.y_threshold);
    if (want_plugin) {
      InfluenceDecomposition inf =
          influence_pi_dr(fits, *work, cfg.sign, fits.result.point);
      r.se_plugin = inf.se;
      driverdetail::attach_ci(r, cfg.level);
    }
    if (want_boot) bootstrap_fill(r, req);
    out.push_back(std::move(r));
    return out;
  }
  if (req.id == "pi_dr" || req.id == "pi_dr_plus" || req.id == "pi_dr_minus") {
    cfg.sign = driverdetail::sign_for(req.id, cfg.sign);
    PairFits fits = fit_pair_pipeline(*work, cfg.pair, cfg);
    EstimateReport r = pi_dr_report(fits, cfg.sign);
    if (want_plugin) {
      InfluenceDecomposition inf =
          influence_pi_dr(fits, *work, cfg.sign, fits.result.point);
      r.se_plugin = inf.se;
      driverdetail::attach_ci(r, cfg.level);
    }
    if (want_boot) bootstrap_fill(r, req);
    out.push_back(std::move(r));
    return out;
  }
  fail(ErrorKind::config, "unknown estimator id '" + req.id + "'");
}

}  // namespace driv
