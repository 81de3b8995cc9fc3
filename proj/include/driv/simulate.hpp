// Synthetic data generation and ground truth. A DGP is declared through a
// small closed expression grammar (+, -, *, /, ^, exp, ind, nq) so the oracle
// can integrate the structural functions deterministically and bound its own
// quadrature error by Richardson comparison.
#pragma once

#include <cctype>
#include <cmath>
#include <cstring>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "driv/common.hpp"
#include "driv/dataset.hpp"

namespace driv {

// ---------------------------------------------------------------------------
// Expression grammar.

struct Expr;
using ExprPtr = std::shared_ptr<const Expr>;

struct Expr {
  enum Kind {
    constant,
    variable,
    add,
    sub,
    mul,
    divide,
    neg,
    power,
    exp_fn,
    ind_fn,  // 1(arg >= 0)
    nq_fn,   // standard normal quantile of arg
  } kind = constant;
  double value = 0.0;
  std::string name;
  ExprPtr a, b;
};

struct EvalEnv {
  double t = 0.0, u = 0.0, w = 0.0;
  const double* x = nullptr;
  int dx = 0;
  const double* eps = nullptr;
  int neps = 0;
  const double* nu = nullptr;
  int nnu = 0;

  double lookup(const std::string& name) const {
    if (name == "t") return t;
    if (name == "u") return u;
    if (name == "w") return w;
    auto indexed = [&](const char* prefix, const double* arr, int count,
                       double& out) {
      size_t plen = std::strlen(prefix);
      if (name.size() <= plen || name.compare(0, plen, prefix) != 0) return false;
      for (size_t k = plen; k < name.size(); ++k)
        if (!std::isdigit(static_cast<unsigned char>(name[k]))) return false;
      int idx = std::stoi(name.substr(plen));
      require(arr != nullptr && idx >= 0 && idx < count, ErrorKind::dgp_spec,
              "variable '" + name + "' out of range in this context");
      out = arr[idx];
      return true;
    };
    double out = 0.0;
    if (indexed("x", x, dx, out)) return out;
    if (indexed("eps", eps, neps, out)) return out;
    if (indexed("nu", nu, nnu, out)) return out;
    fail(ErrorKind::dgp_spec, "unknown variable '" + name + "'");
  }
};

inline double eval_expr(const Expr& e, const EvalEnv& env) {
  switch (e.kind) {
    case Expr::constant: return e.value;
    case Expr::variable: return env.lookup(e.name);
    case Expr::add: return eval_expr(*e.a, env) + eval_expr(*e.b, env);
    case Expr::sub: return eval_expr(*e.a, env) - eval_expr(*e.b, env);
    case Expr::mul: return eval_expr(*e.a, env) * eval_expr(*e.b, env);
    case Expr::divide: return eval_expr(*e.a, env) / eval_expr(*e.b, env);
    case Expr::neg: return -eval_expr(*e.a, env);
    case Expr::power: return std::pow(eval_expr(*e.a, env), eval_expr(*e.b, env));
    case Expr::exp_fn: return std::exp(eval_expr(*e.a, env));
    case Expr::ind_fn: return eval_expr(*e.a, env) >= 0.0 ? 1.0 : 0.0;
    case Expr::nq_fn: return normal_quantile(eval_expr(*e.a, env));
  }
  return 0.0;
}

namespace exprdetail {

struct Parser {
  const std::string& src;
  size_t pos = 0;

  explicit Parser(const std::string& s) : src(s) {}
  void skip() {
    while (pos < src.size() && std::isspace(static_cast<unsigned char>(src[pos])))
      ++pos;
  }
  bool eat(char c) {
    skip();
    if (pos < src.size() && src[pos] == c) {
      ++pos;
      return true;
    }
    return false;
  }
  [[noreturn]] void die(const std::string& msg) {
    fail(ErrorKind::dgp_spec, "expression parse error at position " +
                                  std::to_string(pos) + " in '" + src +
                                  "': " + msg);
  }
  ExprPtr make(Expr::Kind k, ExprPtr a = nullptr, ExprPtr b = nullptr) {
    auto e = std::make_shared<Expr>();
    e->kind = k;
    e->a = std::move(a);
    e->b = std::move(b);
    return e;
  }
  ExprPtr parse_expr() {
    ExprPtr lhs = parse_term();
    while (true) {
      if (eat('+')) lhs = make(Expr::add, lhs, parse_term());
      else if (eat('-')) lhs = make(Expr::sub, lhs, parse_term());
      else return lhs;
    }
  }
  ExprPtr parse_term() {
    ExprPtr lhs = parse_unary();
    while (true) {
      if (eat('*')) lhs = make(Expr::mul, lhs, parse_unary());
      else if (eat('/')) lhs = make(Expr::divide, lhs, parse_unary());
      else return lhs;
    }
  }
  ExprPtr parse_unary() {
    if (eat('-')) return make(Expr::neg, parse_unary());
    return parse_power();
  }
  ExprPtr parse_power() {
    ExprPtr base = parse_atom();
    if (eat('^')) {
      ExprPtr expo = parse_unary();
      return make(Expr::power, base, expo);
    }
    return base;
  }
  ExprPtr parse_atom() {
    skip();
    if (pos >= src.size()) die("unexpected end of input");
    char c = src[pos];
    if (c == '(') {
      ++pos;
      ExprPtr inner = parse_expr();
      if (!eat(')')) die("expected ')'");
      return inner;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      size_t start = pos;
      while (pos < src.size() &&
             (std::isdigit(static_cast<unsigned char>(src[pos])) ||
              src[pos] == '.' || src[pos] == 'e' || src[pos] == 'E' ||
              ((src[pos] == '+' || src[pos] == '-') && pos > start &&
               (src[pos - 1] == 'e' || src[pos - 1] == 'E'))))
        ++pos;
      auto e = std::make_shared<Expr>();
      e->kind = Expr::constant;
      e->value = std::stod(src.substr(start, pos - start));
      return e;
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      size_t start = pos;
      while (pos < src.size() &&
             (std::isalnum(static_cast<unsigned char>(src[pos])) || src[pos] == '_'))
        ++pos;
      std::string name = src.substr(start, pos - start);
      if (eat('(')) {
        ExprPtr arg = parse_expr();
        if (!eat(')')) die("expected ')' after function argument");
        if (name == "exp") return make(Expr::exp_fn, arg);
        if (name == "ind") return make(Expr::ind_fn, arg);
        if (name == "nq") return make(Expr::nq_fn, arg);
        die("unknown function '" + name + "'");
      }
      auto e = std::make_shared<Expr>();
      e->kind = Expr::variable;
      e->name = name;
      return e;
    }
    die(std::string("unexpected character '") + c + "'");
  }
};

}  // namespace exprdetail

inline ExprPtr parse_expr(const std::string& src) {
  exprdetail::Parser p(src);
  ExprPtr e = p.parse_expr();
  p.skip();
  if (p.pos != src.size()) p.die("trailing input");
  return e;
}

// ---------------------------------------------------------------------------
// DGP specification.

struct CovariateLaw {
  enum Kind { bernoulli, uniform, normal } kind = bernoulli;
  double a = 0.5, b = 0.0;
};

struct DgpSpec {
  std::string name = "custom";
  std::vector<std::string> first_stage;  // T_k(x, u), strictly increasing in u
  std::string outcome;                   // g(t, x, eps0..)
  std::vector<std::string> disturbances; // eps_j(w, nu0..)
  int n_nu = 1;
  std::string coupling = "invariant";    // invariant | similar | violated
  double similar_mix = 0.2;              // probability of a fresh rank draw
  std::vector<std::string> covariate_laws;  // bernoulli(p)|uniform(a,b)|normal(m,s)
  std::vector<std::string> arm_weights;  // optional propensity weights in x
  std::vector<double> arm_probabilities; // used when arm_weights is empty
  bool monotone = true;
  bool rank_similar = true;

  int arms() const { return static_cast<int>(first_stage.size()); }
  int d_x() const { return static_cast<int>(covariate_laws.size()); }
};

struct CompiledDgp {
  DgpSpec spec;
  std::vector<ExprPtr> first_stage;
  ExprPtr outcome;
  std::vector<ExprPtr> eps;
  std::vector<ExprPtr> arm_weights;
  std::vector<CovariateLaw> covariates;
  std::vector<double> arm_probs;  // empty when covariate-dependent
  enum Coupling { invariant, similar, violated } coupling = invariant;
};

namespace dgpdetail {

inline CovariateLaw parse_covariate_law(const std::string& s) {
  auto open = s.find('(');
  auto close = s.rfind(')');
  require(open != std::string::npos && close != std::string::npos && close > open,
          ErrorKind::dgp_spec, "bad covariate law '" + s + "'");
  std::string fn = s.substr(0, open);
  std::string args = s.substr(open + 1, close - open - 1);
  std::vector<double> vals;
  std::string cur;
  for (char c : args + ",") {
    if (c == ',') {
      if (!cur.empty()) vals.push_back(std::stod(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  CovariateLaw law;
  if (fn == "bernoulli") {
    require(vals.size() == 1, ErrorKind::dgp_spec, "bernoulli(p) takes 1 arg");
    law.kind = CovariateLaw::bernoulli;
    law.a = vals[0];
  } else if (fn == "uniform") {
    require(vals.size() == 2, ErrorKind::dgp_spec, "uniform(a,b) takes 2 args");
    law.kind = CovariateLaw::uniform;
    law.a = vals[0];
    law.b = vals[1];
  } else if (fn == "normal") {
    require(vals.size() == 2, ErrorKind::dgp_spec, "normal(m,s) takes 2 args");
    law.kind = CovariateLaw::normal;
    law.a = vals[0];
    law.b = vals[1];
  } else {
    fail(ErrorKind::dgp_spec, "unknown covariate law '" + fn + "'");
  }
  return law;
}

}  // namespace dgpdetail

inline CompiledDgp compile_dgp(const DgpSpec& spec) {
  require(spec.arms() >= 2, ErrorKind::dgp_spec,
          "a DGP needs at least two instrument arms");
  require(!spec.outcome.empty(), ErrorKind::dgp_spec, "missing outcome expression");
  CompiledDgp c;
  c.spec = spec;
  for (const auto& s : spec.first_stage) c.first_stage.push_back(parse_expr(s));
  c.outcome = parse_expr(spec.outcome);
  for (const auto& s : spec.disturbances) c.eps.push_back(parse_expr(s));
  require(!c.eps.empty(), ErrorKind::dgp_spec,
          "at least one disturbance expression required");
  for (const auto& s : spec.arm_weights) c.arm_weights.push_back(parse_expr(s));
  for (const auto& s : spec.covariate_laws)
    c.covariates.push_back(dgpdetail::parse_covariate_law(s));
  if (c.arm_weights.empty()) {
    if (spec.arm_probabilities.empty()) {
      c.arm_probs.assign(static_cast<size_t>(spec.arms()),
                         1.0 / static_cast<double>(spec.arms()));
    } else {
      require(static_cast<int>(spec.arm_probabilities.size()) == spec.arms(),
              ErrorKind::dgp_spec, "arm_probabilities size mismatch");
      double sum = 0.0;
      for (double p : spec.arm_probabilities) {
        require(p > 0.0, ErrorKind::dgp_spec, "arm probabilities must be positive");
        sum += p;
      }
      require(std::abs(sum - 1.0) < 1e-9, ErrorKind::dgp_spec,
              "arm probabilities must sum to 1");
      c.arm_probs = spec.arm_probabilities;
    }
  } else {
    require(static_cast<int>(c.arm_weights.size()) == spec.arms(),
            ErrorKind::dgp_spec, "arm_weights size mismatch");
  }
  if (spec.coupling == "invariant") c.coupling = CompiledDgp::invariant;
  else if (spec.coupling == "similar") c.coupling = CompiledDgp::similar;
  else if (spec.coupling == "violated") c.coupling = CompiledDgp::violated;
  else fail(ErrorKind::dgp_spec, "unknown coupling mode '" + spec.coupling + "'");

  // Probe: every arm's treatment function must be strictly increasing in u.
  Rng probe_rng(0xD61Fu);
  const int n_probe_x = c.covariates.empty() ? 1 : 100;
  std::vector<double> x(c.covariates.size(), 0.0);
  for (int px = 0; px < n_probe_x; ++px) {
    for (size_t j = 0; j < c.covariates.size(); ++j) {
      const auto& law = c.covariates[j];
      switch (law.kind) {
        case CovariateLaw::bernoulli: x[j] = probe_rng.uniform() < law.a ? 1.0 : 0.0; break;
        case CovariateLaw::uniform: x[j] = probe_rng.uniform(law.a, law.b); break;
        case CovariateLaw::normal: x[j] = law.a + law.b * probe_rng.normal(); break;
      }
    }
    for (int k = 0; k < spec.arms(); ++k) {
      double prev = -std::numeric_limits<double>::infinity();
      for (int g = 0; g < 1000; ++g) {
        EvalEnv env;
        env.u = (static_cast<double>(g) + 0.5) / 1000.0;
        env.x = x.data();
        env.dx = static_cast<int>(x.size());
        double t = eval_expr(*c.first_stage[static_cast<size_t>(k)], env);
        require(std::isfinite(t), ErrorKind::dgp_spec,
                "treatment quantile function not finite");
        require(t > prev, ErrorKind::dgp_spec,
                "treatment quantile function of arm " + std::to_string(k) +
                    " is not strictly increasing in u");
        prev = t;
      }
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Generation.

namespace dgpdetail {

struct Draw {
  std::vector<double> x;
  int arm = 0;
  double w = 0.0;
  std::vector<double> nu;
  std::vector<double> eps;
  std::vector<double> ranks;  // U_k for every arm
};

// Fixed RNG consumption order regardless of branch outcomes.
inline Draw draw_one(const CompiledDgp& c, Rng& rng, int forced_arm) {
  Draw d;
  d.x.resize(c.covariates.size());
  for (size_t j = 0; j < c.covariates.size(); ++j) {
    const auto& law = c.covariates[j];
    double u = rng.uniform();
    switch (law.kind) {
      case CovariateLaw::bernoulli: d.x[j] = u < law.a ? 1.0 : 0.0; break;
      case CovariateLaw::uniform: d.x[j] = law.a + (law.b - law.a) * u; break;
      case CovariateLaw::normal: d.x[j] = law.a + law.b * normal_quantile(u); break;
    }
  }
  const int arms = c.spec.arms();
  double arm_u = rng.uniform();
  if (!c.arm_weights.empty()) {
    std::vector<double> wts(static_cast<size_t>(arms));
    double total = 0.0;
    EvalEnv env;
    env.x = d.x.data();
    env.dx = static_cast<int>(d.x.size());
    for (int k = 0; k < arms; ++k) {
      double wk = eval_expr(*c.arm_weights[static_cast<size_t>(k)], env);
      require(wk > 0.0 && std::isfinite(wk), ErrorKind::dgp_spec,
              "arm weight must be positive and finite");
      wts[static_cast<size_t>(k)] = wk;
      total += wk;
    }
    double acc = 0.0;
    d.arm = arms - 1;
    for (int k = 0; k < arms; ++k) {
      acc += wts[static_cast<size_t>(k)] / total;
      if (arm_u <= acc) {
        d.arm = k;
        break;
      }
    }
  } else {
    double acc = 0.0;
    d.arm = arms - 1;
    for (int k = 0; k < arms; ++k) {
      acc += c.arm_probs[static_cast<size_t>(k)];
      if (arm_u <= acc) {
        d.arm = k;
        break;
      }
    }
  }
  if (forced_arm >= 0) d.arm = forced_arm;

  d.w = rng.uniform();
  d.nu.resize(static_cast<size_t>(c.spec.n_nu));
  for (auto& v : d.nu) v = rng.normal();
  d.eps.resize(c.eps.size());
  {
    EvalEnv env;
    env.w = d.w;
    env.nu = d.nu.data();
    env.nnu = static_cast<int>(d.nu.size());
    env.x = d.x.data();
    env.dx = static_cast<int>(d.x.size());
    for (size_t j = 0; j < c.eps.size(); ++j) d.eps[j] = eval_expr(*c.eps[j], env);
  }
  // coupling draws, always consumed: one mix + one fresh uniform per arm
  d.ranks.resize(static_cast<size_t>(arms));
  for (int k = 0; k < arms; ++k) {
    double mix = rng.uniform();
    double fresh = rng.uniform();
    switch (c.coupling) {
      case CompiledDgp::invariant:
        d.ranks[static_cast<size_t>(k)] = d.w;
        break;
      case CompiledDgp::similar:
        d.ranks[static_cast<size_t>(k)] =
            mix < c.spec.similar_mix ? fresh : d.w;
        break;
      case CompiledDgp::violated:
        d.ranks[static_cast<size_t>(k)] =
            (k >= 1 && d.eps[0] > 0.0) ? 1.0 - d.w : d.w;
        break;
    }
  }
  return d;
}

inline double treatment_of(const CompiledDgp& c, const Draw& d, int arm) {
  EvalEnv env;
  env.u = d.ranks[static_cast<size_t>(arm)];
  env.x = d.x.data();
  env.dx = static_cast<int>(d.x.size());
  return eval_expr(*c.first_stage[static_cast<size_t>(arm)], env);
}

inline double outcome_of(const CompiledDgp& c, const Draw& d, double t) {
  EvalEnv env;
  env.t = t;
  env.x = d.x.data();
  env.dx = static_cast<int>(d.x.size());
  env.eps = d.eps.data();
  env.neps = static_cast<int>(d.eps.size());
  return eval_expr(*c.outcome, env);
}

}  // namespace dgpdetail

// `forced_arm` pins every observation's instrument while keeping all other
// draws identical to the unforced run with the same seed (a test hook for
// potential-treatment comparisons).
inline Dataset generate(const CompiledDgp& c, int n, uint64_t seed,
                        int forced_arm = -1) {
  require(n >= 1, ErrorKind::config, "generate needs n >= 1");
  Dataset d;
  d.n = n;
  d.d_x = c.spec.d_x();
  d.K = c.spec.arms() - 1;
  d.outcome.resize(n);
  d.treatment.resize(n);
  d.covariates.resize(n, d.d_x);
  d.instrument.resize(static_cast<size_t>(n));
  Rng rng = Rng::stream(seed, 0x6E6572617465ULL);
  for (int i = 0; i < n; ++i) {
    auto draw = dgpdetail::draw_one(c, rng, forced_arm);
    double t = dgpdetail::treatment_of(c, draw, draw.arm);
    double y = dgpdetail::outcome_of(c, draw, t);
    d.outcome(i) = y;
    d.treatment(i) = t;
    for (int j = 0; j < d.d_x; ++j) d.covariates(i, j) = draw.x[static_cast<size_t>(j)];
    d.instrument[static_cast<size_t>(i)] = draw.arm;
  }
  for (int k = 0; k <= d.K; ++k)
    d.instrument_labels[k] = std::to_string(k);
  for (int k = 0; k <= d.K && forced_arm < 0; ++k) {
    require(d.cell_count(k) > 0, ErrorKind::support,
            "generated dataset has an empty instrument cell " + std::to_string(k) +
                "; increase n");
  }
  for (int j = 0; j < d.d_x; ++j)
    d.covariate_names.push_back("x" + std::to_string(j));
  return d;
}

inline Dataset generate(const DgpSpec& spec, int n, uint64_t seed,
                        int forced_arm = -1) {
  return generate(compile_dgp(spec), n, seed, forced_arm);
}

// ---------------------------------------------------------------------------
// Restriction verification.

struct RestrictionCheck {
  bool monotone_holds = true;
  bool rank_similar_holds = true;
};

inline RestrictionCheck verify_restrictions(const CompiledDgp& c,
                                            int probe_size = 20000) {
  RestrictionCheck out;
  out.rank_similar_holds = c.coupling != CompiledDgp::violated;
  Rng rng(0x9eC7u);
  const int arms = c.spec.arms();
  for (int s = 0; s < probe_size && out.monotone_holds; ++s) {
    auto draw = dgpdetail::draw_one(c, rng, -1);
    for (int k = 1; k < arms; ++k) {
      double t_hi = dgpdetail::treatment_of(c, draw, k);
      double t_lo = dgpdetail::treatment_of(c, draw, k - 1);
      if (t_hi < t_lo - 1e-12) {
        out.monotone_holds = false;
        break;
      }
    }
  }
  return out;
}

inline RestrictionCheck verify_restrictions_checked(const CompiledDgp& c,
                                                    int probe_size = 20000) {
  RestrictionCheck out = verify_restrictions(c, probe_size);
  require(out.monotone_holds == c.spec.monotone,
          ErrorKind::dgp_spec,
          "declared monotonicity flag disagrees with probe result");
  require(out.rank_similar_holds == c.spec.rank_similar,
          ErrorKind::dgp_spec,
          "declared rank-similarity flag disagrees with the coupling mode");
  return out;
}

}  // namespace driv
