// Shared infrastructure: error taxonomy, scalar normal functions, deterministic
// RNG streams, order statistics, and a small index-deterministic parallel_for.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace driv {

enum class ErrorKind {
  schema,
  parse,
  support,
  singular_design,
  convergence,
  grid,
  extrapolation,
  sample_size,
  weak_first_stage,
  weak_multi_first_stage,
  all_trimmed,
  empty_sign_set,
  bootstrap_unstable,
  dgp_spec,
  resolution,
  config,
};

inline const char* error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::schema: return "schema";
    case ErrorKind::parse: return "parse";
    case ErrorKind::support: return "support";
    case ErrorKind::singular_design: return "singular_design";
    case ErrorKind::convergence: return "convergence";
    case ErrorKind::grid: return "grid";
    case ErrorKind::extrapolation: return "extrapolation";
    case ErrorKind::sample_size: return "sample_size";
    case ErrorKind::weak_first_stage: return "weak_first_stage";
    case ErrorKind::weak_multi_first_stage: return "weak_multi_first_stage";
    case ErrorKind::all_trimmed: return "all_trimmed";
    case ErrorKind::empty_sign_set: return "empty_sign_set";
    case ErrorKind::bootstrap_unstable: return "bootstrap_unstable";
    case ErrorKind::dgp_spec: return "dgp_spec";
    case ErrorKind::resolution: return "resolution";
    case ErrorKind::config: return "config";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(std::string(error_kind_name(kind)) + ": " + msg),
        kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) fail(kind, msg);
}

// ---------------------------------------------------------------------------
// Normal distribution scalars.

inline double normal_pdf(double x) {
  static const double inv_sqrt_2pi = 0.3989422804014326779;
  return inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline double normal_cdf(double x) {
  return 0.5 * std::erfc(-x * 0.7071067811865475244);
}

// Acklam's rational approximation with one Halley refinement; good to
// ~1e-15 relative over (0,1).
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    if (p == 0.0) return -std::numeric_limits<double>::infinity();
    if (p == 1.0) return std::numeric_limits<double>::infinity();
    fail(ErrorKind::config, "normal_quantile: p outside [0,1]");
  }
  static const double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                              -2.759285104469687e+02, 1.383577518672690e+02,
                              -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                              -1.556989798598866e+02, 6.680131188771972e+01,
                              -1.328068155288572e+01};
  static const double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                              -2.400758277161838e+00, -2.549732539343734e+00,
                              4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                              2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    double q = p - 0.5;
    double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) *
        q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  double e = normal_cdf(x) - p;
  double u = e * std::sqrt(2.0 * M_PI) * std::exp(0.5 * x * x);
  x = x - u / (1.0 + 0.5 * x * u);
  return x;
}

// ---------------------------------------------------------------------------
// Simple statistics.

inline double mean(const std::vector<double>& x) {
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

inline double sample_sd(const std::vector<double>& x) {
  const size_t n = x.size();
  if (n < 2) return 0.0;
  double m = mean(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(n - 1));
}

// Type-7 quantile of an already sorted vector.
inline double quantile_sorted(const std::vector<double>& x, double p) {
  if (x.empty()) return std::numeric_limits<double>::quiet_NaN();
  if (x.size() == 1) return x[0];
  double h = p * static_cast<double>(x.size() - 1);
  size_t lo = static_cast<size_t>(std::floor(h));
  if (lo >= x.size() - 1) return x.back();
  double frac = h - static_cast<double>(lo);
  return x[lo] + frac * (x[lo + 1] - x[lo]);
}

inline double quantile_of(std::vector<double> x, double p) {
  std::sort(x.begin(), x.end());
  return quantile_sorted(x, p);
}

inline double iqr_of(const std::vector<double>& x) {
  std::vector<double> s(x);
  std::sort(s.begin(), s.end());
  return quantile_sorted(s, 0.75) - quantile_sorted(s, 0.25);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. All draws are derived from explicit (seed, index) pairs
// so serial and parallel execution produce identical results.

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t seed, uint64_t index) {
  uint64_t s = seed ^ (0x9e3779b97f4a7c15ULL + index * 0xbf58476d1ce4e5b9ULL);
  splitmix64(s);
  return splitmix64(s) ^ index;
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {
    // burn-in decorrelates adjacent seeds
    splitmix64(state_);
    splitmix64(state_);
  }
  static Rng stream(uint64_t seed, uint64_t index) {
    return Rng(mix_seed(seed, index));
  }
  uint64_t next_u64() { return splitmix64(state_); }
  // strictly inside (0,1)
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() { return normal_quantile(uniform()); }
  int categorical(const std::vector<double>& probs) {
    double u = uniform();
    double acc = 0.0;
    for (size_t k = 0; k < probs.size(); ++k) {
      acc += probs[k];
      if (u <= acc) return static_cast<int>(k);
    }
    return static_cast<int>(probs.size()) - 1;
  }

 private:
  uint64_t state_;
};

// Radical-inverse (Halton) sequence for quasi-random integration.
inline double halton(uint64_t index, uint64_t base) {
  double f = 1.0, r = 0.0;
  uint64_t i = index;
  while (i > 0) {
    f /= static_cast<double>(base);
    r += f * static_cast<double>(i % base);
    i /= base;
  }
  return r;
}

inline std::vector<double> halton_point(uint64_t index, int dims) {
  static const uint64_t primes[16] = {2,  3,  5,  7,  11, 13, 17, 19,
                                      23, 29, 31, 37, 41, 43, 47, 53};
  std::vector<double> p(static_cast<size_t>(dims));
  for (int d = 0; d < dims; ++d) {
    double h = halton(index + 1, primes[d % 16]);
    p[static_cast<size_t>(d)] = std::min(std::max(h, 1e-12), 1.0 - 1e-12);
  }
  return p;
}

// ---------------------------------------------------------------------------
// parallel_for: runs fn(i) for i in [0, count). Work is partitioned by index,
// results must be written to per-index slots by the caller. The first thrown
// exception (by index order) is rethrown so failures are deterministic too.

inline void parallel_for(size_t count, int workers,
                         const std::function<void(size_t)>& fn) {
  if (count == 0) return;
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  if (workers <= 0) workers = hw;
  workers = std::min<int>(workers, static_cast<int>(count));
  if (workers <= 1) {
    for (size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  std::atomic<size_t> cursor{0};
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      while (true) {
        size_t i = cursor.fetch_add(1);
        if (i >= count) break;
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (size_t i = 0; i < count; ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
  }
}

}  // namespace driv
