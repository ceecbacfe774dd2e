#pragma once

// Conway-Maxwell Poisson distribution: P(X = x) = lambda^x / (x!)^nu / Z(lambda, nu).

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <mutex>
#include <numbers>
#include <random>
#include <shared_mutex>
#include <sstream>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bincmp/error.hpp"
#include "bincmp/numeric.hpp"

namespace bincmp {

inline constexpr double kDefaultZRelTol = 1e-14;
inline constexpr std::size_t kMaxSeriesTerms = 1'000'000;

class CmpParams {
 public:
  CmpParams(double lambda, double nu) : lambda_(lambda), nu_(nu) {
    require(std::isfinite(lambda) && lambda > 0.0, ErrorKind::invalid_parameter,
            "CMP intensity must be positive and finite");
    require(std::isfinite(nu) && nu >= 0.0, ErrorKind::invalid_parameter,
            "CMP dispersion must be nonnegative and finite");
    if (nu == 0.0 && lambda >= 1.0) {
      std::ostringstream msg;
      msg << "Z(lambda=" << lambda << ", nu=0) diverges; nu = 0 requires lambda < 1";
      fail(ErrorKind::divergent_series, msg.str());
    }
  }

  double lambda() const { return lambda_; }
  double nu() const { return nu_; }

 private:
  double lambda_;
  double nu_;
};

/// n^(-nu) for n >= 1, tabulated for small n. Table entries and the direct
/// branch use the same expression, so results do not depend on the table size.
class NuPowers {
 public:
  explicit NuPowers(double nu, std::size_t size = 0) : nu_(nu), table_(size) {
    for (std::size_t n = 1; n < size; ++n) table_[n] = direct(static_cast<double>(n));
  }

  double nu() const { return nu_; }

  double operator()(double n) const {
    if (n < static_cast<double>(table_.size())) return table_[static_cast<std::size_t>(n)];
    return direct(n);
  }

 private:
  double direct(double n) const { return std::exp(-nu_ * log_int(n)); }

  double nu_;
  std::vector<double> table_;
};

enum class ZMethod { truncated_series, asymptotic };

struct ZPolicy {
  /// Use the asymptotic expansion when lambda > 10^nu. Off unless requested.
  bool allow_asymptotic = false;
  std::size_t max_terms = kMaxSeriesTerms;
};

struct ZEvaluation {
  double log_z = kNaN;
  std::size_t terms_used = 0;
  ZMethod method = ZMethod::truncated_series;
  /// Certified bound on the relative truncation error (infinite for the asymptotic path).
  double tail_bound = kInf;
};

namespace detail {

inline double cmp_mode(double log_lambda, double nu, std::size_t max_terms) {
  if (nu == 0.0) return 0.0;
  const double log_mode = log_lambda / nu;
  if (log_mode > std::log(1e15)) {
    std::ostringstream msg;
    msg << "series mode exp(" << log_mode << ") is beyond " << max_terms << " terms";
    fail(ErrorKind::truncation_cap, msg.str());
  }
  return std::max(0.0, std::floor(std::exp(log_mode)));
}

inline void check_cap(std::size_t terms, const ZPolicy& policy, const CmpParams& p) {
  if (terms > policy.max_terms) {
    std::ostringstream msg;
    msg << "Z(lambda=" << p.lambda() << ", nu=" << p.nu() << ") needs more than " << policy.max_terms
        << " series terms";
    fail(ErrorKind::truncation_cap, msg.str());
  }
}

inline ZEvaluation log_z_asymptotic(const CmpParams& p) {
  const double nu = p.nu();
  const double log_lambda = std::log(p.lambda());
  const double x = nu * std::exp(log_lambda / nu);
  const double c1 = (nu * nu - 1.0) / 24.0;
  const double c2 = (nu * nu - 1.0) * (nu * nu + 23.0) / 1152.0;
  const double correction = std::log1p(c1 / x + c2 / (x * x));
  ZEvaluation out;
  out.log_z = x - (nu - 1.0) / (2.0 * nu) * log_lambda -
              (nu - 1.0) / 2.0 * std::log(2.0 * std::numbers::pi) - 0.5 * std::log(nu) + correction;
  out.method = ZMethod::asymptotic;
  out.terms_used = 0;
  out.tail_bound = kInf;
  return out;
}

// Sums outward from the mode in linear space relative to the mode term. Terms
// to the right shrink by ratio lambda/(j+1)^nu, terms to the left by
// j^nu/lambda; both ratios are monotone, so each remaining tail is bounded by a
// geometric series.
inline ZEvaluation log_z_series(const CmpParams& p, double rel_tol, const ZPolicy& policy, const NuPowers& pw) {
  const double nu = p.nu();
  const double lambda = p.lambda();
  const double log_lambda = std::log(lambda);
  const double mode = cmp_mode(log_lambda, nu, policy.max_terms);
  const long double log_mode_term = static_cast<long double>(mode) * static_cast<long double>(log_lambda) -
                                    static_cast<long double>(nu) * log_factorial_extended(mode);

  CompensatedSum sum;
  sum.add(1.0);
  std::size_t terms = 1;

  double right_tail = 0.0;
  double t = 1.0;
  double j = mode;
  for (;;) {
    const double r = lambda * pw(j + 1.0);
    if (r < 1.0) {
      const double tail = t * r / (1.0 - r);
      if (tail <= 0.5 * rel_tol * sum.value()) {
        right_tail = tail;
        break;
      }
    }
    t *= r;
    j += 1.0;
    sum.add(t);
    check_cap(++terms, policy, p);
  }

  double left_tail = 0.0;
  t = 1.0;
  j = mode;
  while (j > 0.0) {
    const double q = 1.0 / (lambda * pw(j));
    const double factor = q < 1.0 ? std::min(q / (1.0 - q), j) : j;
    const double tail = t * factor;
    if (tail <= 0.5 * rel_tol * sum.value()) {
      left_tail = tail;
      break;
    }
    t *= q;
    j -= 1.0;
    sum.add(t);
    check_cap(++terms, policy, p);
  }

  const double total = sum.value();
  ZEvaluation out;
  out.log_z = static_cast<double>(log_mode_term + static_cast<long double>(std::log(total)));
  out.terms_used = terms;
  out.method = ZMethod::truncated_series;
  out.tail_bound = (right_tail + left_tail) / total;
  return out;
}

}  // namespace detail

/// log Z(lambda, nu) with certified relative truncation error below rel_tol on the series path.
/// pw must hold powers for params.nu().
inline ZEvaluation log_z(const CmpParams& params, double rel_tol, const ZPolicy& policy, const NuPowers& pw) {
  require(rel_tol > 0.0 && rel_tol < 1.0, ErrorKind::invalid_parameter, "rel_tol must lie in (0, 1)");
  ZEvaluation out;
  if (policy.allow_asymptotic && params.nu() > 0.0 && params.lambda() > std::pow(10.0, params.nu())) {
    out = detail::log_z_asymptotic(params);
  } else {
    out = detail::log_z_series(params, rel_tol, policy, pw);
  }
  if (!std::isfinite(out.log_z)) {
    std::ostringstream msg;
    msg << "log Z(lambda=" << params.lambda() << ", nu=" << params.nu() << ") is not finite";
    fail(ErrorKind::non_finite, msg.str());
  }
  return out;
}

inline ZEvaluation log_z(const CmpParams& params, double rel_tol = kDefaultZRelTol, const ZPolicy& policy = {}) {
  return log_z(params, rel_tol, policy, NuPowers(params.nu()));
}

/// Unnormalized log term x log(lambda) - nu log(x!).
inline double cmp_log_term(double x, const CmpParams& params) {
  const long double value = static_cast<long double>(x) * std::log(static_cast<long double>(params.lambda())) -
                            static_cast<long double>(params.nu()) * log_factorial_extended(x);
  return static_cast<double>(value);
}

inline double log_pmf(double x, const CmpParams& params, const ZEvaluation& z) {
  const long double value = static_cast<long double>(x) * std::log(static_cast<long double>(params.lambda())) -
                            static_cast<long double>(params.nu()) * log_factorial_extended(x) -
                            static_cast<long double>(z.log_z);
  return static_cast<double>(value);
}

inline double log_pmf(double x, const CmpParams& params, double rel_tol = kDefaultZRelTol,
                      const ZPolicy& policy = {}) {
  require(x >= 0.0 && std::floor(x) == x, ErrorKind::invalid_parameter, "CMP support is the nonnegative integers");
  return log_pmf(x, params, log_z(params, rel_tol, policy));
}

struct SupportInterval {
  double lower = 0.0;
  double upper = 0.0;
};

/// Smallest interval around the mode whose complement carries less than tail_mass.
inline SupportInterval cmp_support(const CmpParams& params, const ZEvaluation& z, double tail_mass,
                                   const ZPolicy& policy = {}) {
  const double nu = params.nu();
  const double log_lambda = std::log(params.lambda());
  const double mode = detail::cmp_mode(log_lambda, nu, policy.max_terms);
  const double log_p_mode = log_pmf(mode, params, z);
  SupportInterval out{mode, mode};
  std::size_t terms = 1;

  double d = log_p_mode;
  double j = mode;
  for (;;) {
    const double log_r = log_lambda - nu * log_int(j + 1.0);
    if (log_r < 0.0) {
      const double r = std::exp(log_r);
      if (std::exp(d) * r / (1.0 - r) < 0.5 * tail_mass) break;
    }
    d += log_r;
    j += 1.0;
    detail::check_cap(++terms, policy, params);
  }
  out.upper = j;

  d = log_p_mode;
  j = mode;
  while (j > 0.0) {
    const double log_q = nu * log_int(j) - log_lambda;
    const double q = std::exp(log_q);
    const double factor = q < 1.0 ? std::min(q / (1.0 - q), j) : j;
    if (std::exp(d) * factor < 0.5 * tail_mass) break;
    d += log_q;
    j -= 1.0;
    detail::check_cap(++terms, policy, params);
  }
  out.lower = j;
  return out;
}

/// Exact draw by inversion; the omitted upper tail carries less than 1e-12.
template <class Rng>
std::int64_t sample(const CmpParams& params, Rng& rng, const ZPolicy& policy = {}) {
  const ZEvaluation z = log_z(params, kDefaultZRelTol, policy);
  const double log_lambda = std::log(params.lambda());
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double cdf = 0.0;
  for (std::int64_t x = 0;; ++x) {
    const double log_p = log_pmf(static_cast<double>(x), params, z);
    const double p = std::exp(log_p);
    cdf += p;
    if (u <= cdf) return x;
    const double log_r = log_lambda - params.nu() * log_int(static_cast<double>(x) + 1.0);
    if (log_r < 0.0) {
      const double r = std::exp(log_r);
      if (p * r / (1.0 - r) < 1e-12) return x;
    }
    if (static_cast<std::size_t>(x) > policy.max_terms * 64) {
      fail(ErrorKind::truncation_cap, "CMP inversion did not terminate");
    }
  }
}

struct Moments {
  double mean = 0.0;
  double variance = 0.0;
};

/// Mean and variance by direct summation over the support (tail mass < 1e-16).
inline Moments mean_var(const CmpParams& params, const ZPolicy& policy = {}) {
  const ZEvaluation z = log_z(params, kDefaultZRelTol, policy);
  const SupportInterval support = cmp_support(params, z, 1e-16, policy);
  CompensatedSum mass;
  CompensatedSum first;
  for (double x = support.lower; x <= support.upper; x += 1.0) {
    const double p = std::exp(log_pmf(x, params, z));
    mass.add(p);
    first.add(x * p);
  }
  const double mean = first.value() / mass.value();
  CompensatedSum second;
  for (double x = support.lower; x <= support.upper; x += 1.0) {
    const double p = std::exp(log_pmf(x, params, z));
    second.add((x - mean) * (x - mean) * p);
  }
  return {mean, second.value() / mass.value()};
}

/// Optional memo for Z evaluations. Lookups take a shared lock; inserts an exclusive one.
class ZCache {
 public:
  explicit ZCache(double rel_tol = kDefaultZRelTol, ZPolicy policy = {}) : rel_tol_(rel_tol), policy_(policy) {}

  ZEvaluation get(const CmpParams& params) {
    const Key key{std::bit_cast<std::uint64_t>(params.lambda()), std::bit_cast<std::uint64_t>(params.nu())};
    {
      std::shared_lock lock(mutex_);
      if (auto it = entries_.find(key); it != entries_.end()) return it->second;
    }
    const ZEvaluation value = log_z(params, rel_tol_, policy_);
    std::unique_lock lock(mutex_);
    entries_.emplace(key, value);
    return value;
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
  }

 private:
  struct Key {
    std::uint64_t lambda_bits;
    std::uint64_t nu_bits;
    bool operator==(const Key&) const = default;
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const noexcept {
      return std::hash<std::uint64_t>()(k.lambda_bits * 0x9E3779B97F4A7C15ULL ^ k.nu_bits);
    }
  };

  double rel_tol_;
  ZPolicy policy_;
  mutable std::shared_mutex mutex_;
  std::unordered_map<Key, ZEvaluation, KeyHash> entries_;
};

}  // namespace bincmp
