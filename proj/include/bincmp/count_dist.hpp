#pragma once

// Abundance distributions f(n | lambda, nu) behind one interface. lambda is the
// intensity for every family; nu is the CMP dispersion or the negative binomial
// size (Var = lambda + lambda^2 / nu). Poisson ignores nu.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <string_view>

#include "bincmp/cmp.hpp"
#include "bincmp/error.hpp"
#include "bincmp/numeric.hpp"

namespace bincmp {

enum class Family { cmp, poisson, negative_binomial };

inline std::string_view to_string(Family f) {
  switch (f) {
    case Family::cmp: return "cmp";
    case Family::poisson: return "poisson";
    case Family::negative_binomial: return "negative-binomial";
  }
  return "cmp";
}

inline Family parse_family(std::string_view text) {
  if (text == "cmp") return Family::cmp;
  if (text == "poisson") return Family::poisson;
  if (text == "negative-binomial" || text == "nb") return Family::negative_binomial;
  fail(ErrorKind::config_error, "unknown abundance family '" + std::string(text) + "'");
}

/// A fully parameterized abundance pmf with its normalizer evaluated once.
class AbundancePmf {
 public:
  AbundancePmf(Family family, double lambda, double nu, double rel_tol = kDefaultZRelTol,
               const ZPolicy& policy = {})
      : family_(family), lambda_(lambda), nu_(nu), log_lambda_(std::log(lambda)) {
    require(std::isfinite(lambda) && lambda > 0.0, ErrorKind::invalid_parameter, "intensity must be positive");
    switch (family) {
      case Family::cmp: {
        const CmpParams params(lambda, nu);
        z_ = log_z(params, rel_tol, policy);
        log_norm_ = z_.log_z;
        break;
      }
      case Family::poisson:
        nu_ = 1.0;
        log_norm_ = lambda;
        break;
      case Family::negative_binomial:
        require(std::isfinite(nu) && nu > 0.0, ErrorKind::invalid_parameter,
                "negative binomial size must be positive");
        q_ = lambda / (lambda + nu);
        log_q_ = std::log(q_);
        log_gamma_nu_ = log_gamma(nu);
        log_norm_ = -nu * std::log(nu / (nu + lambda));
        break;
    }
  }

  /// Builds from a precomputed CMP normalizer; pw, if given, must hold powers for nu.
  AbundancePmf(double lambda, double nu, const ZEvaluation& z, std::shared_ptr<const NuPowers> pw = nullptr)
      : family_(Family::cmp),
        lambda_(lambda),
        nu_(nu),
        log_lambda_(std::log(lambda)),
        z_(z),
        log_norm_(z.log_z),
        pw_(std::move(pw)) {}

  Family family() const { return family_; }
  double lambda() const { return lambda_; }
  double nu() const { return nu_; }
  double log_normalizer() const { return log_norm_; }
  const ZEvaluation& z() const { return z_; }

  /// Unnormalized log mass; log f(n) = log_term(n) - log_normalizer().
  double log_term(double n) const {
    switch (family_) {
      case Family::cmp: return n * log_lambda_ - nu_ * log_factorial(n);
      case Family::poisson: return n * log_lambda_ - log_factorial(n);
      case Family::negative_binomial: return log_gamma(n + nu_) - log_gamma_nu_ - log_factorial(n) + n * log_q_;
    }
    return kNaN;
  }

  double log_pmf(double n) const { return log_term(n) - log_norm_; }

  /// log f(n+1)/f(n).
  double log_ratio(double n) const {
    switch (family_) {
      case Family::cmp: return log_lambda_ - nu_ * log_int(n + 1.0);
      case Family::poisson: return log_lambda_ - log_int(n + 1.0);
      case Family::negative_binomial: return std::log((n + nu_) / (n + 1.0)) + log_q_;
    }
    return kNaN;
  }

  /// f(n+1)/f(n) in linear space.
  double ratio(double n) const {
    switch (family_) {
      case Family::cmp: return lambda_ * (pw_ ? (*pw_)(n + 1.0) : std::exp(-nu_ * log_int(n + 1.0)));
      case Family::poisson: return lambda_ / (n + 1.0);
      case Family::negative_binomial: return q_ * (n + nu_) / (n + 1.0);
    }
    return kNaN;
  }

  /// Upper bound on f(k+1)/f(k) over all k >= n, given r = ratio(n).
  double ratio_bound(double n, double r) const {
    if (family_ == Family::negative_binomial) return q_ * std::max(1.0, (n + nu_) / (n + 1.0));
    return r;
  }

  /// Upper bound on log f(k+1)/f(k) over all k >= n.
  double log_ratio_bound(double n) const {
    if (family_ == Family::negative_binomial) {
      return log_q_ + std::max(0.0, std::log((n + nu_) / (n + 1.0)));
    }
    return log_ratio(n);
  }

  /// Mass strictly above n, certified to a relative error well below 1e-3.
  double upper_tail(double n) const {
    if (log_ratio_bound(n + 1.0) < 0.0) {
      CompensatedSum tail;
      double log_p = log_pmf(n + 1.0);
      for (double k = n + 1.0;; k += 1.0) {
        const double p = std::exp(log_p);
        tail.add(p);
        const double lr = log_ratio_bound(k);
        if (lr < 0.0) {
          const double r = std::exp(lr);
          if (p * r / (1.0 - r) <= 1e-6 * tail.value()) break;
        }
        log_p += log_ratio(k);
        if (log_p == kNegInf) break;
      }
      return tail.value();
    }
    CompensatedSum below;
    for (double k = 0.0; k <= n; k += 1.0) below.add(std::exp(log_pmf(k)));
    return std::max(0.0, 1.0 - below.value());
  }

 private:
  Family family_;
  double lambda_;
  double nu_;
  double log_lambda_;
  double q_ = 0.0;
  double log_q_ = 0.0;
  double log_gamma_nu_ = 0.0;
  ZEvaluation z_{};
  double log_norm_ = 0.0;
  std::shared_ptr<const NuPowers> pw_;
};

inline double abundance_log_pmf(Family family, std::int64_t n, double lambda, double nu) {
  require(n >= 0, ErrorKind::invalid_parameter, "abundance must be nonnegative");
  return AbundancePmf(family, lambda, nu).log_pmf(static_cast<double>(n));
}

/// Smallest U with P(N > U) < tail_mass: doubling search for an upper candidate, then bisection.
inline std::int64_t abundance_support_bound(const AbundancePmf& pmf, double tail_mass) {
  require(tail_mass > 0.0 && tail_mass < 1.0, ErrorKind::invalid_parameter, "tail_mass must lie in (0, 1)");
  if (pmf.upper_tail(0.0) < tail_mass) return 0;
  std::int64_t lo = 0;  // tail(lo) >= tail_mass
  std::int64_t hi = 1;
  while (pmf.upper_tail(static_cast<double>(hi)) >= tail_mass) {
    lo = hi;
    hi *= 2;
    require(hi < (std::int64_t{1} << 40), ErrorKind::truncation_cap, "support bound search diverged");
  }
  while (hi - lo > 1) {
    const std::int64_t mid = lo + (hi - lo) / 2;
    if (pmf.upper_tail(static_cast<double>(mid)) < tail_mass) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return hi;
}

inline std::int64_t abundance_support_bound(Family family, double lambda, double nu, double tail_mass) {
  return abundance_support_bound(AbundancePmf(family, lambda, nu), tail_mass);
}

/// Inverse-CDF draw from a single uniform so that equal pmfs give equal draws.
template <class Rng>
std::int64_t sample_abundance(const AbundancePmf& pmf, Rng& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double cdf = 0.0;
  double log_p = pmf.log_pmf(0.0);
  for (std::int64_t n = 0;; ++n) {
    const double p = std::exp(log_p);
    cdf += p;
    if (u <= cdf) return n;
    const double lr = pmf.log_ratio_bound(static_cast<double>(n));
    if (lr < 0.0) {
      const double r = std::exp(lr);
      if (p * r / (1.0 - r) < 1e-12) return n;
    }
    log_p = pmf.log_pmf(static_cast<double>(n + 1));
    require(n < (std::int64_t{1} << 36), ErrorKind::truncation_cap, "abundance inversion did not terminate");
  }
}

}  // namespace bincmp
