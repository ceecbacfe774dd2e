#pragma once

#include <charconv>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <system_error>
#include <vector>

namespace bincmp {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// Reentrant log-gamma. std::lgamma writes the global signgam on glibc.
inline double log_gamma(double x) {
#if defined(__GLIBC__)
  int sign = 0;
  return ::lgamma_r(x, &sign);
#else
  return std::lgamma(x);
#endif
}

namespace detail {

inline constexpr std::size_t kTableSize = 1u << 16;

struct IntegerLogTables {
  std::vector<double> log_factorial;
  std::vector<double> log_int;

  IntegerLogTables() : log_factorial(kTableSize), log_int(kTableSize) {
    log_factorial[0] = 0.0;
    log_int[0] = kNegInf;
    for (std::size_t n = 1; n < kTableSize; ++n) {
      log_int[n] = std::log(static_cast<double>(n));
      log_factorial[n] = log_gamma(static_cast<double>(n) + 1.0);
    }
  }
};

inline const IntegerLogTables& integer_log_tables() {
  static const IntegerLogTables tables;
  return tables;
}

// Stirling series for log Gamma(x); below long double resolution for x > 64.
inline long double stirling_log_gamma(long double x) {
  constexpr long double half_log_two_pi = 0.918938533204672741780329736405617639861L;
  const long double inv = 1.0L / x;
  const long double inv2 = inv * inv;
  const long double series =
      inv * (1.0L / 12.0L - inv2 * (1.0L / 360.0L - inv2 * (1.0L / 1260.0L - inv2 / 1680.0L)));
  return (x - 0.5L) * std::log(x) - x + half_log_two_pi + series;
}

}  // namespace detail

/// log(n!) for nonnegative integer n (passed as double to allow very large n).
inline double log_factorial(double n) {
  if (n < static_cast<double>(detail::kTableSize)) {
    return detail::integer_log_tables().log_factorial[static_cast<std::size_t>(n)];
  }
  return static_cast<double>(detail::stirling_log_gamma(static_cast<long double>(n) + 1.0L));
}

/// Extended-precision log(n!), used where a large value is later differenced.
inline long double log_factorial_extended(double n) {
  if (n < 64.0) return static_cast<long double>(log_factorial(n));
  return detail::stirling_log_gamma(static_cast<long double>(n) + 1.0L);
}

inline double log_int(double n) {
  if (n < static_cast<double>(detail::kTableSize)) {
    return detail::integer_log_tables().log_int[static_cast<std::size_t>(n)];
  }
  return std::log(n);
}

inline double log_choose(double n, double k) {
  return log_factorial(n) - log_factorial(k) - log_factorial(n - k);
}

inline double logistic(double eta) {
  if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

/// log(logistic(eta)) without cancellation.
inline double log_logistic(double eta) {
  if (eta >= 0.0) return -std::log1p(std::exp(-eta));
  return eta - std::log1p(std::exp(eta));
}

inline double normal_logpdf(double x, double mean, double sd) {
  constexpr double half_log_two_pi = 0.918938533204672741780329736405617639861;
  const double z = (x - mean) / sd;
  return -half_log_two_pi - std::log(sd) - 0.5 * z * z;
}

/// Streaming log-sum-exp with rescaling on a new maximum.
class LogSumExp {
 public:
  void add(double log_term) {
    if (log_term == kNegInf) return;
    if (log_term <= max_) {
      sum_ += std::exp(log_term - max_);
    } else {
      sum_ = sum_ * std::exp(max_ - log_term) + 1.0;
      max_ = log_term;
    }
  }

  double value() const { return max_ == kNegInf ? kNegInf : max_ + std::log(sum_); }
  double max() const { return max_; }

 private:
  double max_ = kNegInf;
  double sum_ = 0.0;
};

/// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

/// Pairwise reduction with a split point that depends only on the length,
/// so the result is independent of how the terms were produced.
inline double tree_sum(std::span<const double> terms) {
  if (terms.empty()) return 0.0;
  if (terms.size() == 1) return terms[0];
  const std::size_t half = terms.size() / 2;
  return tree_sum(terms.first(half)) + tree_sum(terms.subspan(half));
}

/// Shortest decimal representation that round-trips to the same double.
inline std::string format_double(double x) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  if (ec != std::errc()) return "nan";
  return std::string(buf, ptr);
}

inline bool parse_double(std::string_view text, double& out) {
  if (text.empty()) return false;
  if (text.front() == '+') text.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  return ec == std::errc() && ptr == text.data() + text.size();
}

inline bool parse_int(std::string_view text, long long& out) {
  if (text.empty()) return false;
  if (text.front() == '+') text.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  return ec == std::errc() && ptr == text.data() + text.size();
}

}  // namespace bincmp
