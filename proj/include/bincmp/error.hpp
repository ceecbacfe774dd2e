#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bincmp {

enum class ErrorKind {
  invalid_parameter,
  divergent_series,
  non_finite,
  truncation_cap,
  too_few_sites,
  singular_omega,
  empty_cell,
  truncation_failure,
  insufficient_chains,
  too_few_mode_draws,
  inconsistent_dimensions,
  mismatched_run,
  parse_error,
  duplicate_record,
  negative_count,
  unknown_site,
  non_numeric,
  config_error,
  numerical_failure,
  io_error,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_parameter: return "invalid-parameter";
    case ErrorKind::divergent_series: return "divergent-series";
    case ErrorKind::non_finite: return "non-finite";
    case ErrorKind::truncation_cap: return "truncation-cap";
    case ErrorKind::too_few_sites: return "too-few-sites";
    case ErrorKind::singular_omega: return "singular-omega";
    case ErrorKind::empty_cell: return "empty-cell";
    case ErrorKind::truncation_failure: return "truncation-failure";
    case ErrorKind::insufficient_chains: return "insufficient-chains";
    case ErrorKind::too_few_mode_draws: return "too-few-mode-draws";
    case ErrorKind::inconsistent_dimensions: return "inconsistent-dimensions";
    case ErrorKind::mismatched_run: return "mismatched-run";
    case ErrorKind::parse_error: return "parse-error";
    case ErrorKind::duplicate_record: return "duplicate";
    case ErrorKind::negative_count: return "negative-count";
    case ErrorKind::unknown_site: return "unknown-site";
    case ErrorKind::non_numeric: return "non-numeric";
    case ErrorKind::config_error: return "config-error";
    case ErrorKind::numerical_failure: return "numerical-failure";
    case ErrorKind::io_error: return "io-error";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-checkable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace bincmp
