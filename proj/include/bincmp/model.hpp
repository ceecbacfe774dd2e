#pragma once

// Survey data, model structure, parameter state and priors.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "bincmp/count_dist.hpp"
#include "bincmp/error.hpp"
#include "bincmp/numeric.hpp"
#include "bincmp/spatial.hpp"

namespace bincmp {

/// One observed secondary visit as read from disk. occasion and visit are 1-based labels.
struct VisitRecord {
  std::size_t site = 0;
  std::size_t occasion = 0;
  std::size_t visit = 0;
  std::int64_t count = 0;
  std::vector<double> covariates;

  bool operator==(const VisitRecord&) const = default;
};

/// Untransformed inputs; everything in SurveyDataset is derived from this.
struct RawSurvey {
  std::vector<std::string> site_ids;
  std::vector<Coord> coords;
  std::vector<std::string> site_covariate_names;
  std::vector<std::vector<double>> site_covariates;  // G rows of M values
  std::vector<std::string> detection_covariate_names;
  std::vector<VisitRecord> visits;
  std::size_t occasions = 0;
  std::size_t max_visits = 0;

  bool operator==(const RawSurvey&) const = default;
};

struct CovariateTransform {
  double mean = 0.0;
  double sd = 1.0;

  double apply(double raw) const { return (raw - mean) / sd; }
  double invert(double z) const { return z * sd + mean; }
  bool operator==(const CovariateTransform&) const = default;
};

/// Observed visits of one (site, occasion) pair.
struct Cell {
  std::size_t site = 0;
  std::size_t occasion = 0;  // 0-based
  std::vector<int> y;
  std::vector<double> x;  // visits x P, row-major, standardized, intercept first
  int y_max = 0;

  std::size_t visits() const { return y.size(); }
  bool operator==(const Cell&) const = default;
};

struct SurveyDataset {
  RawSurvey raw;
  std::size_t G = 0;
  std::size_t J = 0;
  std::size_t K = 0;
  std::size_t P = 0;  // detection coefficients, including the intercept
  std::size_t M = 0;  // site covariates
  std::vector<std::string> beta_names;
  std::vector<std::string> gamma_names;
  std::vector<CovariateTransform> detection_transforms;
  std::vector<CovariateTransform> site_transforms;
  Eigen::MatrixXd w;        // G x M, standardized
  std::vector<Cell> cells;  // cells with at least one visit, ordered by (occasion, site)
  std::vector<std::size_t> occasion_begin;  // J + 1 offsets into cells
  std::vector<std::ptrdiff_t> cell_of;      // site * J + occasion -> index into cells, or -1

  std::ptrdiff_t cell_index(std::size_t site, std::size_t occasion) const { return cell_of[site * J + occasion]; }
  std::size_t observed_visits() const { return raw.visits.size(); }

  bool operator==(const SurveyDataset& o) const {
    return raw == o.raw && G == o.G && J == o.J && K == o.K && P == o.P && M == o.M && beta_names == o.beta_names &&
           gamma_names == o.gamma_names && detection_transforms == o.detection_transforms &&
           site_transforms == o.site_transforms && w.rows() == o.w.rows() && w.cols() == o.w.cols() &&
           (w.array() == o.w.array()).all() && cells == o.cells && occasion_begin == o.occasion_begin &&
           cell_of == o.cell_of;
  }
};

namespace detail {

inline CovariateTransform fit_transform(const std::vector<double>& values, const std::string& name) {
  CovariateTransform t;
  if (values.empty()) return t;
  CompensatedSum s;
  for (double v : values) s.add(v);
  t.mean = s.value() / static_cast<double>(values.size());
  CompensatedSum ss;
  for (double v : values) ss.add((v - t.mean) * (v - t.mean));
  const double denom = values.size() > 1 ? static_cast<double>(values.size() - 1) : 1.0;
  t.sd = std::sqrt(ss.value() / denom);
  if (!(t.sd > 0.0)) fail(ErrorKind::config_error, "covariate '" + name + "' has zero variance");
  return t;
}

}  // namespace detail

/// Validates the raw survey, standardizes covariates (detection covariates over
/// observed visits, site covariates over sites) and groups visits into cells.
inline SurveyDataset make_dataset(RawSurvey raw) {
  SurveyDataset d;
  d.G = raw.site_ids.size();
  d.J = raw.occasions;
  d.K = raw.max_visits;
  d.M = raw.site_covariate_names.size();
  d.P = raw.detection_covariate_names.size() + 1;
  require(d.G >= 1, ErrorKind::inconsistent_dimensions, "survey has no sites");
  require(d.J >= 1, ErrorKind::inconsistent_dimensions, "survey has no primary occasions");
  require(raw.coords.size() == d.G && raw.site_covariates.size() == d.G, ErrorKind::inconsistent_dimensions,
          "site coordinate and covariate rows must match the site list");
  for (const auto& row : raw.site_covariates) {
    require(row.size() == d.M, ErrorKind::inconsistent_dimensions, "site covariate row has the wrong width");
  }

  std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> seen;
  seen.reserve(raw.visits.size());
  for (const VisitRecord& v : raw.visits) {
    require(v.site < d.G, ErrorKind::unknown_site, "visit refers to an unknown site");
    require(v.occasion >= 1 && v.occasion <= d.J, ErrorKind::inconsistent_dimensions, "occasion out of range");
    require(v.visit >= 1 && v.visit <= d.K, ErrorKind::inconsistent_dimensions, "visit index out of range");
    require(v.count >= 0, ErrorKind::negative_count, "negative count");
    require(v.covariates.size() + 1 == d.P, ErrorKind::inconsistent_dimensions,
            "detection covariate vector has the wrong width");
    seen.emplace_back(v.site, v.occasion, v.visit);
  }
  std::sort(seen.begin(), seen.end());
  if (std::adjacent_find(seen.begin(), seen.end()) != seen.end()) {
    fail(ErrorKind::duplicate_record, "duplicate (site, occasion, visit) record");
  }

  d.beta_names.push_back("intercept");
  for (const auto& n : raw.detection_covariate_names) d.beta_names.push_back(n);
  d.gamma_names = raw.site_covariate_names;

  for (std::size_t c = 0; c + 1 < d.P; ++c) {
    std::vector<double> col;
    col.reserve(raw.visits.size());
    for (const VisitRecord& v : raw.visits) col.push_back(v.covariates[c]);
    d.detection_transforms.push_back(detail::fit_transform(col, raw.detection_covariate_names[c]));
  }
  d.w.resize(static_cast<Eigen::Index>(d.G), static_cast<Eigen::Index>(d.M));
  for (std::size_t m = 0; m < d.M; ++m) {
    std::vector<double> col;
    for (std::size_t i = 0; i < d.G; ++i) col.push_back(raw.site_covariates[i][m]);
    d.site_transforms.push_back(detail::fit_transform(col, raw.site_covariate_names[m]));
    for (std::size_t i = 0; i < d.G; ++i) d.w(i, m) = d.site_transforms[m].apply(col[i]);
  }

  std::vector<std::size_t> order(raw.visits.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const VisitRecord& x = raw.visits[a];
    const VisitRecord& y = raw.visits[b];
    return std::tie(x.occasion, x.site, x.visit) < std::tie(y.occasion, y.site, y.visit);
  });
  d.cell_of.assign(d.G * d.J, -1);
  d.occasion_begin.assign(d.J + 1, 0);
  for (std::size_t idx : order) {
    const VisitRecord& v = raw.visits[idx];
    const std::size_t j = v.occasion - 1;
    std::ptrdiff_t& slot = d.cell_of[v.site * d.J + j];
    if (slot < 0) {
      slot = static_cast<std::ptrdiff_t>(d.cells.size());
      Cell c;
      c.site = v.site;
      c.occasion = j;
      d.cells.push_back(std::move(c));
    }
    Cell& c = d.cells[static_cast<std::size_t>(slot)];
    c.y.push_back(static_cast<int>(v.count));
    c.y_max = std::max(c.y_max, static_cast<int>(v.count));
    c.x.push_back(1.0);
    for (std::size_t k = 0; k + 1 < d.P; ++k) c.x.push_back(d.detection_transforms[k].apply(v.covariates[k]));
  }
  for (const Cell& c : d.cells) ++d.occasion_begin[c.occasion + 1];
  for (std::size_t j = 0; j < d.J; ++j) d.occasion_begin[j + 1] += d.occasion_begin[j];
  d.raw = std::move(raw);
  return d;
}

/// Partition of {0..J-1}; blocks are kept sorted and ordered by their smallest element.
class Partition {
 public:
  Partition() = default;
  explicit Partition(std::vector<std::vector<std::size_t>> blocks) : blocks_(std::move(blocks)) { canonicalize(); }

  static Partition single_block(std::size_t J) {
    std::vector<std::size_t> all(J);
    std::iota(all.begin(), all.end(), 0);
    return Partition({all});
  }

  static Partition singletons(std::size_t J) {
    std::vector<std::vector<std::size_t>> b;
    for (std::size_t j = 0; j < J; ++j) b.push_back({j});
    return Partition(std::move(b));
  }

  const std::vector<std::vector<std::size_t>>& blocks() const { return blocks_; }
  std::size_t size() const { return blocks_.size(); }
  const std::vector<std::size_t>& block(std::size_t b) const { return blocks_[b]; }

  std::size_t elements() const {
    std::size_t n = 0;
    for (const auto& b : blocks_) n += b.size();
    return n;
  }

  std::size_t block_of(std::size_t j) const {
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      if (std::binary_search(blocks_[b].begin(), blocks_[b].end(), j)) return b;
    }
    fail(ErrorKind::invalid_parameter, "occasion is not covered by the partition");
  }

  std::vector<std::size_t> block_index(std::size_t J) const {
    std::vector<std::size_t> out(J, 0);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      for (std::size_t j : blocks_[b]) out[j] = b;
    }
    return out;
  }

  bool valid(std::size_t J) const {
    std::vector<int> hits(J, 0);
    for (const auto& b : blocks_) {
      if (b.empty()) return false;
      for (std::size_t j : b) {
        if (j >= J) return false;
        ++hits[j];
      }
    }
    return std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; });
  }

  /// "{1,3,5}{2,4}" with 1-based occasions.
  std::string fingerprint() const {
    std::string s;
    for (const auto& b : blocks_) {
      s += '{';
      for (std::size_t k = 0; k < b.size(); ++k) {
        if (k > 0) s += ',';
        s += std::to_string(b[k] + 1);
      }
      s += '}';
    }
    return s;
  }

  bool operator==(const Partition&) const = default;

 private:
  void canonicalize() {
    for (auto& b : blocks_) std::sort(b.begin(), b.end());
    std::sort(blocks_.begin(), blocks_.end(), [](const auto& a, const auto& b) {
      if (a.empty() || b.empty()) return a.size() < b.size();
      return a.front() < b.front();
    });
  }

  std::vector<std::vector<std::size_t>> blocks_;
};

/// "{1,2,4}" with 1-based indices of the set flags.
inline std::string set_fingerprint(const std::vector<char>& active) {
  std::string s = "{";
  bool first = true;
  for (std::size_t m = 0; m < active.size(); ++m) {
    if (!active[m]) continue;
    if (!first) s += ',';
    s += std::to_string(m + 1);
    first = false;
  }
  return s + "}";
}

struct ModelStructure {
  std::vector<char> beta_active;
  std::vector<char> gamma_active;
  std::vector<char> beta_forced;
  std::vector<char> gamma_forced;
  Partition nu_partition;

  bool operator==(const ModelStructure&) const = default;
};

struct ParameterState {
  Eigen::VectorXd beta;
  Eigen::VectorXd gamma;
  Eigen::VectorXd gamma0;
  std::vector<double> nu_values;  // one per partition block
  Eigen::MatrixXd alpha;          // tau x J; empty for non-spatial variants
  Eigen::VectorXd sigma2_alpha;   // J; empty for non-spatial variants

  bool operator==(const ParameterState& o) const {
    return beta == o.beta && gamma == o.gamma && gamma0 == o.gamma0 && nu_values == o.nu_values &&
           alpha.rows() == o.alpha.rows() && alpha.cols() == o.alpha.cols() && alpha == o.alpha &&
           sigma2_alpha.size() == o.sigma2_alpha.size() && sigma2_alpha == o.sigma2_alpha;
  }
};

struct ChainState {
  ModelStructure structure;
  ParameterState params;

  double nu(std::size_t j) const { return params.nu_values[structure.nu_partition.block_of(j)]; }
  bool operator==(const ChainState&) const = default;
};

/// Diagonal Gaussian priors on coefficients, uniform dispersion bounds and an
/// inverse-gamma prior on the spatial variances. The model prior is uniform.
struct Priors {
  double beta_mean = 0.0;
  double beta_sd = 10.0;
  double gamma_mean = 0.0;
  double gamma_sd = 10.0;
  double gamma0_mean = 0.0;
  double gamma0_sd = 10.0;
  std::vector<double> nu_lower;  // per occasion
  std::vector<double> nu_upper;
  double sigma_alpha_shape = 0.1;
  double sigma_alpha_scale = 0.1;

  static Priors defaults(std::size_t J, double lower = 0.02, double upper = 2.0) {
    Priors p;
    p.nu_lower.assign(J, lower);
    p.nu_upper.assign(J, upper);
    return p;
  }

  void validate(std::size_t J) const {
    require(beta_sd > 0.0 && gamma_sd > 0.0 && gamma0_sd > 0.0, ErrorKind::config_error,
            "prior standard deviations must be positive");
    require(nu_lower.size() == J && nu_upper.size() == J, ErrorKind::config_error,
            "dispersion bounds must be given for every occasion");
    for (std::size_t j = 0; j < J; ++j) {
      require(nu_lower[j] >= 0.0 && nu_lower[j] < nu_upper[j], ErrorKind::config_error,
              "dispersion bounds need 0 <= a_j < b_j");
    }
    require(sigma_alpha_shape > 0.0 && sigma_alpha_scale > 0.0, ErrorKind::config_error,
            "inverse-gamma hyperparameters must be positive");
  }

  /// Admissible interval for a block value shared by the occasions in block.
  std::pair<double, double> block_bounds(const std::vector<std::size_t>& block) const {
    double lo = 0.0;
    double hi = kInf;
    for (std::size_t j : block) {
      lo = std::max(lo, nu_lower[j]);
      hi = std::min(hi, nu_upper[j]);
    }
    return {lo, hi};
  }

  /// Uniform density of a block value on the intersection of its occasions' bounds.
  double nu_block_log_density(const std::vector<std::size_t>& block, double nu) const {
    const auto [lo, hi] = block_bounds(block);
    if (!(hi > lo) || nu < lo || nu > hi) return kNegInf;
    return -std::log(hi - lo);
  }

  double sigma2_log_density(double s2) const {
    if (!(s2 > 0.0)) return kNegInf;
    const double a = sigma_alpha_shape;
    const double b = sigma_alpha_scale;
    return a * std::log(b) - log_gamma(a) - (a + 1.0) * std::log(s2) - b / s2;
  }
};

enum class ModelVariant { m1, m2, m3 };

inline std::string_view to_string(ModelVariant v) {
  switch (v) {
    case ModelVariant::m1: return "M1";
    case ModelVariant::m2: return "M2";
    case ModelVariant::m3: return "M3";
  }
  return "M2";
}

inline ModelVariant parse_variant(std::string_view text) {
  if (text == "M1" || text == "m1") return ModelVariant::m1;
  if (text == "M2" || text == "m2") return ModelVariant::m2;
  if (text == "M3" || text == "m3") return ModelVariant::m3;
  fail(ErrorKind::config_error, "unknown model variant '" + std::string(text) + "'");
}

inline bool uses_covariates(ModelVariant v) { return v != ModelVariant::m3; }
inline bool is_spatial(ModelVariant v) { return v != ModelVariant::m2; }

/// Everything a posterior evaluation needs apart from the chain state. Immutable once built.
struct PosteriorModel {
  const SurveyDataset* data = nullptr;
  ModelVariant variant = ModelVariant::m2;
  Family family = Family::cmp;
  Priors priors;
  Eigen::MatrixXd spatial;  // G x tau design for the spatial term (orthogonalized for M1)
  double tail_mass = 1e-10;
  double z_rel_tol = kDefaultZRelTol;
  ZPolicy z_policy{};

  std::size_t tau() const { return static_cast<std::size_t>(spatial.cols()); }
};

inline double detection_prob(const Eigen::VectorXd& beta, const double* x) {
  double eta = 0.0;
  for (Eigen::Index m = 0; m < beta.size(); ++m) eta += beta[m] * x[m];
  return logistic(eta);
}

inline double detection_prob(const ParameterState& state, const std::vector<double>& x) {
  require(static_cast<Eigen::Index>(x.size()) == state.beta.size(), ErrorKind::inconsistent_dimensions,
          "covariate vector length must equal the number of detection coefficients");
  return detection_prob(state.beta, x.data());
}

inline double log_intensity(const PosteriorModel& model, const ParameterState& p, std::size_t site,
                            std::size_t occasion) {
  double eta = p.gamma0[static_cast<Eigen::Index>(occasion)];
  if (uses_covariates(model.variant)) {
    const auto& w = model.data->w;
    for (Eigen::Index m = 0; m < w.cols(); ++m) eta += w(static_cast<Eigen::Index>(site), m) * p.gamma[m];
  }
  if (is_spatial(model.variant) && p.alpha.size() > 0) {
    const auto s = static_cast<Eigen::Index>(site);
    const auto j = static_cast<Eigen::Index>(occasion);
    for (Eigen::Index l = 0; l < model.spatial.cols(); ++l) eta += model.spatial(s, l) * p.alpha(l, j);
  }
  return eta;
}

inline double intensity(const PosteriorModel& model, const ParameterState& p, std::size_t site,
                        std::size_t occasion) {
  return std::exp(log_intensity(model, p, site, occasion));
}

/// Structure with every selectable covariate inactive and a single dispersion block.
inline ChainState forced_only_state(const PosteriorModel& model, const std::vector<char>& beta_forced,
                                    const std::vector<char>& gamma_forced) {
  const SurveyDataset& d = *model.data;
  ChainState s;
  const std::size_t M = uses_covariates(model.variant) ? d.M : 0;
  s.structure.beta_forced = beta_forced;
  s.structure.gamma_forced = gamma_forced;
  s.structure.beta_forced.resize(d.P, 0);
  s.structure.gamma_forced.resize(M, 0);
  s.structure.beta_active = s.structure.beta_forced;
  s.structure.gamma_active = s.structure.gamma_forced;
  s.structure.nu_partition = Partition::single_block(d.J);
  s.params.beta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d.P));
  s.params.gamma = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(M));
  s.params.gamma0 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d.J));
  const auto [lo, hi] = model.priors.block_bounds(s.structure.nu_partition.block(0));
  s.params.nu_values = {std::clamp(1.0, lo, hi)};
  if (is_spatial(model.variant)) {
    s.params.alpha = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(model.tau()), static_cast<Eigen::Index>(d.J));
    s.params.sigma2_alpha = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(d.J));
  }
  return s;
}

/// Checks the structural invariants; returns an empty string when consistent.
inline std::string check_state(const PosteriorModel& model, const ChainState& s) {
  const SurveyDataset& d = *model.data;
  const ModelStructure& st = s.structure;
  const ParameterState& p = s.params;
  if (static_cast<std::size_t>(p.beta.size()) != d.P || st.beta_active.size() != d.P) return "beta dimension";
  for (std::size_t m = 0; m < d.P; ++m) {
    if (st.beta_forced[m] && !st.beta_active[m]) return "forced beta inactive";
    if (!st.beta_active[m] && p.beta[static_cast<Eigen::Index>(m)] != 0.0) return "inactive beta nonzero";
  }
  for (std::size_t m = 0; m < st.gamma_active.size(); ++m) {
    if (st.gamma_forced[m] && !st.gamma_active[m]) return "forced gamma inactive";
    if (!st.gamma_active[m] && p.gamma[static_cast<Eigen::Index>(m)] != 0.0) return "inactive gamma nonzero";
  }
  if (!st.nu_partition.valid(d.J)) return "invalid partition";
  if (p.nu_values.size() != st.nu_partition.size()) return "nu value count";
  for (std::size_t b = 0; b < st.nu_partition.size(); ++b) {
    if (model.priors.nu_block_log_density(st.nu_partition.block(b), p.nu_values[b]) == kNegInf) {
      return "nu outside bounds";
    }
  }
  return {};
}

}  // namespace bincmp
