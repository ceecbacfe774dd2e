#pragma once

// Synthetic surveys for the S1 (covariates only) and S2 (covariates plus a
// spatial term) designs, and scoring of a fit against the generating truth.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "bincmp/count_dist.hpp"
#include "bincmp/error.hpp"
#include "bincmp/inference.hpp"
#include "bincmp/model.hpp"
#include "bincmp/numeric.hpp"
#include "bincmp/rng.hpp"
#include "bincmp/spatial.hpp"

namespace bincmp {

enum class CovariateSource { synthetic_gaussian, from_file };

struct SpatialTruth {
  std::size_t tau = 10;
  double alpha_low = 0.0;
  double alpha_high = 1.0;
};

struct SimScenario {
  std::size_t G = 131;
  std::size_t J = 5;
  std::size_t K = 3;
  std::vector<double> true_beta;    // P values; the first multiplies the intercept
  std::vector<double> true_gamma;   // M values
  std::vector<double> true_gamma0;  // J values
  std::vector<double> true_nu;      // J values
  Family family = Family::cmp;
  std::optional<SpatialTruth> spatial;
  CovariateSource covariate_source = CovariateSource::synthetic_gaussian;
  std::optional<RawSurvey> covariate_template;  // sites, site covariates and visit covariates for from_file
  std::vector<double> missing_rate;             // per-visit MCAR probability for each occasion
  std::uint64_t seed = 1;

  std::size_t P() const { return true_beta.size(); }
  std::size_t M() const { return true_gamma.size(); }

  void validate() const {
    require(G >= 1 && J >= 1 && K >= 1, ErrorKind::inconsistent_dimensions, "G, J and K must be positive");
    require(!true_beta.empty(), ErrorKind::inconsistent_dimensions, "beta needs at least the intercept");
    require(true_gamma0.size() == J && true_nu.size() == J && missing_rate.size() == J,
            ErrorKind::inconsistent_dimensions, "gamma0, nu and missing_rate need one value per occasion");
    for (double r : missing_rate) {
      require(r >= 0.0 && r <= 1.0, ErrorKind::inconsistent_dimensions, "missing rates must lie in [0, 1]");
    }
    if (covariate_source == CovariateSource::from_file) {
      require(covariate_template.has_value(), ErrorKind::inconsistent_dimensions,
              "from_file covariates need a covariate template");
      const RawSurvey& t = *covariate_template;
      require(t.site_ids.size() == G && t.site_covariate_names.size() == M() &&
                  t.detection_covariate_names.size() + 1 == P() && t.occasions == J && t.max_visits == K,
              ErrorKind::inconsistent_dimensions, "covariate template does not match the scenario dimensions");
    }
  }
};

/// Per-occasion visit missingness such that a site-occasion has at least one
/// missing visit with the given probability: 1 - (1 - share)^(1/K).
inline std::vector<double> missing_rates_from_cell_shares(const std::vector<double>& shares, std::size_t K) {
  std::vector<double> out;
  for (double s : shares) out.push_back(1.0 - std::pow(1.0 - s, 1.0 / static_cast<double>(K)));
  return out;
}

/// Simulation design S1: G=131, J=5, K=3, P=4 (intercept first), M=11.
inline SimScenario scenario_s1(std::uint64_t seed = 1) {
  SimScenario s;
  s.true_beta = {-2.31, -0.4, 0.0, -0.4};
  s.true_gamma = {0.0, 0.0, 0.0, 0.0, 0.0, 0.06, 0.0, 0.0, 0.0, 0.03, 0.0};
  s.true_gamma0 = {0.31, 0.13, 0.44, 0.16, 0.35};
  s.true_nu = {0.15, 0.06, 0.15, 0.06, 0.15};
  s.missing_rate = missing_rates_from_cell_shares({0.0687, 0.0687, 0.0305, 0.771, 0.5038}, s.K);
  s.seed = seed;
  return s;
}

/// Simulation design S2: S1 plus phi*' alpha with tau = 10 and alpha ~ U(0, 1). phi* is
/// orthogonal to [1 | W], as in an M1 fit.
inline SimScenario scenario_s2(std::uint64_t seed = 1) {
  SimScenario s = scenario_s1(seed);
  s.spatial = SpatialTruth{};
  return s;
}

struct TruthRecord {
  SimScenario scenario;
  std::vector<std::int64_t> abundance;  // N_ij at site * J + occasion, including unobserved cells
  std::vector<double> lambda;           // same layout
  KnotSet knots;
  Eigen::VectorXd alpha;     // tau, shared across occasions
  Eigen::VectorXd spatial;   // G, phi*_i' alpha
};

struct SimulatedSurvey {
  SurveyDataset data;
  TruthRecord truth;
};

/// Streams: 0 covariates, sites and missingness; 1 knots and alpha; 2 abundance; 3 counts.
inline SimulatedSurvey generate(const SimScenario& sc) {
  sc.validate();
  const std::size_t G = sc.G;
  const std::size_t J = sc.J;
  const std::size_t K = sc.K;
  const std::size_t P = sc.P();
  const std::size_t M = sc.M();
  Rng cov_rng = make_rng(sc.seed, 0);
  Rng spatial_rng = make_rng(sc.seed, 1);
  Rng n_rng = make_rng(sc.seed, 2);
  Rng y_rng = make_rng(sc.seed, 3);
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  RawSurvey raw;
  raw.occasions = J;
  raw.max_visits = K;
  if (sc.covariate_source == CovariateSource::from_file) {
    const RawSurvey& t = *sc.covariate_template;
    raw.site_ids = t.site_ids;
    raw.coords = t.coords;
    raw.site_covariate_names = t.site_covariate_names;
    raw.site_covariates = t.site_covariates;
    raw.detection_covariate_names = t.detection_covariate_names;
    for (const VisitRecord& v : t.visits) {
      VisitRecord r = v;
      r.count = 0;
      raw.visits.push_back(r);
    }
  } else {
    for (std::size_t i = 0; i < G; ++i) {
      raw.site_ids.push_back("s" + std::to_string(i + 1));
      const double x = u(cov_rng);
      const double y = u(cov_rng);
      raw.coords.push_back({x, y});
      std::vector<double> row;
      for (std::size_t m = 0; m < M; ++m) row.push_back(z(cov_rng));
      raw.site_covariates.push_back(row);
    }
    for (std::size_t m = 0; m < M; ++m) raw.site_covariate_names.push_back("w" + std::to_string(m + 1));
    for (std::size_t c = 1; c < P; ++c) raw.detection_covariate_names.push_back("x" + std::to_string(c + 1));
    for (std::size_t j = 0; j < J; ++j) {
      for (std::size_t i = 0; i < G; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
          VisitRecord v;
          v.site = i;
          v.occasion = j + 1;
          v.visit = k + 1;
          for (std::size_t c = 1; c < P; ++c) v.covariates.push_back(z(cov_rng));
          const bool missing = u(cov_rng) < sc.missing_rate[j];
          if (!missing) raw.visits.push_back(std::move(v));
        }
      }
    }
  }

  // Standardization is fitted over the observed records only.
  SurveyDataset standardized = make_dataset(raw);

  TruthRecord truth;
  truth.scenario = sc;
  truth.spatial = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(G));
  if (sc.spatial) {
    truth.knots = select_knots(raw.coords, sc.spatial->tau, spatial_rng);
    // Same basis as an M1 fit, so gamma0 and gamma keep their meaning.
    Eigen::MatrixXd design(static_cast<Eigen::Index>(G), static_cast<Eigen::Index>(1 + M));
    design.col(0).setOnes();
    design.rightCols(static_cast<Eigen::Index>(M)) = standardized.w;
    const SpatialBasis basis = build_basis(raw.coords, truth.knots, design);
    truth.alpha.resize(static_cast<Eigen::Index>(sc.spatial->tau));
    std::uniform_real_distribution<double> ua(sc.spatial->alpha_low, sc.spatial->alpha_high);
    for (Eigen::Index l = 0; l < truth.alpha.size(); ++l) truth.alpha[l] = ua(spatial_rng);
    truth.spatial = basis.phi_star_orth * truth.alpha;
  }

  truth.abundance.assign(G * J, 0);
  truth.lambda.assign(G * J, 0.0);
  for (std::size_t j = 0; j < J; ++j) {
    for (std::size_t i = 0; i < G; ++i) {
      double eta = sc.true_gamma0[j] + truth.spatial[static_cast<Eigen::Index>(i)];
      for (std::size_t m = 0; m < M; ++m) eta += standardized.w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(m)) * sc.true_gamma[m];
      const double lambda = std::exp(eta);
      const AbundancePmf f(sc.family, lambda, sc.true_nu[j]);
      truth.lambda[i * J + j] = lambda;
      truth.abundance[i * J + j] = sample_abundance(f, n_rng);
    }
  }

  // Counts in the same (occasion, site, visit) order as the cells.
  std::vector<std::size_t> order(raw.visits.size());
  for (std::size_t r = 0; r < order.size(); ++r) order[r] = r;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const VisitRecord& x = raw.visits[a];
    const VisitRecord& y = raw.visits[b];
    return std::tie(x.occasion, x.site, x.visit) < std::tie(y.occasion, y.site, y.visit);
  });
  for (std::size_t r : order) {
    VisitRecord& v = raw.visits[r];
    double eta = sc.true_beta[0];
    for (std::size_t c = 1; c < P; ++c) eta += sc.true_beta[c] * standardized.detection_transforms[c - 1].apply(v.covariates[c - 1]);
    const double p = logistic(eta);
    const std::int64_t n = truth.abundance[v.site * J + (v.occasion - 1)];
    v.count = n == 0 ? 0 : std::binomial_distribution<std::int64_t>(n, p)(y_rng);
  }

  return {make_dataset(std::move(raw)), std::move(truth)};
}

struct CoverageItem {
  std::string parameter;
  double truth = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  bool covered = false;
};

struct RecoveryReport {
  std::vector<CoverageItem> coverage;
  double coverage_rate = kNaN;          // over nonzero true coefficients
  std::string modal_beta;
  std::string modal_gamma;
  std::string modal_partition;
  bool beta_model_match = false;
  bool gamma_model_match = false;
  bool partition_match = false;
  bool gamma_model_contains_truth = false;
  double abundance_rmse = kNaN;
};

/// The generating structure: nonzero coefficients plus the forced intercept,
/// and the partition of occasions by equal true dispersion.
inline ModelStructure true_structure(const SimScenario& sc) {
  ModelStructure s;
  s.beta_active.assign(sc.P(), 0);
  s.beta_forced.assign(sc.P(), 0);
  s.beta_active[0] = 1;
  s.beta_forced[0] = 1;
  for (std::size_t m = 1; m < sc.P(); ++m) s.beta_active[m] = sc.true_beta[m] != 0.0;
  s.gamma_active.assign(sc.M(), 0);
  s.gamma_forced.assign(sc.M(), 0);
  for (std::size_t m = 0; m < sc.M(); ++m) s.gamma_active[m] = sc.true_gamma[m] != 0.0;
  std::map<double, std::vector<std::size_t>> groups;
  for (std::size_t j = 0; j < sc.J; ++j) groups[sc.true_nu[j]].push_back(j);
  std::vector<std::vector<std::size_t>> blocks;
  for (auto& [v, b] : groups) blocks.push_back(b);
  s.nu_partition = Partition(std::move(blocks));
  return s;
}

/// True coefficients in the non-spatial parameterization; no spatial term.
inline ChainState true_state(const SimScenario& sc) {
  ChainState s;
  s.structure = true_structure(sc);
  s.params.beta = Eigen::Map<const Eigen::VectorXd>(sc.true_beta.data(), static_cast<Eigen::Index>(sc.P()));
  s.params.gamma = Eigen::Map<const Eigen::VectorXd>(sc.true_gamma.data(), static_cast<Eigen::Index>(sc.M()));
  s.params.gamma0 = Eigen::Map<const Eigen::VectorXd>(sc.true_gamma0.data(), static_cast<Eigen::Index>(sc.J));
  for (const auto& b : s.structure.nu_partition.blocks()) s.params.nu_values.push_back(sc.true_nu[b.front()]);
  return s;
}

/// Indices (0-based) in a set fingerprint such as "{1,2,4}".
inline std::vector<std::size_t> parse_set_fingerprint(const std::string& fp) {
  std::vector<std::size_t> out;
  if (fp.size() < 2 || fp.front() != '{' || fp.back() != '}') fail(ErrorKind::parse_error, "bad set fingerprint '" + fp + "'");
  std::string body = fp.substr(1, fp.size() - 2);
  std::size_t start = 0;
  while (start < body.size()) {
    const std::size_t comma = std::min(body.find(',', start), body.size());
    long long v = 0;
    if (!parse_int(std::string_view(body).substr(start, comma - start), v) || v < 1) fail(ErrorKind::parse_error, "bad set fingerprint '" + fp + "'");
    out.push_back(static_cast<std::size_t>(v - 1));
    start = comma + 1;
  }
  return out;
}

struct FitSummary {
  SummaryTable summary;  // all-draws summary
  ModelTable beta_models;
  ModelTable gamma_models;
  ModelTable nu_models;
  std::vector<AbundanceRow> abundance;  // G * J rows, occasion-major as produced by abundance_summary
};

/// Compares a fit against the generating truth. `data` must be the dataset the
/// fit was run on.
inline RecoveryReport score(const TruthRecord& truth, const SurveyDataset& data, const FitSummary& fit) {
  const SimScenario& sc = truth.scenario;
  if (sc.G != data.G || sc.J != data.J || sc.P() != data.P || sc.M() != data.M ||
      truth.abundance.size() != data.G * data.J) {
    fail(ErrorKind::mismatched_run, "truth record and fitted dataset have different dimensions");
  }
  if (!fit.abundance.empty() && fit.abundance.size() != data.G * data.J) {
    fail(ErrorKind::mismatched_run, "abundance summary does not cover every site and occasion");
  }
  const SummaryNames names = summary_names(data);
  RecoveryReport rep;
  std::size_t nonzero = 0;
  std::size_t covered = 0;
  auto add = [&](const std::string& name, double value, bool counted) {
    const SummaryRow* row = fit.summary.find(name);
    if (row == nullptr) fail(ErrorKind::mismatched_run, "summary has no row for " + name);
    CoverageItem item{name, value, row->q025, row->q975, row->q025 <= value && value <= row->q975};
    if (counted) {
      ++nonzero;
      covered += item.covered ? 1 : 0;
    }
    rep.coverage.push_back(item);
  };
  for (std::size_t m = 0; m < sc.P(); ++m) add(names.beta[m], sc.true_beta[m], sc.true_beta[m] != 0.0);
  for (std::size_t m = 0; m < sc.M(); ++m) add(names.gamma[m], sc.true_gamma[m], sc.true_gamma[m] != 0.0);
  for (std::size_t j = 0; j < sc.J; ++j) add("gamma0[" + std::to_string(j + 1) + "]", sc.true_gamma0[j], false);
  for (std::size_t j = 0; j < sc.J; ++j) add("nu[" + std::to_string(j + 1) + "]", sc.true_nu[j], false);
  if (nonzero > 0) rep.coverage_rate = static_cast<double>(covered) / static_cast<double>(nonzero);

  const ModelStructure t = true_structure(sc);
  if (const ModelRow* r = fit.beta_models.mode()) {
    rep.modal_beta = r->fingerprint;
    rep.beta_model_match = r->fingerprint == set_fingerprint(t.beta_active);
  }
  if (const ModelRow* r = fit.gamma_models.mode()) {
    rep.modal_gamma = r->fingerprint;
    rep.gamma_model_match = r->fingerprint == set_fingerprint(t.gamma_active);
    const std::vector<std::size_t> in = parse_set_fingerprint(r->fingerprint);
    rep.gamma_model_contains_truth = true;
    for (std::size_t m = 0; m < sc.M(); ++m) {
      if (t.gamma_active[m] && std::find(in.begin(), in.end(), m) == in.end()) rep.gamma_model_contains_truth = false;
    }
  }
  if (const ModelRow* r = fit.nu_models.mode()) {
    rep.modal_partition = r->fingerprint;
    rep.partition_match = r->fingerprint == t.nu_partition.fingerprint();
  }

  if (!fit.abundance.empty()) {
    CompensatedSum sq;
    for (const AbundanceRow& a : fit.abundance) {
      const double e = a.mean - static_cast<double>(truth.abundance[a.site * sc.J + a.occasion]);
      sq.add(e * e);
    }
    rep.abundance_rmse = std::sqrt(sq.value() / static_cast<double>(fit.abundance.size()));
  }
  return rep;
}

}  // namespace bincmp
