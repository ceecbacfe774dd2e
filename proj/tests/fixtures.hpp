#pragma once

// Small hand-built surveys shared by the unit tests.

#include <random>
#include <string>
#include <vector>

#include "bincmp/model.hpp"
#include "bincmp/rng.hpp"

namespace fixture {

struct SurveyShape {
  std::size_t G = 6;
  std::size_t J = 2;
  std::size_t K = 3;
  std::size_t detection_covariates = 1;
  std::size_t site_covariates = 2;
  double missing = 0.0;  // probability a visit is dropped
  int max_count = 4;
  std::uint64_t seed = 1;
};

inline bincmp::RawSurvey random_raw(const SurveyShape& s) {
  bincmp::Rng rng = bincmp::make_rng(s.seed, 0);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_int_distribution<int> count(0, s.max_count);
  std::bernoulli_distribution drop(s.missing);
  bincmp::RawSurvey raw;
  raw.occasions = s.J;
  raw.max_visits = s.K;
  for (std::size_t m = 0; m < s.site_covariates; ++m) raw.site_covariate_names.push_back("w" + std::to_string(m + 1));
  for (std::size_t c = 0; c < s.detection_covariates; ++c) {
    raw.detection_covariate_names.push_back("x" + std::to_string(c + 1));
  }
  for (std::size_t i = 0; i < s.G; ++i) {
    raw.site_ids.push_back("s" + std::to_string(i + 1));
    raw.coords.push_back({u(rng), u(rng)});
    std::vector<double> w;
    for (std::size_t m = 0; m < s.site_covariates; ++m) w.push_back(z(rng));
    raw.site_covariates.push_back(w);
  }
  for (std::size_t i = 0; i < s.G; ++i) {
    for (std::size_t j = 1; j <= s.J; ++j) {
      for (std::size_t k = 1; k <= s.K; ++k) {
        if (drop(rng)) continue;
        bincmp::VisitRecord v{i, j, k, count(rng), {}};
        for (std::size_t c = 0; c < s.detection_covariates; ++c) v.covariates.push_back(z(rng));
        raw.visits.push_back(v);
      }
    }
  }
  return raw;
}

inline bincmp::PosteriorModel model_for(const bincmp::SurveyDataset& d, bincmp::ModelVariant v = bincmp::ModelVariant::m2) {
  bincmp::PosteriorModel m;
  m.data = &d;
  m.variant = v;
  m.priors = bincmp::Priors::defaults(d.J);
  return m;
}

}  // namespace fixture
