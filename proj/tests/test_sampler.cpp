#include <gtest/gtest.h>

#include <boost/math/special_functions/gamma.hpp>
#include <cmath>
#include <map>
#include <random>

#include "bincmp/sampler.hpp"
#include "fixtures.hpp"

using namespace bincmp;

namespace {

// Monte Carlo standard error of the mean of an autocorrelated series by batch means.
double batch_se(const std::vector<double>& v, std::size_t batches = 100) {
  const std::size_t n = v.size() / batches;
  std::vector<double> means;
  for (std::size_t b = 0; b < batches; ++b) {
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) s += v[b * n + k];
    means.push_back(s / static_cast<double>(n));
  }
  double m = 0.0;
  for (double x : means) m += x;
  m /= static_cast<double>(batches);
  double ss = 0.0;
  for (double x : means) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(batches - 1) / static_cast<double>(batches));
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

#define EXPECT_WITHIN_3SE(series, target)                                                         \
  do {                                                                                            \
    const std::vector<double>& s_ = (series);                                                     \
    const double se_ = batch_se(s_);                                                              \
    EXPECT_NEAR(mean_of(s_), (target), 3.0 * se_) << #series << " n=" << s_.size() << " se=" << se_; \
  } while (0)

Priors tight_priors(std::size_t J, double nu_lower = 0.02, double nu_upper = 2.0) {
  Priors p = Priors::defaults(J, nu_lower, nu_upper);
  p.beta_sd = 1.0;
  p.gamma_sd = 1.0;
  p.gamma0_sd = 1.0;
  return p;
}

SamplerConfig quiet_config(std::size_t iterations, std::size_t burn_in) {
  SamplerConfig c;
  c.iterations = iterations;
  c.burn_in = burn_in;
  return c;
}

struct EmptySurvey {
  SurveyDataset data;
  PosteriorModel model;

  explicit EmptySurvey(std::size_t J, std::size_t detection = 1, std::size_t site = 2) {
    fixture::SurveyShape shape;
    shape.G = 3;
    shape.J = J;
    shape.K = 2;
    shape.detection_covariates = detection;
    shape.site_covariates = site;
    shape.missing = 1.0;
    data = make_dataset(fixture::random_raw(shape));
    model = fixture::model_for(data);
    model.priors = tight_priors(J);
  }
};

// Two sites, two occasions, three visits each.
struct TinySurvey {
  SurveyDataset data;
  PosteriorModel model;

  TinySurvey() {
    fixture::SurveyShape shape;
    shape.G = 2;
    shape.J = 2;
    shape.K = 3;
    shape.detection_covariates = 1;
    shape.site_covariates = 1;
    shape.max_count = 5;
    shape.seed = 41;
    data = make_dataset(fixture::random_raw(shape));
    model = fixture::model_for(data);
    model.priors = tight_priors(2, 0.5, 2.0);
  }
};

}  // namespace

TEST(MoveStats, RatesAndNames) {
  MoveStats s;
  EXPECT_TRUE(std::isnan(s.rate(Move::rw_beta)));
  s.record(Move::rw_beta, true);
  s.record(Move::rw_beta, false, 3);
  EXPECT_EQ(s.rate(Move::rw_beta), 0.25);
  EXPECT_EQ(to_string(Move::nu_split), "nu-split");
  EXPECT_EQ(to_string(Move::gibbs_sigma_alpha), "gibbs-sigma-alpha");
}

TEST(RandomWalk, ZeroStepIsAlwaysAccepted) {
  TinySurvey t;
  SamplerConfig c = quiet_config(10, 5);
  c.rw_scales = RwScales{0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
  ChainState init = forced_only_state(t.model, {1, 1}, {1});
  init.params.beta = Eigen::Vector2d(0.2, -0.1);
  init.params.gamma[0] = 0.3;
  init.params.gamma0 = Eigen::Vector2d(1.0, 0.5);
  Chain chain(t.model, c, init, make_rng(1, 0));
  for (int k = 0; k < 50; ++k) {
    EXPECT_EQ(chain.rw_beta(), 1.0);
    EXPECT_EQ(chain.rw_gamma(), 1.0);
    EXPECT_EQ(chain.rw_gamma0(), 1.0);
    EXPECT_EQ(chain.rw_nu(), 1.0);
    EXPECT_EQ(chain.rw_nu_gamma0(), 1.0);
  }
  EXPECT_EQ(chain.state(), init);
}

TEST(RandomWalk, DispersionBelowLowerBoundIsRejected) {
  // From nu = 0.03 with step sd 0.05 a proposal is admissible with probability
  // Phi((2 - 0.03) / 0.05) - Phi((0.02 - 0.03) / 0.05); all others must be rejected.
  EmptySurvey e(1);
  SamplerConfig c = quiet_config(10, 5);
  c.rw_scales.nu = 0.05;
  const double p_in = 0.5 * std::erfc(-(2.0 - 0.03) / 0.05 / std::sqrt(2.0)) -
                      0.5 * std::erfc(-(0.02 - 0.03) / 0.05 / std::sqrt(2.0));
  ChainState init = forced_only_state(e.model, {1}, {});
  init.params.nu_values = {0.03};
  const int n = 20000;
  int moved = 0;
  for (int k = 0; k < n; ++k) {
    Chain chain(e.model, c, init, make_rng(2, static_cast<std::uint64_t>(k)));
    chain.rw_nu();
    const double nu = chain.state().params.nu_values[0];
    ASSERT_GE(nu, 0.02);
    ASSERT_LE(nu, 2.0);
    if (nu != 0.03) ++moved;
  }
  EXPECT_NEAR(static_cast<double>(moved) / n, p_in, 3.0 * std::sqrt(p_in * (1.0 - p_in) / n));
}

TEST(ReversibleJump, NoSelectableIndexIsNoOp) {
  TinySurvey t;
  const ChainState init = forced_only_state(t.model, {1, 1}, {1});
  Chain chain(t.model, quiet_config(10, 5), init, make_rng(3, 0));
  for (int k = 0; k < 20; ++k) {
    chain.rj_variable(true);
    chain.rj_variable(false);
  }
  EXPECT_EQ(chain.state(), init);
  for (Move m : {Move::beta_birth, Move::beta_death, Move::gamma_birth, Move::gamma_death}) {
    EXPECT_EQ(chain.stats().proposed[static_cast<std::size_t>(m)], 0u);
  }
}

TEST(ReversibleJump, BirthThenDeathRestoresExactly) {
  TinySurvey t;
  SamplerConfig c = quiet_config(10, 5);
  c.zeta_beta = 0.3;
  ChainState init = forced_only_state(t.model, {1}, {});
  init.params.gamma0 = Eigen::Vector2d(1.0, 0.8);
  Chain chain(t.model, c, init, make_rng(4, 0));
  const double lp0 = chain.log_posterior();
  int restored = 0;
  for (int round = 0; round < 2000 && restored < 5; ++round) {
    chain.rj_variable(true);
    if (!chain.state().structure.beta_active[1]) continue;
    EXPECT_NE(chain.state().params.beta[1], 0.0);
    while (chain.state().structure.beta_active[1]) chain.rj_variable(true);
    EXPECT_EQ(chain.state(), init);
    EXPECT_EQ(chain.log_posterior(), lp0);
    ++restored;
  }
  EXPECT_EQ(restored, 5);
}

TEST(ReversibleJump, SingleOccasionHasNoDispersionMove) {
  EmptySurvey e(1);
  const ChainState init = forced_only_state(e.model, {1}, {});
  Chain chain(e.model, quiet_config(10, 5), init, make_rng(5, 0));
  for (int k = 0; k < 50; ++k) chain.rj_dispersion();
  EXPECT_EQ(chain.state(), init);
  EXPECT_EQ(chain.stats().proposed[static_cast<std::size_t>(Move::nu_split)], 0u);
  EXPECT_EQ(chain.stats().proposed[static_cast<std::size_t>(Move::nu_combine)], 0u);
}

TEST(ReversibleJump, SplitProbabilityMatchesFormula) {
  // Flat likelihood, one block holding every occasion at nu = 1. A split is
  // attempted with probability 1/2 and accepted with
  // min(1, q_rev / q_fwd * 2 eta * 2 / (b - a)) where q_fwd = 1/2 * 1/1 * 1/(2^(J-1) - 1)
  // and q_rev = 1/2 * 1/C(2,2).
  for (std::size_t J : {2u, 3u}) {
    EmptySurvey e(J);
    SamplerConfig c = quiet_config(10, 5);
    c.eta = 0.05;
    const ChainState init = forced_only_state(e.model, {1}, {});
    const double n_bip = std::pow(2.0, static_cast<double>(J) - 1.0) - 1.0;
    const double accept = std::min(1.0, (0.5 / (0.5 / n_bip)) * 2.0 * c.eta * 2.0 / 1.98);
    const double expected = 0.5 * accept;
    const int n = 40000;
    int splits = 0;
    std::map<std::string, int> seen;
    for (int k = 0; k < n; ++k) {
      Chain chain(e.model, c, init, make_rng(6, static_cast<std::uint64_t>(k)));
      chain.rj_dispersion();
      const ChainState& s = chain.state();
      if (s.structure.nu_partition.size() == 2) {
        ++splits;
        ++seen[s.structure.nu_partition.fingerprint()];
        EXPECT_NEAR(s.params.nu_values[0] + s.params.nu_values[1], 2.0, 1e-15);
        EXPECT_LT(std::abs(s.params.nu_values[0] - 1.0), c.eta);
      }
    }
    EXPECT_NEAR(static_cast<double>(splits) / n, expected, 3.0 * std::sqrt(expected * (1 - expected) / n)) << J;
    EXPECT_EQ(seen.size(), static_cast<std::size_t>(n_bip));
  }
}

TEST(ReversibleJump, CombineUsesMidpoint) {
  EmptySurvey e(2);
  SamplerConfig c = quiet_config(10, 5);
  c.eta = 0.3;
  ChainState init = forced_only_state(e.model, {1}, {});
  init.structure.nu_partition = Partition::singletons(2);
  init.params.nu_values = {0.7, 0.9};
  bool combined = false;
  for (std::uint64_t k = 0; k < 200 && !combined; ++k) {
    Chain chain(e.model, c, init, make_rng(7, k));
    chain.rj_dispersion();
    if (chain.state().structure.nu_partition.size() == 1) {
      EXPECT_NEAR(chain.state().params.nu_values[0], 0.8, 1e-15);
      combined = true;
    }
  }
  EXPECT_TRUE(combined);
  // Blocks further apart than 2 eta can never be merged.
  init.params.nu_values = {0.2, 1.9};
  for (std::uint64_t k = 0; k < 200; ++k) {
    Chain chain(e.model, c, init, make_rng(8, k));
    chain.rj_dispersion();
    EXPECT_EQ(chain.state().structure.nu_partition.size(), 2u);
  }
}

class PriorRecovery : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    survey_ = new EmptySurvey(3);
    SamplerConfig c = quiet_config(205000, 5000);
    c.thin = 5;
    c.zeta_beta = 0.8;
    c.zeta_gamma = 0.8;
    c.eta = 0.3;
    c.seed = 9;
    Rng init_rng = make_rng(9, 0);
    const ChainState init = initial_state(survey_->model, {1}, {}, init_rng);
    output_ = new ChainOutput(run_chain(survey_->model, c, init, make_rng(9, 1)));
  }

  static void TearDownTestSuite() {
    delete output_;
    delete survey_;
  }

  template <class F>
  static std::vector<double> series(F f) {
    std::vector<double> out;
    for (const ChainState& s : output_->draws) out.push_back(f(s));
    return out;
  }

  static EmptySurvey* survey_;
  static ChainOutput* output_;
};

EmptySurvey* PriorRecovery::survey_ = nullptr;
ChainOutput* PriorRecovery::output_ = nullptr;

TEST_F(PriorRecovery, ForcedCoefficientMoments) {
  ASSERT_EQ(output_->draws.size(), 40000u);
  EXPECT_WITHIN_3SE(series([](const ChainState& s) { return s.params.beta[0]; }), 0.0);
  EXPECT_WITHIN_3SE(series([](const ChainState& s) { return s.params.beta[0] * s.params.beta[0]; }), 1.0);
  EXPECT_WITHIN_3SE(series([](const ChainState& s) { return s.params.gamma0[1]; }), 0.0);
  EXPECT_WITHIN_3SE(series([](const ChainState& s) { return s.params.gamma0[1] * s.params.gamma0[1]; }), 1.0);
}

TEST_F(PriorRecovery, InclusionFrequencies) {
  EXPECT_WITHIN_3SE(series([](const ChainState& s) { return s.structure.beta_active[1] ? 1.0 : 0.0; }), 0.5);
  EXPECT_WITHIN_3SE(series([](const ChainState& s) { return s.structure.gamma_active[0] ? 1.0 : 0.0; }), 0.5);
  EXPECT_WITHIN_3SE(series([](const ChainState& s) { return s.structure.gamma_active[1] ? 1.0 : 0.0; }), 0.5);
}

TEST_F(PriorRecovery, ActiveCoefficientMoments) {
  std::vector<double> b1;
  std::vector<double> g2;
  for (const ChainState& s : output_->draws) {
    if (s.structure.beta_active[1]) b1.push_back(s.params.beta[1] * s.params.beta[1]);
    if (s.structure.gamma_active[1]) g2.push_back(s.params.gamma[1] * s.params.gamma[1]);
  }
  EXPECT_WITHIN_3SE(b1, 1.0);
  EXPECT_WITHIN_3SE(g2, 1.0);
}

TEST_F(PriorRecovery, PartitionFrequencies) {
  for (const char* fp : {"{1,2,3}", "{1}{2,3}", "{1,2}{3}", "{1,3}{2}", "{1}{2}{3}"}) {
    const std::string key = fp;
    EXPECT_WITHIN_3SE(series([&](const ChainState& s) { return s.structure.nu_partition.fingerprint() == key ? 1.0 : 0.0; }),
                      0.2);
  }
}

TEST_F(PriorRecovery, DispersionIsUniformWithinBlocks) {
  EXPECT_WITHIN_3SE(series([](const ChainState& s) { return s.nu(0); }), 1.01);
  EXPECT_WITHIN_3SE(series([](const ChainState& s) { return s.nu(2) < 0.5 ? 1.0 : 0.0; }), 0.48 / 1.98);
}

TEST_F(PriorRecovery, StatsAreConsistent) {
  for (std::size_t m = 0; m < kMoveCount; ++m) EXPECT_LE(output_->stats.accepted[m], output_->stats.proposed[m]);
  EXPECT_EQ(output_->stats.total_numerical_rejections(), 0u);
  EXPECT_GT(output_->stats.accepted[static_cast<std::size_t>(Move::nu_split)], 1000u);
  EXPECT_GT(output_->stats.accepted[static_cast<std::size_t>(Move::nu_combine)], 1000u);
}

namespace {

struct SpatialSurvey {
  SurveyDataset data;
  PosteriorModel model;

  explicit SpatialSurvey(std::size_t tau) {
    fixture::SurveyShape shape;
    shape.G = 3;
    shape.J = 1;
    shape.missing = 1.0;
    data = make_dataset(fixture::random_raw(shape));
    model = fixture::model_for(data, ModelVariant::m3);
    model.spatial = Eigen::MatrixXd::Ones(3, static_cast<Eigen::Index>(tau));
  }
};

}  // namespace

TEST(GibbsSigmaAlpha, ZeroCoefficientsGivePriorShapePlusHalfTau) {
  // With alpha = 0 the full conditional is IG(a + tau/2, b); check by a
  // Kolmogorov-Smirnov test against that distribution.
  SpatialSurvey sp(8);
  ChainState init = forced_only_state(sp.model, {1}, {});
  Chain chain(sp.model, quiet_config(10, 5), init, make_rng(10, 0));
  const double shape = 0.1 + 4.0;
  const double scale = 0.1;
  const int n = 20000;
  std::vector<double> draws;
  for (int k = 0; k < n; ++k) {
    chain.gibbs_sigma_alpha();
    draws.push_back(chain.state().params.sigma2_alpha[0]);
  }
  std::sort(draws.begin(), draws.end());
  double d = 0.0;
  for (int k = 0; k < n; ++k) {
    const double cdf = boost::math::gamma_q(shape, scale / draws[static_cast<std::size_t>(k)]);
    d = std::max({d, std::abs(cdf - static_cast<double>(k) / n), std::abs(cdf - static_cast<double>(k + 1) / n)});
  }
  EXPECT_LT(d, 1.63 / std::sqrt(static_cast<double>(n)));  // alpha = 0.01
  EXPECT_NEAR(mean_of(draws), scale / (shape - 1.0), 5.0 * (scale / (shape - 1.0)) / std::sqrt((shape - 2.0) * n));
}

TEST(GibbsSigmaAlpha, ConcentratesAtTrueVarianceForLargeTau) {
  const std::size_t tau = 1000;
  SpatialSurvey sp(tau);
  ChainState init = forced_only_state(sp.model, {1}, {});
  Rng rng = make_rng(11, 0);
  std::normal_distribution<double> z(0.0, std::sqrt(0.5));
  for (std::size_t l = 0; l < tau; ++l) init.params.alpha(static_cast<Eigen::Index>(l), 0) = z(rng);
  Chain chain(sp.model, quiet_config(10, 5), init, make_rng(11, 1));
  std::vector<double> draws;
  for (int k = 0; k < 2000; ++k) {
    chain.gibbs_sigma_alpha();
    draws.push_back(chain.state().params.sigma2_alpha[0]);
  }
  EXPECT_LT(std::abs(mean_of(draws) - 0.5) / 0.5, 0.10);
}

TEST(RunChain, ZeroIterations) {
  TinySurvey t;
  SamplerConfig c = quiet_config(0, 0);
  const ChainOutput out = run_chain(t.model, c, forced_only_state(t.model, {1}, {}), make_rng(12, 1), 2);
  EXPECT_EQ(out.chain, 2u);
  EXPECT_TRUE(out.draws.empty());
  EXPECT_TRUE(out.iterations.empty());
  EXPECT_TRUE(out.log_posterior.empty());
  for (std::size_t m = 0; m < kMoveCount; ++m) EXPECT_EQ(out.stats.proposed[m], 0u);
}

TEST(RunChain, EqualSeedsAreBitIdentical) {
  TinySurvey t;
  SamplerConfig c = quiet_config(400, 100);
  c.thin = 3;
  c.record_trace = true;
  Rng r = make_rng(13, 0);
  const ChainState init = initial_state(t.model, {1}, {}, r);
  const ChainOutput a = run_chain(t.model, c, init, make_rng(13, 1));
  const ChainOutput b = run_chain(t.model, c, init, make_rng(13, 1));
  WorkerPool pool(3);
  const ChainOutput w = run_chain(t.model, c, init, make_rng(13, 1), 0, &pool);
  ASSERT_EQ(a.draws.size(), 100u);
  for (const ChainOutput* o : {&b, &w}) {
    EXPECT_EQ(a.iterations, o->iterations);
    EXPECT_EQ(a.draws, o->draws);
    EXPECT_EQ(a.trace, o->trace);
    EXPECT_EQ(a.trace_names, o->trace_names);
    EXPECT_EQ(a.stats.accepted, o->stats.accepted);
    for (std::size_t k = 0; k < a.log_posterior.size(); ++k) EXPECT_EQ(a.log_posterior[k], o->log_posterior[k]);
  }
  EXPECT_EQ(a.iterations.front(), 100u);
  EXPECT_EQ(a.iterations[1], 103u);
  EXPECT_EQ(a.trace.size(), 300u);
}

TEST(RunChain, DebugChecksHoldEverySweep) {
  TinySurvey t;
  SamplerConfig c = quiet_config(600, 100);
  c.debug_checks = true;
  c.eta = 0.3;
  Rng r = make_rng(14, 0);
  const ChainOutput out = run_chain(t.model, c, initial_state(t.model, {1}, {}, r), make_rng(14, 1));
  for (const ChainState& s : out.draws) EXPECT_EQ(check_state(t.model, s), "");
  EXPECT_THROW(SamplerConfig(quiet_config(5, 5)).validate(), Error);
}

TEST(RunChain, SpatialVariantRuns) {
  TinySurvey t;
  PosteriorModel model = t.model;
  model.variant = ModelVariant::m1;
  model.spatial = Eigen::MatrixXd::Identity(2, 2);
  SamplerConfig c = quiet_config(300, 100);
  c.debug_checks = true;
  Rng r = make_rng(15, 0);
  const ChainOutput out = run_chain(model, c, initial_state(model, {1}, {}, r), make_rng(15, 1));
  EXPECT_EQ(out.stats.proposed[static_cast<std::size_t>(Move::gibbs_sigma_alpha)], 300u * 2u);
  EXPECT_GT(out.stats.accepted[static_cast<std::size_t>(Move::rw_alpha)], 0u);
}

TEST(DetailedBalance, StructureFlowsBalance) {
  // Continuous parameters are refreshed by their random walks, then one
  // reversible-jump move is picked at random. Each jump kernel is reversible
  // with respect to the posterior, so across jump calls the flows between two
  // structures must balance.
  TinySurvey t;
  SamplerConfig c = quiet_config(10, 5);
  c.adapt = false;
  c.eta = 0.3;
  c.zeta_beta = 0.8;
  c.zeta_gamma = 0.8;
  c.rw_scales = RwScales{0.5, 0.5, 0.5, 0.3, 0.1, 0.1};
  Rng r = make_rng(16, 0);
  Chain chain(t.model, c, initial_state(t.model, {1}, {}, r), make_rng(16, 1));
  Rng pick = make_rng(16, 2);
  std::uniform_int_distribution<int> which(0, 2);
  std::map<std::pair<std::string, std::string>, long> flow;
  for (int it = 0; it < 300000; ++it) {
    chain.rw_beta();
    chain.rw_gamma();
    chain.rw_gamma0();
    chain.rw_nu();
    const std::string before = structure_fingerprint(chain.state().structure);
    switch (which(pick)) {
      case 0: chain.rj_variable(true); break;
      case 1: chain.rj_variable(false); break;
      default: chain.rj_dispersion(); break;
    }
    const std::string after = structure_fingerprint(chain.state().structure);
    if (before != after) ++flow[{before, after}];
  }
  std::pair<std::string, std::string> busiest;
  long most = 0;
  for (const auto& [key, n] : flow) {
    const long total = n + flow[{key.second, key.first}];
    if (total > most) {
      most = total;
      busiest = key;
    }
  }
  const double ab = static_cast<double>(flow[busiest]);
  const double ba = static_cast<double>(flow[{busiest.second, busiest.first}]);
  EXPECT_GT(ab + ba, 20000.0);
  EXPECT_LT(std::abs(ab - ba) / std::max(ab, ba), 0.05) << busiest.first << " <-> " << busiest.second << ": " << ab
                                                          << " vs " << ba;
}
