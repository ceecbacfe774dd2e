#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "bincmp/inference.hpp"
#include "bincmp/simgen.hpp"
#include "fixtures.hpp"

using namespace bincmp;

namespace {

std::vector<double> normal_draws(std::size_t n, double mean, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0);
  std::normal_distribution<double> z(mean, 1.0);
  std::vector<double> out(n);
  for (double& v : out) v = z(rng);
  return out;
}

// Pooled-over-within variance ratio written out directly for the non-split case.
double rhat_reference(const std::vector<std::vector<double>>& chains) {
  long double within = 0;
  long double grand = 0;
  std::vector<long double> means;
  for (const auto& c : chains) {
    long double m = 0;
    for (double v : c) m += v;
    m /= c.size();
    long double s = 0;
    for (double v : c) s += (v - m) * (v - m);
    within += s / c.size();
    means.push_back(m);
    grand += m;
  }
  within /= chains.size();
  grand /= chains.size();
  long double between = 0;
  for (long double m : means) between += (m - grand) * (m - grand);
  between /= chains.size();
  return static_cast<double>(std::sqrt((within + between) / within));
}

ChainState state_with(const ModelStructure& st, double b0) {
  ChainState s;
  s.structure = st;
  s.params.beta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(st.beta_active.size()));
  s.params.beta[0] = b0;
  s.params.gamma = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(st.gamma_active.size()));
  s.params.gamma0 = Eigen::VectorXd::Zero(2);
  s.params.nu_values.assign(st.nu_partition.size(), 1.0);
  return s;
}

ModelStructure structure(std::vector<char> beta, std::vector<char> gamma, Partition p) {
  ModelStructure st;
  st.beta_forced = std::vector<char>(beta.size(), 0);
  st.beta_forced[0] = 1;
  st.beta_active = std::move(beta);
  st.gamma_forced = std::vector<char>(gamma.size(), 0);
  st.gamma_active = std::move(gamma);
  st.nu_partition = std::move(p);
  return st;
}

SurveyDataset two_occasion_data() {
  fixture::SurveyShape shape;
  shape.G = 4;
  shape.J = 2;
  return make_dataset(fixture::random_raw(shape));
}

}  // namespace

TEST(GelmanRubin, DuplicatedChainsGiveOne) {
  const std::vector<double> c = normal_draws(500, 0.0, 1);
  EXPECT_LT(std::abs(gelman_rubin({c, c}, false) - 1.0), 1e-12);
}

TEST(GelmanRubin, SameDistributionIsNearOne) {
  const double r = gelman_rubin({normal_draws(10000, 0.0, 2), normal_draws(10000, 0.0, 3)});
  EXPECT_LT(r, 1.01);
  EXPECT_GE(r, 1.0);
}

TEST(GelmanRubin, SeparatedChainsAreFlagged) {
  EXPECT_GT(gelman_rubin({normal_draws(1000, 0.0, 4), normal_draws(1000, 10.0, 5)}), 3.0);
}

TEST(GelmanRubin, MatchesReferenceAndSplits) {
  const std::vector<std::vector<double>> chains = {normal_draws(40, 0.0, 6), normal_draws(40, 0.7, 7),
                                                   normal_draws(40, -0.2, 8)};
  EXPECT_NEAR(gelman_rubin(chains, false), rhat_reference(chains), 1e-13);
  std::vector<std::vector<double>> halves;
  for (const auto& c : chains) {
    halves.emplace_back(c.begin(), c.begin() + 20);
    halves.emplace_back(c.begin() + 20, c.end());
  }
  EXPECT_NEAR(gelman_rubin(chains, true), rhat_reference(halves), 1e-13);
  // A trend inside one chain is visible only to the split version.
  std::vector<double> trend(200);
  for (std::size_t k = 0; k < 200; ++k) trend[k] = static_cast<double>(k) / 20.0;
  EXPECT_GT(gelman_rubin({trend, trend}, true), 1.5);
  EXPECT_LT(std::abs(gelman_rubin({trend, trend}, false) - 1.0), 1e-12);
}

TEST(GelmanRubin, Errors) {
  auto kind = [](const std::vector<std::vector<double>>& c) {
    try {
      gelman_rubin(c);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::io_error;
  };
  EXPECT_EQ(kind({normal_draws(50, 0, 1)}), ErrorKind::insufficient_chains);
  EXPECT_EQ(kind({normal_draws(50, 0, 1), normal_draws(49, 0, 2)}), ErrorKind::insufficient_chains);
  EXPECT_EQ(kind({normal_draws(9, 0, 1), normal_draws(9, 0, 2)}), ErrorKind::insufficient_chains);
}

TEST(ModelProbabilities, SingleStructure) {
  ChainOutput o;
  const ModelStructure st = structure({1, 1, 0}, {0, 1}, Partition({{0, 1}}));
  for (int k = 0; k < 7; ++k) o.draws.push_back(state_with(st, 0.0));
  for (ModelTarget t : {ModelTarget::beta, ModelTarget::gamma, ModelTarget::nu, ModelTarget::joint}) {
    const ModelTable table = model_probabilities({o}, t);
    ASSERT_EQ(table.rows.size(), 1u);
    EXPECT_EQ(table.rows[0].probability, 1.0);
    EXPECT_EQ(table.rows[0].frequency, 7u);
  }
  EXPECT_EQ(model_probabilities({o}, ModelTarget::joint).mode()->fingerprint, "{1,2}|{2}|{1,2}");
}

TEST(ModelProbabilities, CountsAcrossChains) {
  const ModelStructure a = structure({1, 1}, {0}, Partition({{0, 1}}));
  const ModelStructure b = structure({1, 0}, {0}, Partition({{0}, {1}}));
  std::vector<ChainOutput> outs(2);
  for (int k = 0; k < 30; ++k) outs[0].draws.push_back(state_with(a, 0.0));
  for (int k = 0; k < 15; ++k) outs[1].draws.push_back(state_with(a, 0.0));
  for (int k = 0; k < 15; ++k) outs[1].draws.push_back(state_with(b, 0.0));
  const ModelTable beta = model_probabilities(outs, ModelTarget::beta);
  ASSERT_EQ(beta.rows.size(), 2u);
  EXPECT_EQ(beta.rows[0].fingerprint, "{1,2}");
  EXPECT_EQ(beta.rows[0].probability, 0.75);
  EXPECT_EQ(beta.rows[1].probability, 0.25);
  EXPECT_EQ(beta.probability_of("{1}"), 0.25);
  EXPECT_EQ(beta.probability_of("{2}"), 0.0);
  const ModelTable nu = model_probabilities(outs, ModelTarget::nu);
  EXPECT_EQ(nu.mode()->fingerprint, "{1,2}");
  double total = 0.0;
  for (const auto& r : model_probabilities(outs, ModelTarget::joint).rows) total += r.probability;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(ModelProbabilities, TiesBreakByFingerprint) {
  const ModelStructure a = structure({1, 1}, {0}, Partition({{0, 1}}));
  const ModelStructure b = structure({1, 0}, {0}, Partition({{0, 1}}));
  ChainOutput o;
  o.draws = {state_with(a, 0.0), state_with(b, 0.0)};
  EXPECT_EQ(model_probabilities({o}, ModelTarget::beta).mode()->fingerprint, "{1,2}");
  EXPECT_EQ(model_probabilities({}, ModelTarget::beta).mode(), nullptr);
}

TEST(Summaries, ConstantDraws) {
  const SummaryRow r = summarize_scalar("c", {std::vector<double>(50, 2.5), std::vector<double>(50, 2.5)});
  EXPECT_EQ(r.mean, 2.5);
  EXPECT_EQ(r.sd, 0.0);
  EXPECT_EQ(r.q025, 2.5);
  EXPECT_EQ(r.q975, 2.5);
  EXPECT_EQ(r.rhat, 1.0);
  EXPECT_EQ(r.draws, 100u);
}

TEST(Summaries, NormalQuantiles) {
  const std::size_t n = 100000;
  const SummaryRow r = summarize_scalar("z", {normal_draws(n, 0.0, 9), normal_draws(n, 0.0, 10)});
  // sd of a sample quantile: sqrt(p (1 - p) / n) / phi(z_p)
  const double se = std::sqrt(0.025 * 0.975 / (2.0 * n)) / (std::exp(-0.5 * 1.959964 * 1.959964) / std::sqrt(2.0 * M_PI));
  EXPECT_NEAR(r.q025, -1.959964, 3.0 * se);
  EXPECT_NEAR(r.q975, 1.959964, 3.0 * se);
  EXPECT_NEAR(r.mean, 0.0, 3.0 / std::sqrt(2.0 * n));
  EXPECT_NEAR(r.sd, 1.0, 3.0 / std::sqrt(4.0 * n));
  EXPECT_LT(r.rhat, 1.01);
}

TEST(Summaries, QuantileInterpolation) {
  EXPECT_EQ(quantile_sorted({1.0, 2.0, 3.0, 4.0, 5.0}, 0.5), 3.0);
  EXPECT_DOUBLE_EQ(quantile_sorted({0.0, 10.0}, 0.025), 0.25);
  EXPECT_TRUE(std::isnan(quantile_sorted({}, 0.5)));
  const SummaryRow one = summarize_scalar("x", {{4.0}});
  EXPECT_EQ(one.sd, 0.0);
  EXPECT_TRUE(std::isnan(one.rhat));
}

TEST(Summaries, ModeModelConditioning) {
  const SurveyDataset d = two_occasion_data();
  const ModelStructure mode = structure({1, 0}, {0, 1}, Partition({{0}, {1}}));
  const ModelStructure other = structure({1, 1}, {0, 1}, Partition({{0, 1}}));
  std::vector<ChainOutput> outs(2);
  for (std::size_t c = 0; c < 2; ++c) {
    for (int k = 0; k < 80; ++k) {
      ChainState s = state_with(mode, 1.0 + 0.01 * k);
      s.params.gamma[1] = 0.5;
      s.params.nu_values = {0.3, 0.9};
      outs[c].draws.push_back(s);
    }
    for (int k = 0; k < 20; ++k) {
      ChainState s = state_with(other, -3.0);
      s.params.beta[1] = 0.7;
      s.params.gamma[1] = 0.5;
      outs[c].draws.push_back(s);
    }
  }
  const SummaryTable all = summarize(outs, d, Conditioning::all_draws);
  const SummaryTable mm = summarize(outs, d, Conditioning::mode_model);
  EXPECT_EQ(mm.mode_structure, "{1}|{2}|{1}{2}");
  EXPECT_EQ(mm.conditioning, "mode-model");
  ASSERT_NE(mm.find("beta[intercept]"), nullptr);
  EXPECT_EQ(mm.find("beta[x1]"), nullptr);
  EXPECT_EQ(mm.find("gamma[w1]"), nullptr);
  ASSERT_NE(mm.find("nu_1"), nullptr);
  EXPECT_EQ(mm.find("nu_2")->mean, 0.9);
  EXPECT_EQ(mm.find("beta[intercept]")->draws, 160u);
  EXPECT_NEAR(mm.find("beta[intercept]")->mean, 1.0 + 0.01 * 39.5, 1e-12);
  ASSERT_NE(all.find("beta[x1]"), nullptr);
  EXPECT_NEAR(all.find("beta[x1]")->mean, 0.7 * 0.2, 1e-12);
  EXPECT_NEAR(all.find("nu[1]")->mean, 0.8 * 0.3 + 0.2 * 1.0, 1e-12);
  EXPECT_EQ(all.find("beta[intercept]")->draws, 200u);

  for (auto& o : outs) o.draws.resize(45);
  try {
    summarize(outs, d, Conditioning::mode_model);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::too_few_mode_draws);
  }
}

TEST(Summaries, ModeAndAllDrawsCoincideForASingleModel) {
  const SurveyDataset d = two_occasion_data();
  const ModelStructure st = structure({1, 1}, {1, 0}, Partition({{0, 1}}));
  std::vector<ChainOutput> outs(2);
  Rng rng = make_rng(12, 0);
  std::normal_distribution<double> z(0.0, 1.0);
  for (auto& o : outs) {
    for (int k = 0; k < 500; ++k) {
      ChainState s = state_with(st, z(rng));
      s.params.beta[1] = z(rng);
      s.params.gamma[0] = z(rng);
      s.params.gamma0 = Eigen::Vector2d(z(rng), z(rng));
      s.params.nu_values = {0.5 + 0.1 * z(rng)};
      o.draws.push_back(s);
    }
  }
  const SummaryTable all = summarize(outs, d, Conditioning::all_draws);
  const SummaryTable mm = summarize(outs, d, Conditioning::mode_model);
  for (const char* name : {"beta[intercept]", "beta[x1]", "gamma[w1]", "gamma0[1]", "gamma0[2]"}) {
    ASSERT_NE(mm.find(name), nullptr) << name;
    EXPECT_EQ(mm.find(name)->mean, all.find(name)->mean) << name;
    EXPECT_EQ(mm.find(name)->sd, all.find(name)->sd) << name;
    EXPECT_EQ(mm.find(name)->q975, all.find(name)->q975) << name;
    EXPECT_EQ(mm.find(name)->rhat, all.find(name)->rhat) << name;
  }
  EXPECT_EQ(mm.find("nu_1_2")->mean, all.find("nu[2]")->mean);
}

TEST(Abundance, PerfectDetection) {
  RawSurvey raw;
  raw.occasions = 2;
  raw.max_visits = 3;
  raw.site_ids = {"a"};
  raw.coords = {{0, 0}};
  raw.site_covariates = {{}};
  for (std::size_t k = 1; k <= 3; ++k) raw.visits.push_back({0, 1, k, 4, {}});
  const SurveyDataset d = make_dataset(raw);
  PosteriorModel model = fixture::model_for(d);
  ChainOutput o;
  for (double g : {0.5, 1.0, 1.5}) {
    ChainState s = forced_only_state(model, {1}, {});
    s.params.beta[0] = 40.0;
    s.params.gamma0 = Eigen::Vector2d(g, g);
    s.params.nu_values = {0.7};
    o.draws.push_back(s);
  }
  const auto rows = abundance_summary({o}, model);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_NEAR(rows[0].mean, 4.0, 1e-10);
  EXPECT_NEAR(rows[0].sd, 0.0, 1e-5);
  // The second occasion has no visits: the mean of the prior means.
  double prior = 0.0;
  for (double g : {0.5, 1.0, 1.5}) prior += mean_var(CmpParams(std::exp(g), 0.7)).mean / 3.0;
  EXPECT_EQ(rows[1].occasion, 1u);
  EXPECT_NEAR(rows[1].mean, prior, 1e-8);
}

TEST(Abundance, SingleDrawMatchesLatentPosterior) {
  fixture::SurveyShape shape;
  shape.G = 5;
  shape.J = 2;
  shape.missing = 0.3;
  const SurveyDataset d = make_dataset(fixture::random_raw(shape));
  PosteriorModel model = fixture::model_for(d);
  ChainState s = forced_only_state(model, {1, 1}, {1, 0});
  s.params.beta = Eigen::Vector2d(-0.2, 0.3);
  s.params.gamma[0] = 0.4;
  s.params.gamma0 = Eigen::Vector2d(1.2, 0.9);
  s.params.nu_values = {0.45};
  ChainOutput o;
  o.draws = {s};
  WorkerPool pool(3);
  const auto rows = abundance_summary({o}, model);
  const auto pooled = abundance_summary({o}, model, &pool);
  for (std::size_t idx = 0; idx < rows.size(); ++idx) {
    const AbundancePosterior post = latent_abundance_posterior(model, s, rows[idx].site, rows[idx].occasion, 1e-10);
    EXPECT_NEAR(rows[idx].mean, post.mean, 1e-12 * post.mean);
    EXPECT_NEAR(rows[idx].sd, std::sqrt(post.variance), 1e-7 * std::sqrt(post.variance));
    EXPECT_EQ(rows[idx].mean, pooled[idx].mean);
    EXPECT_EQ(rows[idx].sd, pooled[idx].sd);
    EXPECT_EQ(idx, rows[idx].occasion * d.G + rows[idx].site);
  }
}

TEST(Abundance, RaoBlackwellAgreesWithSampling) {
  const SimScenario sc = scenario_s1(3);
  const SimulatedSurvey sim = generate(sc);
  PosteriorModel model = fixture::model_for(sim.data);
  SamplerConfig c;
  c.iterations = 150;
  c.burn_in = 50;
  const ChainOutput out = run_chain(model, c, true_state(sc), make_rng(3, 1));
  ASSERT_EQ(out.draws.size(), 100u);
  const auto rb = abundance_summary({out}, model);
  Rng rng = make_rng(3, 2);
  const auto sampled = abundance_by_sampling({out}, model, rng);
  // Given the parameter draws, the two estimates differ only by the sampling of
  // N, whose variance is the average conditional variance over draws.
  const std::size_t G = sim.data.G;
  std::vector<double> cond_var(rb.size(), 0.0);
  for (const ChainState& s : out.draws) {
    for (std::size_t idx = 0; idx < rb.size(); ++idx) {
      cond_var[idx] += latent_abundance_posterior(model, s, idx % G, idx / G, 1e-10).variance / 100.0;
    }
  }
  double diff_total = 0.0;
  double var_total = 0.0;
  std::size_t outliers = 0;
  for (std::size_t idx = 0; idx < rb.size(); ++idx) {
    const double se = std::sqrt(cond_var[idx] / 100.0);
    const double diff = sampled[idx].mean - rb[idx].mean;
    diff_total += diff;
    var_total += cond_var[idx] / 100.0;
    if (std::abs(diff) > 3.0 * se + 1e-12) ++outliers;
  }
  EXPECT_LT(std::abs(diff_total), 3.0 * std::sqrt(var_total));
  EXPECT_LE(outliers, rb.size() / 100);
}
