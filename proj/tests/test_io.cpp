#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "bincmp/io.hpp"
#include "fixtures.hpp"

using namespace bincmp;
namespace fs = std::filesystem;

namespace {

class IoTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("bincmp_io_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string write(const std::string& name, const std::string& text) const {
    const std::string p = (dir_ / name).string();
    std::ofstream(p, std::ios::binary) << text;
    return p;
  }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  static std::string slurp(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
  }

  // Expects ingestion to fail with `kind` and a message containing `where`.
  void expect_failure(const std::string& counts, const std::string& sites, ErrorKind kind, const std::string& where) {
    try {
      ingest(write("counts.csv", counts), write("sites.csv", sites));
      FAIL() << "no error";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), kind) << e.what();
      EXPECT_NE(std::string(e.what()).find(where), std::string::npos) << e.what();
    }
  }

  fs::path dir_;
};

const std::string kSites = "site_id,x,y,elev\nA,0,0,1.5\nB,1,2,2.5\n";

}  // namespace

TEST_F(IoTest, MinimalFile) {
  const SurveyDataset d = ingest(write("c.csv", "site_id,occasion,visit,count\nA,1,1,3\n"), write("s.csv", "site_id,x,y\nA,0,0\n"));
  EXPECT_EQ(d.G, 1u);
  EXPECT_EQ(d.J, 1u);
  EXPECT_EQ(d.K, 1u);
  EXPECT_EQ(d.P, 1u);
  EXPECT_EQ(d.M, 0u);
  ASSERT_EQ(d.cells.size(), 1u);
  EXPECT_EQ(d.cells[0].y_max, 3);
}

TEST_F(IoTest, MissingVisitsAreAbsentRows) {
  const SurveyDataset d = ingest(write("c.csv",
                                       "site_id,occasion,visit,count,wind\n"
                                       "A,1,1,3,0.2\nA,2,3,1,0.4\nB,2,1,0,0.9\n"),
                                 write("s.csv", kSites));
  EXPECT_EQ(d.G, 2u);
  EXPECT_EQ(d.J, 2u);
  EXPECT_EQ(d.K, 3u);
  EXPECT_EQ(d.observed_visits(), 3u);
  EXPECT_EQ(d.beta_names, (std::vector<std::string>{"intercept", "wind"}));
  EXPECT_EQ(d.gamma_names, (std::vector<std::string>{"elev"}));
}

TEST_F(IoTest, CovariatesStandardizedOnObservedRecords) {
  const SurveyDataset d = ingest(write("c.csv",
                                       "site_id,occasion,visit,count,wind\n"
                                       "A,1,1,3,1\nA,1,2,1,2\nB,1,1,0,6\n"),
                                 write("s.csv", kSites));
  const CovariateTransform& t = d.detection_transforms[0];
  EXPECT_DOUBLE_EQ(t.mean, 3.0);
  double sum = 0.0;
  double sum2 = 0.0;
  for (double x : {1.0, 2.0, 6.0}) {
    const double z = t.apply(x);
    sum += z;
    sum2 += z * z;
  }
  EXPECT_NEAR(sum, 0.0, 1e-12);
  EXPECT_NEAR(sum2 / 2.0, 1.0, 1e-12);
}

TEST_F(IoTest, DuplicateRowNamesTheLine) {
  expect_failure("site_id,occasion,visit,count\nA,1,1,3\nB,1,1,0\nA,1,1,4\n", kSites, ErrorKind::duplicate_record,
                 "counts.csv:4");
  expect_failure("site_id,occasion,visit,count\nA,1,1,3\n", "site_id,x,y\nA,0,0\nA,1,1\n", ErrorKind::duplicate_record,
                 "sites.csv:3");
}

TEST_F(IoTest, ValidationErrors) {
  expect_failure("site_id,occasion,visit,count\nA,1,1,-2\n", kSites, ErrorKind::negative_count, "counts.csv:2:4");
  expect_failure("site_id,occasion,visit,count\nZ,1,1,2\n", kSites, ErrorKind::unknown_site, "counts.csv:2:1");
  expect_failure("site_id,occasion,visit,count,wind\nA,1,1,2,calm\n", kSites, ErrorKind::non_numeric, "counts.csv:2:5");
  expect_failure("site_id,occasion,visit,count,wind\nA,1,1,2,\n", kSites, ErrorKind::non_numeric, "counts.csv:2:5");
  expect_failure("site_id,occasion,visit,count\nA,1,1,2\n", "site_id,x,y,elev\nA,0,0,high\n", ErrorKind::non_numeric,
                 "sites.csv:2:4");
  expect_failure("site_id,occasion,visit,count\nA,0,1,2\n", kSites, ErrorKind::parse_error, "counts.csv:2:2");
  expect_failure("site_id,occasion,visit,count\nA,1,1,2.5\n", kSites, ErrorKind::parse_error, "counts.csv:2:4");
  expect_failure("site_id,occasion,visit,count\nA,1,1\n", kSites, ErrorKind::parse_error, "counts.csv:2");
  expect_failure("site,occasion,visit,count\nA,1,1,2\n", kSites, ErrorKind::parse_error, "counts.csv:1:1");
  expect_failure("site_id,occasion,visit,count\nA,1,1,2\n", "site_id,x,y\nA,0,north\n", ErrorKind::parse_error,
                 "sites.csv:2:3");
  try {
    ingest(path("absent.csv"), write("s.csv", kSites));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io_error);
  }
}

TEST_F(IoTest, SimulatedDatasetRoundTrips) {
  const SimulatedSurvey sim = generate(scenario_s1(21));
  write_dataset(sim.data.raw, path("counts.csv"), path("sites.csv"));
  const SurveyDataset back = ingest(path("counts.csv"), path("sites.csv"), sim.data.J, sim.data.K);
  EXPECT_TRUE(back == sim.data);
  // Writing the re-read dataset reproduces the files byte for byte.
  write_dataset(back.raw, path("counts2.csv"), path("sites2.csv"));
  EXPECT_EQ(slurp(path("counts.csv")), slurp(path("counts2.csv")));
  EXPECT_EQ(slurp(path("sites.csv")), slurp(path("sites2.csv")));
}

TEST_F(IoTest, FingerprintParsing) {
  EXPECT_EQ(parse_partition("{1,3,5}{2,4}", 5).fingerprint(), "{1,3,5}{2,4}");
  EXPECT_THROW(parse_partition("{1,3}{2,4}", 5), Error);
  EXPECT_THROW(parse_partition("{1,2", 2), Error);
  EXPECT_EQ(parse_active_set("{1,4}", 4), (std::vector<char>{1, 0, 0, 1}));
  EXPECT_EQ(parse_active_set("{}", 2), (std::vector<char>{0, 0}));
  EXPECT_THROW(parse_active_set("{5}", 4), Error);
}

TEST_F(IoTest, DrawsRoundTrip) {
  fixture::SurveyShape shape;
  shape.J = 3;
  shape.detection_covariates = 2;
  shape.site_covariates = 2;
  const SurveyDataset d = make_dataset(fixture::random_raw(shape));
  const PosteriorModel model = fixture::model_for(d);
  SamplerConfig c;
  c.iterations = 60;
  c.burn_in = 10;
  c.thin = 5;
  const std::vector<char> beta_forced = {1, 0, 0};
  const std::vector<char> gamma_forced = {0, 0};
  std::vector<ChainOutput> outputs;
  for (std::size_t k = 0; k < 2; ++k) {
    Rng init_rng = make_rng(derive_seed(3, k), 0);
    const ChainState init = initial_state(model, beta_forced, gamma_forced, init_rng);
    outputs.push_back(run_chain(model, c, init, make_rng(derive_seed(3, k), 1), k));
  }
  const DrawLayout layout = draw_layout(model);
  write_draws(path("draws.csv"), outputs, layout);
  const std::vector<ChainOutput> back = read_draws(path("draws.csv"), layout, beta_forced, gamma_forced);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(back[k].iterations, outputs[k].iterations);
    ASSERT_EQ(back[k].draws.size(), outputs[k].draws.size());
    for (std::size_t n = 0; n < back[k].draws.size(); ++n) {
      EXPECT_EQ(back[k].draws[n].structure, outputs[k].draws[n].structure);
      EXPECT_TRUE(back[k].draws[n].params == outputs[k].draws[n].params);
      EXPECT_EQ(back[k].log_posterior[n], outputs[k].log_posterior[n]);
    }
  }
  DrawLayout other = layout;
  other.J = 4;
  try {
    read_draws(path("draws.csv"), other, beta_forced, gamma_forced);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::mismatched_run);
  }
}

TEST_F(IoTest, SpatialDrawsRoundTrip) {
  DrawLayout layout;
  layout.P = 1;
  layout.M = 0;
  layout.J = 2;
  layout.tau = 3;
  layout.beta_names = {"intercept"};
  ChainState s;
  s.structure.beta_forced = {1};
  s.structure.beta_active = {1};
  s.structure.nu_partition = Partition::single_block(2);
  s.params.beta = Eigen::VectorXd::Constant(1, -0.1);
  s.params.gamma = Eigen::VectorXd(0);
  s.params.gamma0 = Eigen::Vector2d(0.3, 1.0 / 3.0);
  s.params.nu_values = {0.07};
  s.params.sigma2_alpha = Eigen::Vector2d(0.5, 2e-7);
  s.params.alpha = Eigen::MatrixXd::Random(3, 2);
  ChainOutput o;
  o.iterations = {4};
  o.draws = {s};
  o.log_posterior = {kNaN};
  write_draws(path("draws.csv"), {o}, layout);
  const std::string text = slurp(path("draws.csv"));
  EXPECT_EQ(text.substr(0, text.find('\n')),
            "chain,iteration,log_posterior,structure,beta[intercept],gamma0[1],gamma0[2],nu[1],nu[2],"
            "sigma2_alpha[1],sigma2_alpha[2],alpha[1;1],alpha[2;1],alpha[3;1],alpha[1;2],alpha[2;2],alpha[3;2]");
  // A missing log posterior is an empty field.
  EXPECT_NE(text.find("1,5,,\""), std::string::npos);
  const auto back = read_draws(path("draws.csv"), layout, {1}, {});
  ASSERT_EQ(back.size(), 1u);
  EXPECT_TRUE(back[0].draws[0].params == s.params);
  EXPECT_EQ(back[0].draws[0].structure, s.structure);
  EXPECT_TRUE(std::isnan(back[0].log_posterior[0]));
}

TEST_F(IoTest, ArtifactHeadersAndMissingValues) {
  SummaryTable t;
  t.conditioning = "marginal";
  SummaryRow r;
  r.parameter = "beta[intercept]";
  r.draws = 10;
  r.mean = 0.25;
  r.sd = 0.1;
  r.q025 = 0.05;
  r.q975 = 0.45;
  t.rows.push_back(r);
  write_summary(path("summary.csv"), t);
  EXPECT_EQ(slurp(path("summary.csv")),
            "conditioning,parameter,draws,mean,sd,q025,q975,rhat\nmarginal,beta[intercept],10,0.25,0.1,0.05,0.45,\n");

  ModelTable m;
  m.rows = {{"{1,2}|{}|{1,2}", 3, 0.75}, {"{1}|{}|{1}{2}", 1, 0.25}};
  write_model_table(path("models.csv"), m);
  EXPECT_EQ(slurp(path("models.csv")), "model,frequency,probability\n\"{1,2}|{}|{1,2}\",3,0.75\n\"{1}|{}|{1}{2}\",1,0.25\n");

  const SurveyDataset d = ingest(write("c.csv", "site_id,occasion,visit,count\nA,1,1,3\n"), write("s.csv", kSites));
  write_abundance(path("abundance.csv"), {{1, 0, 2.5, 0.5}}, d);
  EXPECT_EQ(slurp(path("abundance.csv")), "site_id,x,y,occasion,post_mean,post_sd\nB,1,2,1,2.5,0.5\n");

  ChainOutput o;
  write_move_stats(path("moves.csv"), {o});
  const std::string moves = slurp(path("moves.csv"));
  EXPECT_EQ(moves.substr(0, moves.find('\n')), "chain,move,proposed,accepted,rate,numerical_rejections");
  // No proposals: the rate field is empty.
  EXPECT_NE(moves.find(",0,0,,0\n"), std::string::npos);
}

TEST_F(IoTest, FullPrecisionNumbers) {
  SummaryTable t;
  t.conditioning = "marginal";
  SummaryRow r;
  r.parameter = "x";
  r.mean = 0.1 + 0.2;
  r.sd = 1e-300;
  t.rows.push_back(r);
  write_summary(path("s.csv"), t);
  const std::string text = slurp(path("s.csv"));
  EXPECT_NE(text.find("0.30000000000000004"), std::string::npos);
  EXPECT_NE(text.find("1e-300"), std::string::npos);
}

TEST_F(IoTest, RenderedTablesAreAligned) {
  ModelTable m;
  m.target = ModelTarget::beta;
  m.rows = {{"{1,2,4}", 30, 0.6}, {"{1}", 20, 0.4}};
  const std::string text = render_model_table(m);
  std::istringstream in(text);
  std::string line;
  std::vector<std::size_t> widths;
  while (std::getline(in, line)) widths.push_back(line.size());
  ASSERT_EQ(widths.size(), 3u);
  EXPECT_EQ(widths[1], widths[2]);
  EXPECT_NE(text.find("{1,2,4}"), std::string::npos);
}
