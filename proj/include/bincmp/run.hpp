#pragma once

// Orchestration behind the command-line tool: model preparation from a run
// configuration, parallel chains, and artifact files.

#include <openssl/evp.h>

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "bincmp/config.hpp"
#include "bincmp/error.hpp"
#include "bincmp/inference.hpp"
#include "bincmp/io.hpp"
#include "bincmp/model.hpp"
#include "bincmp/parallel.hpp"
#include "bincmp/rng.hpp"
#include "bincmp/sampler.hpp"
#include "bincmp/simgen.hpp"
#include "bincmp/spatial.hpp"

namespace bincmp {

inline constexpr std::string_view kToolVersion = "bincmp 0.1.0";
inline constexpr std::uint64_t kKnotStream = 0xC0FFEE;

/// Git blob object id: SHA-1 of "blob <size>\0" followed by the content.
inline std::string git_blob_sha1(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  require(ctx != nullptr, ErrorKind::io_error, "cannot create a digest context");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, digest, &len) == 1;
  EVP_MD_CTX_free(ctx);
  require(ok, ErrorKind::io_error, "SHA-1 digest failed");
  std::ostringstream hex;
  for (unsigned int k = 0; k < len; ++k) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[k]);
  return hex.str();
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io_error, "cannot read " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Numerical failures map to exit status 3, everything else to 2.
inline bool is_numerical(ErrorKind k) {
  switch (k) {
    case ErrorKind::divergent_series:
    case ErrorKind::non_finite:
    case ErrorKind::truncation_cap:
    case ErrorKind::truncation_failure:
    case ErrorKind::numerical_failure:
    case ErrorKind::singular_omega:
      return true;
    default:
      return false;
  }
}

struct RunPaths {
  std::filesystem::path base;  // relative input paths in the config are resolved here
  std::filesystem::path output;

  std::string resolve(const std::string& p) const {
    if (p.empty()) return p;
    const std::filesystem::path path(p);
    return (path.is_absolute() ? path : base / path).string();
  }
  std::string out(const std::string& name) const { return (output / name).string(); }
};

struct PreparedModel {
  std::unique_ptr<SurveyDataset> data;
  PosteriorModel model;
  std::optional<KnotSet> knots;
  std::vector<char> beta_forced;
  std::vector<char> gamma_forced;
  std::vector<std::string> warnings;
  std::string counts_hash;
  std::string sites_hash;
  std::string knots_hash;
};

inline std::vector<char> forced_flags(const std::vector<std::string>& names, const std::vector<std::string>& available,
                                      const char* what) {
  std::vector<char> flags(available.size(), 0);
  for (const auto& n : names) {
    const auto it = std::find(available.begin(), available.end(), n);
    if (it == available.end()) fail(ErrorKind::config_error, std::string(what) + ": no covariate named '" + n + "'");
    flags[static_cast<std::size_t>(it - available.begin())] = 1;
  }
  return flags;
}

/// Reads the data and builds the posterior. knots_path overrides knot selection.
inline PreparedModel prepare(const RunConfig& config, const RunPaths& paths, const std::string& knots_path = {}) {
  require(!config.counts.empty() && !config.sites.empty(), ErrorKind::config_error,
          "[data] needs both counts and sites");
  PreparedModel p;
  const std::string counts = paths.resolve(config.counts);
  const std::string sites = paths.resolve(config.sites);
  p.counts_hash = git_blob_sha1(read_file(counts));
  p.sites_hash = git_blob_sha1(read_file(sites));
  p.data = std::make_unique<SurveyDataset>(ingest(counts, sites, config.occasions, config.visits));
  const SurveyDataset& d = *p.data;

  p.model.data = p.data.get();
  p.model.variant = config.variant;
  p.model.family = config.family;
  p.model.priors = config.priors(d.J);
  p.model.tail_mass = config.tail_mass;
  p.model.z_rel_tol = config.z_rel_tol;
  p.model.z_policy.allow_asymptotic = config.z_asymptotic;
  p.beta_forced = forced_flags(config.forced_beta, d.beta_names, "model.forced_beta");
  if (uses_covariates(config.variant)) {
    p.gamma_forced = forced_flags(config.forced_gamma, d.gamma_names, "model.forced_gamma");
  }

  if (is_spatial(config.variant)) {
    const std::string file = !knots_path.empty() ? knots_path : paths.resolve(config.knot_file);
    if (!file.empty()) {
      p.knots = read_knots(file);
      p.knots_hash = git_blob_sha1(read_file(file));
    } else {
      const std::size_t tau = config.knot_count > 0 ? config.knot_count : default_knot_count(d.G);
      Rng rng = make_rng(config.seed, kKnotStream);
      p.knots = select_knots(d.raw.coords, tau, rng, static_cast<int>(config.knot_sweeps));
    }
    // The spatial term is made orthogonal to the intercept and, for M1, to the site covariates.
    Eigen::MatrixXd design;
    if (config.orthogonalize) {
      const Eigen::Index M = uses_covariates(config.variant) ? static_cast<Eigen::Index>(d.M) : 0;
      design.resize(static_cast<Eigen::Index>(d.G), 1 + M);
      design.col(0).setOnes();
      if (M > 0) design.rightCols(M) = d.w;
    }
    SpatialBasis basis = build_basis(d.raw.coords, *p.knots, design);
    p.warnings = basis.warnings;
    p.model.spatial = config.orthogonalize ? basis.phi_star_orth : basis.phi_star;
  }
  return p;
}

struct FitArtifacts {
  std::vector<ChainOutput> outputs;
  std::vector<std::uint64_t> chain_seeds;
};

inline std::uint64_t chain_seed(std::uint64_t seed, std::size_t chain) { return derive_seed(seed, chain); }

/// Runs all chains, each on its own thread with its own worker pool.
inline FitArtifacts run_chains(const PreparedModel& prepared, const RunConfig& config, bool quiet) {
  SamplerConfig sc = config.sampler();
  if (config.family == Family::poisson) sc.group_nu = false;
  if (!uses_covariates(config.variant)) sc.select_gamma = false;
  std::mutex log_mutex;
  if (!quiet && sc.progress_stride > 0) {
    sc.progress = [&log_mutex](const ProgressInfo& info) {
      std::lock_guard lock(log_mutex);
      std::cerr << "chain " << info.chain + 1 << " iteration " << info.iteration << " log posterior "
                << format_double(info.log_posterior) << ' ' << info.structure << '\n';
    };
  }
  FitArtifacts art;
  art.outputs.resize(config.chains);
  std::vector<std::exception_ptr> errors(config.chains);
  for (std::size_t c = 0; c < config.chains; ++c) art.chain_seeds.push_back(chain_seed(config.seed, c));
  auto work = [&](std::size_t c) {
    try {
      WorkerPool pool(config.workers);
      Rng init_rng = make_rng(art.chain_seeds[c], 0);
      const ChainState init = initial_state(prepared.model, prepared.beta_forced, prepared.gamma_forced, init_rng,
                                            config.init_jitter);
      art.outputs[c] = run_chain(prepared.model, sc, init, make_rng(art.chain_seeds[c], 1), c, &pool);
      art.outputs[c].seed = art.chain_seeds[c];
    } catch (...) {
      errors[c] = std::current_exception();
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t c = 1; c < config.chains; ++c) threads.emplace_back(work, c);
  work(0);
  for (auto& t : threads) t.join();
  for (std::size_t c = 0; c < errors.size(); ++c) {
    if (!errors[c]) continue;
    try {
      std::rethrow_exception(errors[c]);
    } catch (const Error& e) {
      fail(e.kind(), "chain " + std::to_string(c + 1) + ": " + e.what());
    }
  }
  return art;
}

struct ManifestEntry {
  std::string key;
  std::string value;
};

inline void write_manifest(const std::string& path, const std::string& command, const std::vector<ManifestEntry>& run,
                           const std::string& config_text) {
  std::ofstream out = detail::open_output(path);
  out << "[run]\n";
  out << "tool = " << kToolVersion << '\n';
  out << "command = " << command << '\n';
  for (const auto& e : run) out << e.key << " = " << e.value << '\n';
  out << "config_sha1 = " << git_blob_sha1(config_text) << '\n';
  out << "\n[config]\n" << config_text;
  if (!config_text.empty() && config_text.back() != '\n') out << '\n';
}

/// Model tables, summaries and the abundance map for a set of chain outputs.
inline void write_inference(const PreparedModel& prepared, const RunConfig& config, const RunPaths& paths,
                            const std::vector<ChainOutput>& outputs, std::vector<ManifestEntry>& notes, bool quiet) {
  const SurveyDataset& d = *prepared.data;
  std::string text;
  for (ModelTarget t : {ModelTarget::beta, ModelTarget::gamma, ModelTarget::nu, ModelTarget::joint}) {
    const ModelTable table = model_probabilities(outputs, t);
    write_model_table(paths.out("models_" + std::string(to_string(t)) + ".csv"), table);
    text += render_model_table(table) + '\n';
  }
  const SummaryTable all = summarize(outputs, d, Conditioning::all_draws);
  write_summary(paths.out("summary.csv"), all);
  text += render_summary(all);
  if (config.mode_summary) {
    try {
      const SummaryTable mode = summarize(outputs, d, Conditioning::mode_model);
      append_summary(paths.out("summary.csv"), mode);
      text += '\n' + render_summary(mode);
      notes.push_back({"mode_model", mode.mode_structure});
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::too_few_mode_draws) throw;
      notes.push_back({"mode_model", "skipped (" + std::string(e.what()) + ")"});
      if (!quiet) std::cerr << "warning: mode-model summary skipped: " << e.what() << '\n';
    }
  }
  {
    std::ofstream out = detail::open_output(paths.out("summary.txt"));
    out << text;
  }
  if (config.write_abundance) {
    WorkerPool pool(config.workers);
    write_abundance(paths.out("abundance.csv"), abundance_summary(outputs, prepared.model, &pool), d);
  }
}

inline void fit(const RunConfig& config, const std::string& config_text, const RunPaths& paths, bool quiet = false) {
  PreparedModel prepared = prepare(config, paths);
  if (!quiet) {
    for (const auto& w : prepared.warnings) std::cerr << "warning: " << w << '\n';
  }
  std::filesystem::create_directories(paths.output);
  const FitArtifacts art = run_chains(prepared, config, quiet);

  write_draws(paths.out("draws.csv"), art.outputs, draw_layout(prepared.model));
  write_move_stats(paths.out("movestats.csv"), art.outputs);
  if (prepared.knots) write_knots(paths.out("knots.csv"), *prepared.knots);

  std::vector<ManifestEntry> run;
  run.push_back({"seed", std::to_string(config.seed)});
  run.push_back({"chains", std::to_string(config.chains)});
  std::string seeds;
  for (std::size_t c = 0; c < art.chain_seeds.size(); ++c) seeds += (c ? ", " : "") + std::to_string(art.chain_seeds[c]);
  run.push_back({"chain_seeds", seeds});
  run.push_back({"counts_sha1", prepared.counts_hash});
  run.push_back({"sites_sha1", prepared.sites_hash});
  if (!prepared.knots_hash.empty()) run.push_back({"knots_sha1", prepared.knots_hash});
  std::size_t draws = 0;
  for (const auto& o : art.outputs) draws += o.draws.size();
  run.push_back({"draws", std::to_string(draws)});
  std::uint64_t rejected = 0;
  for (const auto& o : art.outputs) rejected += o.stats.total_numerical_rejections();
  run.push_back({"numerical_rejections", std::to_string(rejected)});
  write_inference(prepared, config, paths, art.outputs, run, quiet);
  write_manifest(paths.out("manifest.txt"), "fit", run, config_text);
}

/// Recomputes model tables, summaries and abundance from an existing draws.csv.
inline void summarize_run(const RunConfig& config, const RunPaths& paths, bool quiet = false) {
  const std::string knots = is_spatial(config.variant) && config.knot_file.empty() ? paths.out("knots.csv") : std::string();
  PreparedModel prepared = prepare(config, paths, knots);
  const std::vector<ChainOutput> outputs = read_draws(paths.out("draws.csv"), draw_layout(prepared.model),
                                                      prepared.beta_forced, prepared.gamma_forced);
  std::vector<ManifestEntry> notes;
  write_inference(prepared, config, paths, outputs, notes, quiet);
}

inline SimScenario scenario_from_config(const RunConfig& config, const RunPaths& paths) {
  const SimulateConfig& s = config.simulate;
  SimScenario sc = s.scenario == "S2" ? scenario_s2(s.seed) : scenario_s1(s.seed);
  if (s.G) sc.G = *s.G;
  if (s.J) sc.J = *s.J;
  if (s.K) sc.K = *s.K;
  if (s.beta) sc.true_beta = *s.beta;
  if (s.gamma) sc.true_gamma = *s.gamma;
  if (s.gamma0) sc.true_gamma0 = *s.gamma0;
  if (s.nu) sc.true_nu = *s.nu;
  if (s.missing_rate) sc.missing_rate = *s.missing_rate;
  if (s.family) sc.family = parse_family(*s.family);
  if (s.spatial) {
    if (*s.spatial && !sc.spatial) sc.spatial = SpatialTruth{};
    if (!*s.spatial) sc.spatial.reset();
  }
  if (sc.spatial) {
    if (s.tau) sc.spatial->tau = *s.tau;
    if (s.alpha_low) sc.spatial->alpha_low = *s.alpha_low;
    if (s.alpha_high) sc.spatial->alpha_high = *s.alpha_high;
  }
  if (s.covariates == "file") {
    require(!config.counts.empty() && !config.sites.empty(), ErrorKind::config_error,
            "simulate.covariates = file needs [data] counts and sites");
    const SurveyDataset t = ingest(paths.resolve(config.counts), paths.resolve(config.sites), config.occasions,
                                   config.visits);
    sc.covariate_source = CovariateSource::from_file;
    sc.covariate_template = t.raw;
    sc.G = t.G;
    sc.J = t.J;
    sc.K = t.K;
  }
  sc.validate();
  return sc;
}

inline void simulate(const RunConfig& config, const std::string& config_text, const RunPaths& paths) {
  require(config.has_simulate, ErrorKind::config_error, "simulate needs a [simulate] section");
  const SimScenario sc = scenario_from_config(config, paths);
  const SimulatedSurvey sim = generate(sc);
  std::filesystem::create_directories(paths.output);
  write_dataset(sim.data.raw, paths.out("counts.csv"), paths.out("sites.csv"));
  {
    std::ofstream out = detail::open_output(paths.out("truth_abundance.csv"));
    out << "site_id,occasion,N,lambda\n";
    for (std::size_t j = 0; j < sc.J; ++j) {
      for (std::size_t i = 0; i < sc.G; ++i) {
        out << sim.data.raw.site_ids[i] << ',' << j + 1 << ',' << sim.truth.abundance[i * sc.J + j] << ','
            << format_double(sim.truth.lambda[i * sc.J + j]) << '\n';
      }
    }
  }
  {
    const SummaryNames names = summary_names(sim.data);
    std::ofstream out = detail::open_output(paths.out("truth_parameters.csv"));
    out << "parameter,value\n";
    for (std::size_t m = 0; m < sc.P(); ++m) out << names.beta[m] << ',' << format_double(sc.true_beta[m]) << '\n';
    for (std::size_t m = 0; m < sc.M(); ++m) out << names.gamma[m] << ',' << format_double(sc.true_gamma[m]) << '\n';
    for (std::size_t j = 0; j < sc.J; ++j) out << "gamma0[" << j + 1 << "]," << format_double(sc.true_gamma0[j]) << '\n';
    for (std::size_t j = 0; j < sc.J; ++j) out << "nu[" << j + 1 << "]," << format_double(sc.true_nu[j]) << '\n';
    for (Eigen::Index l = 0; l < sim.truth.alpha.size(); ++l) {
      out << "alpha[" << l + 1 << "]," << format_double(sim.truth.alpha[l]) << '\n';
    }
  }
  if (sc.spatial) write_knots(paths.out("truth_knots.csv"), sim.truth.knots);
  std::vector<ManifestEntry> run;
  run.push_back({"scenario_seed", std::to_string(sc.seed)});
  run.push_back({"counts_sha1", git_blob_sha1(read_file(paths.out("counts.csv")))});
  run.push_back({"sites_sha1", git_blob_sha1(read_file(paths.out("sites.csv")))});
  write_manifest(paths.out("manifest.txt"), "simulate", run, config_text);
}

/// Ingestion and configuration checks only; returns a short description.
inline std::string validate_inputs(const RunConfig& config, const RunPaths& paths) {
  const PreparedModel p = prepare(config, paths);
  const SurveyDataset& d = *p.data;
  std::ostringstream s;
  s << "sites " << d.G << ", occasions " << d.J << ", max visits " << d.K << ", observed visits "
    << d.observed_visits() << ", cells " << d.cells.size() << ", detection covariates " << d.P - 1
    << ", site covariates " << d.M;
  if (p.knots) s << ", knots " << p.knots->tau();
  for (const auto& w : p.warnings) s << "\nwarning: " << w;
  return s.str();
}

}  // namespace bincmp
