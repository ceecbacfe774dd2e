#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <string>

#include "bincmp/config.hpp"
#include "bincmp/run.hpp"

namespace {

struct Options {
  std::string config;
  std::string output;
  std::size_t chains = 0;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::size_t workers = 0;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "Run configuration (INI)")->required();
  cmd->add_option("--output", o.output, "Output directory (overrides [output] directory)");
  cmd->add_option("--chains", o.chains, "Number of chains")->check(CLI::PositiveNumber);
  cmd->add_option_function<std::uint64_t>(
      "--seed", [&o](const std::uint64_t& s) { o.seed = s; o.seed_set = true; }, "Master seed");
  cmd->add_option("--workers", o.workers, "Likelihood workers per chain")->check(CLI::PositiveNumber);
  cmd->add_flag("--quiet", o.quiet, "Suppress progress and warnings");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Binomial N-mixture models with Conway-Maxwell-Poisson abundance, fitted by reversible jump MCMC"};
  app.require_subcommand(1);
  Options o;
  CLI::App* simulate = app.add_subcommand("simulate", "Generate a synthetic survey from [simulate]");
  CLI::App* fit = app.add_subcommand("fit", "Run the sampler and write draws, tables and summaries");
  CLI::App* summarize = app.add_subcommand("summarize", "Recompute tables and summaries from an existing draws.csv");
  CLI::App* validate = app.add_subcommand("validate", "Check the configuration and input files");
  for (CLI::App* cmd : {simulate, fit, summarize, validate}) add_common(cmd, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const std::string text = bincmp::read_file(o.config);
    bincmp::RunConfig config = bincmp::parse_config_text(text, o.config);
    if (o.chains > 0) config.chains = o.chains;
    if (o.seed_set) config.seed = o.seed;
    if (o.workers > 0) config.workers = o.workers;
    config.validate();

    bincmp::RunPaths paths;
    paths.base = std::filesystem::path(o.config).parent_path();
    paths.output = o.output.empty() ? std::filesystem::path(paths.resolve(config.output_dir)) : std::filesystem::path(o.output);

    // The manifest records the file as written plus the overrides that change results.
    std::string recorded = text;
    if (o.chains > 0 || o.seed_set) {
      recorded += "\n; command-line overrides\n";
      if (o.chains > 0) recorded += "; chains = " + std::to_string(o.chains) + "\n";
      if (o.seed_set) recorded += "; seed = " + std::to_string(o.seed) + "\n";
    }

    if (simulate->parsed()) {
      bincmp::simulate(config, recorded, paths);
    } else if (fit->parsed()) {
      bincmp::fit(config, recorded, paths, o.quiet);
    } else if (summarize->parsed()) {
      bincmp::summarize_run(config, paths, o.quiet);
    } else {
      std::cout << bincmp::validate_inputs(config, paths) << '\n';
    }
  } catch (const bincmp::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return bincmp::is_numerical(e.kind()) ? 3 : 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
