#pragma once

// Run configuration: an INI file with sections [data] [model] [priors]
// [sampler] [knots] [output] [simulate]. Unknown sections or keys are errors.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "bincmp/cmp.hpp"
#include "bincmp/count_dist.hpp"
#include "bincmp/error.hpp"
#include "bincmp/model.hpp"
#include "bincmp/numeric.hpp"
#include "bincmp/sampler.hpp"

namespace bincmp {

struct SimulateConfig {
  std::string scenario = "S1";  // S1 or S2; the optional keys override it
  std::uint64_t seed = 1;
  std::string covariates = "synthetic";  // or "file": sites and visit layout from [data]
  std::optional<std::size_t> G;
  std::optional<std::size_t> J;
  std::optional<std::size_t> K;
  std::optional<std::vector<double>> beta;
  std::optional<std::vector<double>> gamma;
  std::optional<std::vector<double>> gamma0;
  std::optional<std::vector<double>> nu;
  std::optional<std::vector<double>> missing_rate;
  std::optional<std::string> family;
  std::optional<bool> spatial;
  std::optional<std::size_t> tau;
  std::optional<double> alpha_low;
  std::optional<double> alpha_high;

  bool operator==(const SimulateConfig&) const = default;
};

struct RunConfig {
  // [data]
  std::string counts;
  std::string sites;
  std::size_t occasions = 0;  // 0: the largest occasion in the counts file
  std::size_t visits = 0;
  // [model]
  ModelVariant variant = ModelVariant::m2;
  Family family = Family::cmp;
  std::vector<std::string> forced_beta = {"intercept"};
  std::vector<std::string> forced_gamma;
  bool select_beta = true;
  bool select_gamma = true;
  bool group_nu = true;
  double tail_mass = 1e-10;
  double z_rel_tol = kDefaultZRelTol;
  bool z_asymptotic = false;
  // [priors]
  double beta_mean = 0.0;
  double beta_sd = 10.0;
  double gamma_mean = 0.0;
  double gamma_sd = 10.0;
  double gamma0_mean = 0.0;
  double gamma0_sd = 10.0;
  std::vector<double> nu_lower = {0.02};  // one value for every occasion, or one per occasion
  std::vector<double> nu_upper = {2.0};
  double sigma_alpha_shape = 0.1;
  double sigma_alpha_scale = 0.1;
  // [sampler]
  std::size_t iterations = 1000;
  std::size_t burn_in = 500;
  std::size_t thin = 1;
  std::size_t chains = 1;
  std::uint64_t seed = 1;
  std::size_t workers = 1;
  double zeta_beta = 0.5;
  double zeta_gamma = 0.2;
  double eta = 0.05;
  bool adapt = true;
  bool joint_nu_gamma0 = true;
  RwScales scales;
  double init_jitter = 0.1;
  std::size_t progress_stride = 0;
  bool debug_checks = false;
  // [knots]
  bool has_knots = false;
  std::size_t knot_count = 0;  // 0: default rule
  std::string knot_file;
  std::size_t knot_sweeps = 100;
  bool orthogonalize = true;
  // [output]
  std::string output_dir = "out";
  bool write_abundance = true;
  bool mode_summary = true;
  // [simulate]
  bool has_simulate = false;
  SimulateConfig simulate;

  bool operator==(const RunConfig& o) const {
    return counts == o.counts && sites == o.sites && occasions == o.occasions && visits == o.visits &&
           variant == o.variant && family == o.family && forced_beta == o.forced_beta &&
           forced_gamma == o.forced_gamma && select_beta == o.select_beta && select_gamma == o.select_gamma &&
           group_nu == o.group_nu && tail_mass == o.tail_mass && z_rel_tol == o.z_rel_tol &&
           z_asymptotic == o.z_asymptotic && beta_mean == o.beta_mean && beta_sd == o.beta_sd &&
           gamma_mean == o.gamma_mean && gamma_sd == o.gamma_sd && gamma0_mean == o.gamma0_mean &&
           gamma0_sd == o.gamma0_sd && nu_lower == o.nu_lower && nu_upper == o.nu_upper &&
           sigma_alpha_shape == o.sigma_alpha_shape && sigma_alpha_scale == o.sigma_alpha_scale &&
           iterations == o.iterations && burn_in == o.burn_in && thin == o.thin && chains == o.chains &&
           seed == o.seed && workers == o.workers && zeta_beta == o.zeta_beta && zeta_gamma == o.zeta_gamma &&
           eta == o.eta && adapt == o.adapt && joint_nu_gamma0 == o.joint_nu_gamma0 &&
           scales.beta == o.scales.beta && scales.gamma == o.scales.gamma && scales.gamma0 == o.scales.gamma0 &&
           scales.nu == o.scales.nu && scales.nu_gamma0 == o.scales.nu_gamma0 && scales.alpha == o.scales.alpha &&
           init_jitter == o.init_jitter && progress_stride == o.progress_stride && debug_checks == o.debug_checks &&
           has_knots == o.has_knots && knot_count == o.knot_count && knot_file == o.knot_file &&
           knot_sweeps == o.knot_sweeps && orthogonalize == o.orthogonalize && output_dir == o.output_dir &&
           write_abundance == o.write_abundance && mode_summary == o.mode_summary &&
           has_simulate == o.has_simulate && simulate == o.simulate;
  }

  SamplerConfig sampler() const {
    SamplerConfig s;
    s.iterations = iterations;
    s.burn_in = burn_in;
    s.thin = thin;
    s.zeta_beta = zeta_beta;
    s.zeta_gamma = zeta_gamma;
    s.eta = eta;
    s.rw_scales = scales;
    s.adapt = adapt;
    s.joint_nu_gamma0 = joint_nu_gamma0;
    s.select_beta = select_beta;
    s.select_gamma = select_gamma;
    s.group_nu = group_nu;
    s.seed = seed;
    s.workers = workers;
    s.chains = chains;
    s.debug_checks = debug_checks;
    s.progress_stride = progress_stride;
    return s;
  }

  Priors priors(std::size_t J) const {
    Priors p;
    p.beta_mean = beta_mean;
    p.beta_sd = beta_sd;
    p.gamma_mean = gamma_mean;
    p.gamma_sd = gamma_sd;
    p.gamma0_mean = gamma0_mean;
    p.gamma0_sd = gamma0_sd;
    auto expand = [&](const std::vector<double>& v, const char* name) {
      if (v.size() == 1) return std::vector<double>(J, v.front());
      require(v.size() == J, ErrorKind::config_error,
              std::string(name) + " needs one value or one per occasion (" + std::to_string(J) + ")");
      return v;
    };
    p.nu_lower = expand(nu_lower, "priors.nu_lower");
    p.nu_upper = expand(nu_upper, "priors.nu_upper");
    p.sigma_alpha_shape = sigma_alpha_shape;
    p.sigma_alpha_scale = sigma_alpha_scale;
    p.validate(J);
    return p;
  }

  /// Checks that do not need the data.
  void validate() const {
    sampler().validate();
    require(tail_mass > 0.0 && tail_mass < 1e-3, ErrorKind::config_error, "model.tail_mass must lie in (0, 1e-3)");
    require(z_rel_tol > 0.0 && z_rel_tol < 1e-3, ErrorKind::config_error, "model.z_rel_tol must lie in (0, 1e-3)");
    require(!nu_lower.empty() && !nu_upper.empty(), ErrorKind::config_error, "dispersion bounds must not be empty");
    require(beta_sd > 0.0 && gamma_sd > 0.0 && gamma0_sd > 0.0, ErrorKind::config_error,
            "prior standard deviations must be positive");
    require(sigma_alpha_shape > 0.0 && sigma_alpha_scale > 0.0, ErrorKind::config_error,
            "inverse-gamma hyperparameters must be positive");
    require(init_jitter >= 0.0, ErrorKind::config_error, "sampler.init_jitter must not be negative");
    if (variant == ModelVariant::m3) {
      require(forced_gamma.empty(), ErrorKind::config_error, "variant M3 has no site covariates in the intensity");
    }
    if (is_spatial(variant)) {
      require(has_knots, ErrorKind::config_error, "variant " + std::string(to_string(variant)) + " needs a [knots] section");
    }
    require(knot_sweeps >= 1, ErrorKind::config_error, "knots.max_sweeps must be at least 1");
    if (has_simulate) {
      require(simulate.scenario == "S1" || simulate.scenario == "S2", ErrorKind::config_error,
              "simulate.scenario must be S1 or S2");
      require(simulate.covariates == "synthetic" || simulate.covariates == "file", ErrorKind::config_error,
              "simulate.covariates must be synthetic or file");
    }
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  const std::string t = trim(s);
  if (t.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = t.find(',', start);
    const std::string item = trim(std::string_view(t).substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (item.empty()) fail(ErrorKind::config_error, "empty item in list '" + t + "'");
    out.push_back(item);
    if (comma == std::string::npos) return out;
    start = comma + 1;
  }
}

inline std::string join(const std::vector<std::string>& items) {
  std::string s;
  for (std::size_t k = 0; k < items.size(); ++k) s += (k ? ", " : "") + items[k];
  return s;
}

struct ConfigField {
  std::string section;
  std::string key;
  std::function<bool()> present;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

class FieldTable {
 public:
  std::vector<ConfigField> fields;

  void add(const std::string& section, const std::string& key, std::string& v) {
    fields.push_back({section, key, always(), [&v] { return v; }, [&v](const std::string& s) { v = s; }});
  }
  void add(const std::string& section, const std::string& key, double& v) {
    fields.push_back({section, key, always(), [&v] { return format_double(v); },
                      [&v, name = section + "." + key](const std::string& s) { v = to_double(s, name); }});
  }
  void add(const std::string& section, const std::string& key, std::size_t& v) {
    fields.push_back({section, key, always(), [&v] { return std::to_string(v); },
                      [&v, name = section + "." + key](const std::string& s) { v = to_size(s, name); }});
  }
  void add(const std::string& section, const std::string& key, bool& v) {
    fields.push_back({section, key, always(), [&v] { return std::string(v ? "true" : "false"); },
                      [&v, name = section + "." + key](const std::string& s) { v = to_bool(s, name); }});
  }
  void add(const std::string& section, const std::string& key, std::vector<std::string>& v) {
    fields.push_back({section, key, always(), [&v] { return join(v); },
                      [&v](const std::string& s) { v = split_list(s); }});
  }
  void add(const std::string& section, const std::string& key, std::vector<double>& v) {
    fields.push_back({section, key, always(), [&v] { return doubles(v); },
                      [&v, name = section + "." + key](const std::string& s) { v = to_doubles(s, name); }});
  }
  template <class T>
  void add_optional(const std::string& section, const std::string& key, std::optional<T>& v) {
    // Converts through a plain field bound to a temporary.
    fields.push_back({section, key, [&v] { return v.has_value(); },
                      [&v, section, key] {
                        T copy = *v;
                        FieldTable t;
                        t.add(section, key, copy);
                        return t.fields.front().get();
                      },
                      [&v, section, key](const std::string& s) {
                        T value{};
                        FieldTable t;
                        t.add(section, key, value);
                        t.fields.front().set(s);
                        v = value;
                      }});
  }

 private:
  static std::function<bool()> always() {
    return [] { return true; };
  }

  static double to_double(const std::string& s, const std::string& name) {
    double v = 0.0;
    if (!parse_double(trim(s), v) || !std::isfinite(v)) fail(ErrorKind::config_error, name + ": '" + s + "' is not a number");
    return v;
  }
  static std::uint64_t to_size(const std::string& s, const std::string& name) {
    const std::string t = trim(s);
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
      fail(ErrorKind::config_error, name + ": '" + s + "' is not a non-negative integer");
    }
    return v;
  }
  static bool to_bool(const std::string& s, const std::string& name) {
    const std::string t = trim(s);
    if (t == "true" || t == "yes" || t == "1" || t == "on") return true;
    if (t == "false" || t == "no" || t == "0" || t == "off") return false;
    fail(ErrorKind::config_error, name + ": '" + s + "' is not a boolean");
  }
  static std::vector<double> to_doubles(const std::string& s, const std::string& name) {
    std::vector<double> out;
    for (const auto& item : split_list(s)) out.push_back(to_double(item, name));
    return out;
  }
  static std::string doubles(const std::vector<double>& v) {
    std::vector<std::string> items;
    for (double x : v) items.push_back(format_double(x));
    return join(items);
  }
};

inline FieldTable field_table(RunConfig& c, std::string& variant, std::string& family) {
  FieldTable t;
  t.add("data", "counts", c.counts);
  t.add("data", "sites", c.sites);
  t.add("data", "occasions", c.occasions);
  t.add("data", "visits", c.visits);
  t.add("model", "variant", variant);
  t.add("model", "family", family);
  t.add("model", "forced_beta", c.forced_beta);
  t.add("model", "forced_gamma", c.forced_gamma);
  t.add("model", "select_beta", c.select_beta);
  t.add("model", "select_gamma", c.select_gamma);
  t.add("model", "group_nu", c.group_nu);
  t.add("model", "tail_mass", c.tail_mass);
  t.add("model", "z_rel_tol", c.z_rel_tol);
  t.add("model", "z_asymptotic", c.z_asymptotic);
  t.add("priors", "beta_mean", c.beta_mean);
  t.add("priors", "beta_sd", c.beta_sd);
  t.add("priors", "gamma_mean", c.gamma_mean);
  t.add("priors", "gamma_sd", c.gamma_sd);
  t.add("priors", "gamma0_mean", c.gamma0_mean);
  t.add("priors", "gamma0_sd", c.gamma0_sd);
  t.add("priors", "nu_lower", c.nu_lower);
  t.add("priors", "nu_upper", c.nu_upper);
  t.add("priors", "sigma_alpha_shape", c.sigma_alpha_shape);
  t.add("priors", "sigma_alpha_scale", c.sigma_alpha_scale);
  t.add("sampler", "iterations", c.iterations);
  t.add("sampler", "burn_in", c.burn_in);
  t.add("sampler", "thin", c.thin);
  t.add("sampler", "chains", c.chains);
  t.add("sampler", "seed", c.seed);
  t.add("sampler", "workers", c.workers);
  t.add("sampler", "zeta_beta", c.zeta_beta);
  t.add("sampler", "zeta_gamma", c.zeta_gamma);
  t.add("sampler", "eta", c.eta);
  t.add("sampler", "adapt", c.adapt);
  t.add("sampler", "joint_nu_gamma0", c.joint_nu_gamma0);
  t.add("sampler", "scale_beta", c.scales.beta);
  t.add("sampler", "scale_gamma", c.scales.gamma);
  t.add("sampler", "scale_gamma0", c.scales.gamma0);
  t.add("sampler", "scale_nu", c.scales.nu);
  t.add("sampler", "scale_nu_gamma0", c.scales.nu_gamma0);
  t.add("sampler", "scale_alpha", c.scales.alpha);
  t.add("sampler", "init_jitter", c.init_jitter);
  t.add("sampler", "progress_stride", c.progress_stride);
  t.add("sampler", "debug_checks", c.debug_checks);
  t.add("knots", "count", c.knot_count);
  t.add("knots", "file", c.knot_file);
  t.add("knots", "max_sweeps", c.knot_sweeps);
  t.add("knots", "orthogonalize", c.orthogonalize);
  t.add("output", "directory", c.output_dir);
  t.add("output", "abundance", c.write_abundance);
  t.add("output", "mode_summary", c.mode_summary);
  SimulateConfig& s = c.simulate;
  t.add("simulate", "scenario", s.scenario);
  t.add("simulate", "seed", s.seed);
  t.add("simulate", "covariates", s.covariates);
  t.add_optional("simulate", "G", s.G);
  t.add_optional("simulate", "J", s.J);
  t.add_optional("simulate", "K", s.K);
  t.add_optional("simulate", "beta", s.beta);
  t.add_optional("simulate", "gamma", s.gamma);
  t.add_optional("simulate", "gamma0", s.gamma0);
  t.add_optional("simulate", "nu", s.nu);
  t.add_optional("simulate", "missing_rate", s.missing_rate);
  t.add_optional("simulate", "family", s.family);
  t.add_optional("simulate", "spatial", s.spatial);
  t.add_optional("simulate", "tau", s.tau);
  t.add_optional("simulate", "alpha_low", s.alpha_low);
  t.add_optional("simulate", "alpha_high", s.alpha_high);
  return t;
}

}  // namespace detail

inline RunConfig parse_config_text(const std::string& text, const std::string& origin = "config") {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    fail(ErrorKind::config_error, origin + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig c;
  std::string variant(to_string(c.variant));
  std::string family(to_string(c.family));
  detail::FieldTable table = detail::field_table(c, variant, family);
  const std::vector<std::string> sections = {"data", "model", "priors", "sampler", "knots", "output", "simulate"};
  // read_ini drops sections without keys, so headers are also collected from the text.
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) {
    const std::string t = detail::trim(line);
    if (t.size() < 2 || t.front() != '[' || t.back() != ']') continue;
    const std::string section = detail::trim(std::string_view(t).substr(1, t.size() - 2));
    if (std::find(sections.begin(), sections.end(), section) == sections.end()) {
      fail(ErrorKind::config_error, origin + ": unknown section [" + section + "]");
    }
    if (section == "knots") c.has_knots = true;
    if (section == "simulate") c.has_simulate = true;
  }
  for (const auto& [section, body] : tree) {
    if (std::find(sections.begin(), sections.end(), section) == sections.end()) {
      if (body.empty()) fail(ErrorKind::config_error, origin + ": key '" + section + "' outside any section");
      fail(ErrorKind::config_error, origin + ": unknown section [" + section + "]");
    }
    if (section == "knots") c.has_knots = true;
    if (section == "simulate") c.has_simulate = true;
    for (const auto& [key, value] : body) {
      auto it = std::find_if(table.fields.begin(), table.fields.end(),
                             [&](const detail::ConfigField& f) { return f.section == section && f.key == key; });
      if (it == table.fields.end()) fail(ErrorKind::config_error, origin + ": unknown key " + section + "." + key);
      it->set(value.data());
    }
  }
  c.variant = parse_variant(detail::trim(variant));
  c.family = parse_family(detail::trim(family));
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io_error, "cannot read config " + path);
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config_text(text.str(), path);
}

/// Canonical text of a configuration; parsing it yields an equal configuration.
inline std::string emit_config(const RunConfig& config) {
  RunConfig c = config;
  std::string variant(to_string(c.variant));
  std::string family(to_string(c.family));
  const detail::FieldTable table = detail::field_table(c, variant, family);
  std::string out;
  std::string current;
  for (const auto& f : table.fields) {
    if (f.section == "knots" && !c.has_knots) continue;
    if (f.section == "simulate" && !c.has_simulate) continue;
    if (!f.present()) continue;
    if (f.section != current) {
      if (!current.empty()) out += '\n';
      out += "[" + f.section + "]\n";
      current = f.section;
    }
    out += f.key + " = " + f.get() + "\n";
  }
  return out;
}

}  // namespace bincmp
