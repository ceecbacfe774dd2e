#pragma once

// CSV ingestion of survey data and CSV emission of run artifacts.
//
// Counts file:  site_id,occasion,visit,count,<detection covariates...>
// Sites file:   site_id,x,y,<site covariates...>
// A (site, occasion, visit) without a row is a missing visit. Fields are plain
// comma-separated values; only structure fingerprints, which contain commas,
// are written in double quotes.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "bincmp/error.hpp"
#include "bincmp/inference.hpp"
#include "bincmp/model.hpp"
#include "bincmp/numeric.hpp"
#include "bincmp/sampler.hpp"
#include "bincmp/simgen.hpp"

namespace bincmp {

namespace detail {

/// Splits on commas. A field wrapped in double quotes may contain commas; the
/// quotes are removed. Embedded quotes are not supported.
inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    if (start < line.size() && line[start] == '"') {
      const std::size_t close = line.find('"', start + 1);
      if (close != std::string_view::npos && (close + 1 == line.size() || line[close + 1] == ',')) {
        out.push_back(line.substr(start + 1, close - start - 1));
        if (close + 1 == line.size()) return out;
        start = close + 2;
        continue;
      }
    }
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

class CsvReader {
 public:
  explicit CsvReader(std::string path) : path_(std::move(path)), in_(path_) {
    require(static_cast<bool>(in_), ErrorKind::io_error, "cannot read " + path_);
  }

  /// Next non-empty line split into fields; false at end of file.
  bool next(std::vector<std::string_view>& fields) {
    while (std::getline(in_, line_)) {
      ++line_no_;
      if (!line_.empty() && line_.back() == '\r') line_.pop_back();
      if (line_.empty()) continue;
      fields = split_fields(line_);
      return true;
    }
    return false;
  }

  std::size_t line() const { return line_no_; }
  const std::string& path() const { return path_; }

  std::string where(std::size_t column = 0) const {
    std::string s = path_ + ":" + std::to_string(line_no_);
    if (column > 0) s += ":" + std::to_string(column);
    return s;
  }

  [[noreturn]] void error(ErrorKind kind, const std::string& what, std::size_t column = 0) const {
    fail(kind, where(column) + ": " + what);
  }

 private:
  std::string path_;
  std::ifstream in_;
  std::string line_;
  std::size_t line_no_ = 0;
};

inline void expect_header(CsvReader& r, const std::vector<std::string_view>& fields,
                          const std::vector<std::string_view>& leading) {
  if (fields.size() < leading.size()) r.error(ErrorKind::parse_error, "header has too few columns");
  for (std::size_t c = 0; c < leading.size(); ++c) {
    if (fields[c] != leading[c]) {
      r.error(ErrorKind::parse_error, "expected column '" + std::string(leading[c]) + "'", c + 1);
    }
  }
  for (std::size_t c = leading.size(); c < fields.size(); ++c) {
    if (fields[c].empty()) r.error(ErrorKind::parse_error, "empty column name", c + 1);
  }
}

inline std::size_t positive_index(CsvReader& r, std::string_view text, std::size_t column, const char* what) {
  long long v = 0;
  if (!parse_int(text, v) || v < 1) r.error(ErrorKind::parse_error, std::string(what) + " must be a positive integer", column);
  return static_cast<std::size_t>(v);
}

inline std::string csv_number(double v) { return std::isnan(v) ? std::string() : format_double(v); }

inline std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io_error, "cannot write " + path);
  return out;
}

}  // namespace detail

/// Reads the sites file into a RawSurvey without visits.
inline RawSurvey read_sites(const std::string& path) {
  detail::CsvReader r(path);
  std::vector<std::string_view> f;
  if (!r.next(f)) fail(ErrorKind::parse_error, path + ": missing header");
  detail::expect_header(r, f, {"site_id", "x", "y"});
  RawSurvey raw;
  for (std::size_t c = 3; c < f.size(); ++c) raw.site_covariate_names.emplace_back(f[c]);
  const std::size_t width = f.size();
  std::map<std::string, std::size_t> first_line;
  while (r.next(f)) {
    if (f.size() != width) {
      r.error(ErrorKind::parse_error, "expected " + std::to_string(width) + " fields, found " + std::to_string(f.size()));
    }
    if (f[0].empty()) r.error(ErrorKind::parse_error, "empty site_id", 1);
    const std::string id(f[0]);
    if (auto [pos, inserted] = first_line.emplace(id, r.line()); !inserted) {
      r.error(ErrorKind::duplicate_record, "site '" + id + "' already defined on line " + std::to_string(pos->second), 1);
    }
    Coord xy{};
    for (std::size_t c = 0; c < 2; ++c) {
      if (!parse_double(f[c + 1], xy[c]) || !std::isfinite(xy[c])) {
        r.error(ErrorKind::parse_error, "coordinate is not a finite number", c + 2);
      }
    }
    std::vector<double> row;
    for (std::size_t c = 3; c < width; ++c) {
      double v = 0.0;
      if (!parse_double(f[c], v) || !std::isfinite(v)) {
        r.error(ErrorKind::non_numeric, "covariate '" + raw.site_covariate_names[c - 3] + "' is not numeric", c + 1);
      }
      row.push_back(v);
    }
    raw.site_ids.push_back(id);
    raw.coords.push_back(xy);
    raw.site_covariates.push_back(std::move(row));
  }
  return raw;
}

/// Adds the visits of a counts file to `raw` (which must already hold the sites).
/// occasions and max_visits are the larger of the given values and those observed.
inline void read_counts(const std::string& path, RawSurvey& raw, std::size_t occasions = 0, std::size_t max_visits = 0) {
  detail::CsvReader r(path);
  std::vector<std::string_view> f;
  if (!r.next(f)) fail(ErrorKind::parse_error, path + ": missing header");
  detail::expect_header(r, f, {"site_id", "occasion", "visit", "count"});
  raw.detection_covariate_names.clear();
  for (std::size_t c = 4; c < f.size(); ++c) raw.detection_covariate_names.emplace_back(f[c]);
  const std::size_t width = f.size();
  std::map<std::string, std::size_t> site_index;
  for (std::size_t i = 0; i < raw.site_ids.size(); ++i) site_index.emplace(raw.site_ids[i], i);
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, std::size_t> first_line;
  raw.visits.clear();
  raw.occasions = occasions;
  raw.max_visits = max_visits;
  while (r.next(f)) {
    if (f.size() != width) {
      r.error(ErrorKind::parse_error, "expected " + std::to_string(width) + " fields, found " + std::to_string(f.size()));
    }
    const auto site = site_index.find(std::string(f[0]));
    if (site == site_index.end()) r.error(ErrorKind::unknown_site, "unknown site_id '" + std::string(f[0]) + "'", 1);
    VisitRecord v;
    v.site = site->second;
    v.occasion = detail::positive_index(r, f[1], 2, "occasion");
    v.visit = detail::positive_index(r, f[2], 3, "visit");
    long long count = 0;
    if (!parse_int(f[3], count)) r.error(ErrorKind::parse_error, "count must be an integer", 4);
    if (count < 0) r.error(ErrorKind::negative_count, "count must not be negative", 4);
    if (count > 1000000000LL) r.error(ErrorKind::parse_error, "count is too large", 4);
    v.count = count;
    for (std::size_t c = 4; c < width; ++c) {
      double x = 0.0;
      if (!parse_double(f[c], x) || !std::isfinite(x)) {
        r.error(ErrorKind::non_numeric, "covariate '" + raw.detection_covariate_names[c - 4] + "' is not numeric", c + 1);
      }
      v.covariates.push_back(x);
    }
    if (auto [pos, inserted] = first_line.emplace(std::make_tuple(v.site, v.occasion, v.visit), r.line()); !inserted) {
      r.error(ErrorKind::duplicate_record, "duplicate (site, occasion, visit) record; first seen on line " +
                                               std::to_string(pos->second));
    }
    raw.occasions = std::max(raw.occasions, v.occasion);
    raw.max_visits = std::max(raw.max_visits, v.visit);
    raw.visits.push_back(std::move(v));
  }
}

inline SurveyDataset ingest(const std::string& counts_path, const std::string& sites_path, std::size_t occasions = 0,
                            std::size_t max_visits = 0) {
  RawSurvey raw = read_sites(sites_path);
  read_counts(counts_path, raw, occasions, max_visits);
  return make_dataset(std::move(raw));
}

/// Writes the raw survey in the ingestion format; ingest() of the result
/// reproduces an equal dataset.
inline void write_dataset(const RawSurvey& raw, const std::string& counts_path, const std::string& sites_path) {
  {
    std::ofstream out = detail::open_output(sites_path);
    out << "site_id,x,y";
    for (const auto& n : raw.site_covariate_names) out << ',' << n;
    out << '\n';
    for (std::size_t i = 0; i < raw.site_ids.size(); ++i) {
      out << raw.site_ids[i] << ',' << format_double(raw.coords[i][0]) << ',' << format_double(raw.coords[i][1]);
      for (double v : raw.site_covariates[i]) out << ',' << format_double(v);
      out << '\n';
    }
  }
  std::ofstream out = detail::open_output(counts_path);
  out << "site_id,occasion,visit,count";
  for (const auto& n : raw.detection_covariate_names) out << ',' << n;
  out << '\n';
  for (const VisitRecord& v : raw.visits) {
    out << raw.site_ids[v.site] << ',' << v.occasion << ',' << v.visit << ',' << v.count;
    for (double x : v.covariates) out << ',' << format_double(x);
    out << '\n';
  }
}

/// Inverse of Partition::fingerprint.
inline Partition parse_partition(const std::string& fp, std::size_t J) {
  std::vector<std::vector<std::size_t>> blocks;
  std::size_t pos = 0;
  while (pos < fp.size()) {
    if (fp[pos] != '{') fail(ErrorKind::parse_error, "bad partition '" + fp + "'");
    const std::size_t close = fp.find('}', pos);
    if (close == std::string::npos) fail(ErrorKind::parse_error, "bad partition '" + fp + "'");
    blocks.push_back(parse_set_fingerprint(fp.substr(pos, close - pos + 1)));
    pos = close + 1;
  }
  Partition p(std::move(blocks));
  if (!p.valid(J)) fail(ErrorKind::parse_error, "partition '" + fp + "' does not cover occasions 1.." + std::to_string(J));
  return p;
}

inline std::vector<char> parse_active_set(const std::string& fp, std::size_t n) {
  std::vector<char> active(n, 0);
  for (std::size_t m : parse_set_fingerprint(fp)) {
    if (m >= n) fail(ErrorKind::parse_error, "index out of range in '" + fp + "'");
    active[m] = 1;
  }
  return active;
}

struct DrawLayout {
  std::size_t P = 0;
  std::size_t M = 0;
  std::size_t J = 0;
  std::size_t tau = 0;  // 0 without a spatial term
  std::vector<std::string> beta_names;
  std::vector<std::string> gamma_names;

  std::vector<std::string> header() const {
    std::vector<std::string> h = {"chain", "iteration", "log_posterior", "structure"};
    for (const auto& n : beta_names) h.push_back("beta[" + n + "]");
    for (const auto& n : gamma_names) h.push_back("gamma[" + n + "]");
    for (std::size_t j = 0; j < J; ++j) h.push_back("gamma0[" + std::to_string(j + 1) + "]");
    for (std::size_t j = 0; j < J; ++j) h.push_back("nu[" + std::to_string(j + 1) + "]");
    if (tau > 0) {
      for (std::size_t j = 0; j < J; ++j) h.push_back("sigma2_alpha[" + std::to_string(j + 1) + "]");
      for (std::size_t j = 0; j < J; ++j) {
        for (std::size_t l = 0; l < tau; ++l) h.push_back("alpha[" + std::to_string(l + 1) + ";" + std::to_string(j + 1) + "]");
      }
    }
    return h;
  }
};

inline DrawLayout draw_layout(const PosteriorModel& model) {
  const SurveyDataset& d = *model.data;
  DrawLayout l;
  l.P = d.P;
  l.M = uses_covariates(model.variant) ? d.M : 0;
  l.J = d.J;
  l.tau = is_spatial(model.variant) ? model.tau() : 0;
  l.beta_names = d.beta_names;
  if (uses_covariates(model.variant)) l.gamma_names = d.gamma_names;
  return l;
}

/// Thinned draws of every chain; inactive coefficients are written as 0 and the
/// dispersion of each occasion is the value of its block.
inline void write_draws(const std::string& path, const std::vector<ChainOutput>& outputs, const DrawLayout& layout) {
  std::ofstream out = detail::open_output(path);
  const auto header = layout.header();
  for (std::size_t c = 0; c < header.size(); ++c) out << (c ? "," : "") << header[c];
  out << '\n';
  std::string line;
  for (const ChainOutput& o : outputs) {
    for (std::size_t k = 0; k < o.draws.size(); ++k) {
      const ChainState& s = o.draws[k];
      line = std::to_string(o.chain + 1) + ',' + std::to_string(o.iterations[k] + 1) + ',' +
             detail::csv_number(o.log_posterior[k]) + ",\"" + structure_fingerprint(s.structure) + '"';
      for (Eigen::Index m = 0; m < s.params.beta.size(); ++m) line += ',' + format_double(s.params.beta[m]);
      for (Eigen::Index m = 0; m < s.params.gamma.size(); ++m) line += ',' + format_double(s.params.gamma[m]);
      for (Eigen::Index j = 0; j < s.params.gamma0.size(); ++j) line += ',' + format_double(s.params.gamma0[j]);
      for (std::size_t j = 0; j < layout.J; ++j) line += ',' + format_double(s.nu(j));
      if (layout.tau > 0) {
        for (Eigen::Index j = 0; j < s.params.sigma2_alpha.size(); ++j) line += ',' + format_double(s.params.sigma2_alpha[j]);
        for (Eigen::Index j = 0; j < s.params.alpha.cols(); ++j) {
          for (Eigen::Index l = 0; l < s.params.alpha.rows(); ++l) line += ',' + format_double(s.params.alpha(l, j));
        }
      }
      line += '\n';
      out << line;
    }
  }
}

/// Reads draws written by write_draws. Forced flags are not stored in the file
/// and are taken from the arguments.
inline std::vector<ChainOutput> read_draws(const std::string& path, const DrawLayout& layout,
                                           const std::vector<char>& beta_forced, const std::vector<char>& gamma_forced) {
  detail::CsvReader r(path);
  std::vector<std::string_view> f;
  if (!r.next(f)) fail(ErrorKind::parse_error, path + ": missing header");
  const auto header = layout.header();
  if (f.size() != header.size()) {
    r.error(ErrorKind::mismatched_run, "draws file has " + std::to_string(f.size()) + " columns, the run layout has " +
                                           std::to_string(header.size()));
  }
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (f[c] != header[c]) r.error(ErrorKind::mismatched_run, "expected column '" + header[c] + "'", c + 1);
  }
  std::vector<ChainOutput> outputs;
  while (r.next(f)) {
    if (f.size() != header.size()) r.error(ErrorKind::parse_error, "wrong number of fields");
    std::size_t col = 0;
    auto number = [&]() {
      double v = 0.0;
      if (!parse_double(f[col], v)) r.error(ErrorKind::parse_error, "not a number", col + 1);
      ++col;
      return v;
    };
    const std::size_t chain = detail::positive_index(r, f[0], 1, "chain") - 1;
    const std::size_t iteration = detail::positive_index(r, f[1], 2, "iteration") - 1;
    col = 2;
    double lp = kNaN;
    if (!f[2].empty()) lp = number();
    else ++col;
    const std::string fp(f[3]);
    ++col;
    ChainState s;
    try {
      const std::size_t bar1 = fp.find('|');
      const std::size_t bar2 = fp.find('|', bar1 == std::string::npos ? 0 : bar1 + 1);
      if (bar1 == std::string::npos || bar2 == std::string::npos) fail(ErrorKind::parse_error, "bad structure");
      s.structure.beta_active = parse_active_set(fp.substr(0, bar1), layout.P);
      s.structure.gamma_active = parse_active_set(fp.substr(bar1 + 1, bar2 - bar1 - 1), layout.M);
      s.structure.nu_partition = parse_partition(fp.substr(bar2 + 1), layout.J);
    } catch (const Error&) {
      r.error(ErrorKind::parse_error, "bad structure fingerprint '" + fp + "'", 4);
    }
    s.structure.beta_forced = beta_forced;
    s.structure.gamma_forced = gamma_forced;
    s.structure.beta_forced.resize(layout.P, 0);
    s.structure.gamma_forced.resize(layout.M, 0);
    s.params.beta.resize(static_cast<Eigen::Index>(layout.P));
    for (std::size_t m = 0; m < layout.P; ++m) s.params.beta[static_cast<Eigen::Index>(m)] = number();
    s.params.gamma.resize(static_cast<Eigen::Index>(layout.M));
    for (std::size_t m = 0; m < layout.M; ++m) s.params.gamma[static_cast<Eigen::Index>(m)] = number();
    s.params.gamma0.resize(static_cast<Eigen::Index>(layout.J));
    for (std::size_t j = 0; j < layout.J; ++j) s.params.gamma0[static_cast<Eigen::Index>(j)] = number();
    std::vector<double> nu(layout.J);
    for (std::size_t j = 0; j < layout.J; ++j) nu[j] = number();
    for (const auto& b : s.structure.nu_partition.blocks()) s.params.nu_values.push_back(nu[b.front()]);
    if (layout.tau > 0) {
      s.params.sigma2_alpha.resize(static_cast<Eigen::Index>(layout.J));
      for (std::size_t j = 0; j < layout.J; ++j) s.params.sigma2_alpha[static_cast<Eigen::Index>(j)] = number();
      s.params.alpha.resize(static_cast<Eigen::Index>(layout.tau), static_cast<Eigen::Index>(layout.J));
      for (std::size_t j = 0; j < layout.J; ++j) {
        for (std::size_t l = 0; l < layout.tau; ++l) {
          s.params.alpha(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(j)) = number();
        }
      }
    }
    if (chain >= outputs.size()) {
      const std::size_t old = outputs.size();
      outputs.resize(chain + 1);
      for (std::size_t c = old; c < outputs.size(); ++c) outputs[c].chain = c;
    }
    outputs[chain].iterations.push_back(iteration);
    outputs[chain].log_posterior.push_back(lp);
    outputs[chain].draws.push_back(std::move(s));
  }
  return outputs;
}

inline void write_model_table(const std::string& path, const ModelTable& table) {
  std::ofstream out = detail::open_output(path);
  out << "model,frequency,probability\n";
  for (const ModelRow& r : table.rows) {
    // Fingerprints contain commas, so the model column is quoted.
    out << '"' << r.fingerprint << "\"," << r.frequency << ',' << format_double(r.probability) << '\n';
  }
}

inline void write_summary(const std::string& path, const SummaryTable& table) {
  std::ofstream out = detail::open_output(path);
  out << "conditioning,parameter,draws,mean,sd,q025,q975,rhat\n";
  for (const SummaryRow& r : table.rows) {
    out << table.conditioning << ',' << r.parameter << ',' << r.draws << ',' << detail::csv_number(r.mean) << ','
        << detail::csv_number(r.sd) << ',' << detail::csv_number(r.q025) << ',' << detail::csv_number(r.q975) << ','
        << detail::csv_number(r.rhat) << '\n';
  }
}

/// Appends the rows of a second summary (for example the mode-model one) to a summary file.
inline void append_summary(const std::string& path, const SummaryTable& table) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  require(static_cast<bool>(out), ErrorKind::io_error, "cannot write " + path);
  for (const SummaryRow& r : table.rows) {
    out << table.conditioning << ',' << r.parameter << ',' << r.draws << ',' << detail::csv_number(r.mean) << ','
        << detail::csv_number(r.sd) << ',' << detail::csv_number(r.q025) << ',' << detail::csv_number(r.q975) << ','
        << detail::csv_number(r.rhat) << '\n';
  }
}

inline void write_abundance(const std::string& path, const std::vector<AbundanceRow>& rows, const SurveyDataset& data) {
  std::ofstream out = detail::open_output(path);
  out << "site_id,x,y,occasion,post_mean,post_sd\n";
  for (const AbundanceRow& r : rows) {
    out << data.raw.site_ids[r.site] << ',' << format_double(data.raw.coords[r.site][0]) << ','
        << format_double(data.raw.coords[r.site][1]) << ',' << r.occasion + 1 << ',' << detail::csv_number(r.mean) << ','
        << detail::csv_number(r.sd) << '\n';
  }
}

inline void write_move_stats(const std::string& path, const std::vector<ChainOutput>& outputs) {
  std::ofstream out = detail::open_output(path);
  out << "chain,move,proposed,accepted,rate,numerical_rejections\n";
  for (const ChainOutput& o : outputs) {
    for (std::size_t m = 0; m < kMoveCount; ++m) {
      const Move move = static_cast<Move>(m);
      out << o.chain + 1 << ',' << to_string(move) << ',' << o.stats.proposed[m] << ',' << o.stats.accepted[m] << ','
          << detail::csv_number(o.stats.rate(move)) << ',' << o.stats.numerical_rejections[m] << '\n';
    }
  }
}

namespace detail {

inline std::string render_number(double v) {
  if (std::isnan(v)) return "-";
  std::ostringstream s;
  s << std::setprecision(4) << v;
  return s.str();
}

inline std::string render_columns(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows) {
    width.resize(std::max(width.size(), r.size()), 0);
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::string out;
  for (const auto& r : rows) {
    std::string line;
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (c > 0) line += "  ";
      // Text columns are left-aligned, numbers right-aligned.
      const bool left = c == 0;
      const std::string pad(width[c] - r[c].size(), ' ');
      line += left ? r[c] + pad : pad + r[c];
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + '\n';
  }
  return out;
}

}  // namespace detail

/// Aligned plain-text rendering of the first `limit` rows of a model table.
inline std::string render_model_table(const ModelTable& table, std::size_t limit = 10) {
  std::vector<std::vector<std::string>> rows = {{std::string(to_string(table.target)) + " model", "frequency", "probability"}};
  for (std::size_t k = 0; k < table.rows.size() && k < limit; ++k) {
    const ModelRow& r = table.rows[k];
    rows.push_back({r.fingerprint, std::to_string(r.frequency), detail::render_number(r.probability)});
  }
  return detail::render_columns(rows);
}

inline std::string render_summary(const SummaryTable& table) {
  std::vector<std::vector<std::string>> rows = {{"parameter", "draws", "mean", "sd", "q025", "q975", "rhat"}};
  for (const SummaryRow& r : table.rows) {
    rows.push_back({r.parameter, std::to_string(r.draws), detail::render_number(r.mean), detail::render_number(r.sd),
                    detail::render_number(r.q025), detail::render_number(r.q975), detail::render_number(r.rhat)});
  }
  std::string head = table.conditioning;
  if (!table.mode_structure.empty()) head += " " + table.mode_structure;
  return head + "\n" + detail::render_columns(rows);
}

}  // namespace bincmp
