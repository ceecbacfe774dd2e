#pragma once

// Post-processing of chain output: convergence diagnostics, model tables,
// parameter summaries and Rao-Blackwellized abundance maps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bincmp/error.hpp"
#include "bincmp/likelihood.hpp"
#include "bincmp/model.hpp"
#include "bincmp/numeric.hpp"
#include "bincmp/parallel.hpp"
#include "bincmp/sampler.hpp"

namespace bincmp {

/// Potential scale reduction sqrt(V/W), where W is the mean within-sequence
/// variance and V the variance of all draws pooled (both with divisor equal to
/// the number of draws). V = W + var(sequence means), so the value is at least
/// one and equals one when every sequence has the same mean. With split = true
/// each chain is halved first (the middle draw of an odd-length chain is dropped).
inline double gelman_rubin(const std::vector<std::vector<double>>& chains, bool split = true) {
  if (chains.size() < 2) fail(ErrorKind::insufficient_chains, "R-hat needs at least two chains");
  const std::size_t n = chains.front().size();
  for (const auto& c : chains) {
    if (c.size() != n) fail(ErrorKind::insufficient_chains, "R-hat needs chains of equal length");
  }
  if (n < 10) fail(ErrorKind::insufficient_chains, "R-hat needs at least 10 draws per chain");
  std::vector<std::span<const double>> seqs;
  for (const auto& c : chains) {
    if (split) {
      const std::size_t half = n / 2;
      seqs.emplace_back(c.data(), half);
      seqs.emplace_back(c.data() + (n - half), half);
    } else {
      seqs.emplace_back(c.data(), n);
    }
  }
  const double len = static_cast<double>(seqs.front().size());
  std::vector<double> means;
  double within = 0.0;
  for (const auto& s : seqs) {
    CompensatedSum sum;
    for (double v : s) sum.add(v);
    const double m = sum.value() / len;
    CompensatedSum ss;
    for (double v : s) ss.add((v - m) * (v - m));
    means.push_back(m);
    within += ss.value() / len;
  }
  within /= static_cast<double>(seqs.size());
  CompensatedSum msum;
  for (double m : means) msum.add(m);
  const double grand = msum.value() / static_cast<double>(means.size());
  CompensatedSum bss;
  for (double m : means) bss.add((m - grand) * (m - grand));
  const double between = bss.value() / static_cast<double>(means.size());
  const double pooled = within + between;
  if (within == 0.0) return pooled == 0.0 ? 1.0 : kInf;
  return std::sqrt(pooled / within);
}

enum class ModelTarget { beta, gamma, nu, joint };

inline std::string_view to_string(ModelTarget t) {
  switch (t) {
    case ModelTarget::beta: return "beta";
    case ModelTarget::gamma: return "gamma";
    case ModelTarget::nu: return "nu";
    case ModelTarget::joint: return "joint";
  }
  return "joint";
}

inline std::string target_fingerprint(const ModelStructure& s, ModelTarget t) {
  switch (t) {
    case ModelTarget::beta: return set_fingerprint(s.beta_active);
    case ModelTarget::gamma: return set_fingerprint(s.gamma_active);
    case ModelTarget::nu: return s.nu_partition.fingerprint();
    case ModelTarget::joint: return structure_fingerprint(s);
  }
  return {};
}

struct ModelRow {
  std::string fingerprint;
  std::uint64_t frequency = 0;
  double probability = 0.0;
};

struct ModelTable {
  ModelTarget target = ModelTarget::joint;
  std::vector<ModelRow> rows;  // by decreasing frequency, ties by fingerprint

  const ModelRow* mode() const { return rows.empty() ? nullptr : &rows.front(); }

  double probability_of(const std::string& fp) const {
    for (const auto& r : rows) {
      if (r.fingerprint == fp) return r.probability;
    }
    return 0.0;
  }
};

inline ModelTable model_probabilities(const std::vector<ChainOutput>& outputs, ModelTarget target) {
  std::map<std::string, std::uint64_t> counts;
  std::uint64_t total = 0;
  for (const auto& o : outputs) {
    for (const auto& d : o.draws) {
      ++counts[target_fingerprint(d.structure, target)];
      ++total;
    }
  }
  ModelTable table;
  table.target = target;
  for (const auto& [fp, n] : counts) {
    table.rows.push_back({fp, n, static_cast<double>(n) / static_cast<double>(total)});
  }
  std::sort(table.rows.begin(), table.rows.end(), [](const ModelRow& a, const ModelRow& b) {
    if (a.frequency != b.frequency) return a.frequency > b.frequency;
    return a.fingerprint < b.fingerprint;
  });
  return table;
}

/// Type 7 sample quantile of sorted values.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return kNaN;
  const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct SummaryRow {
  std::string parameter;
  std::size_t draws = 0;
  double mean = kNaN;
  double sd = kNaN;
  double q025 = kNaN;
  double q975 = kNaN;
  double rhat = kNaN;  // NaN when it cannot be computed
};

struct SummaryTable {
  std::string conditioning;
  std::string mode_structure;  // set for mode-model summaries
  std::vector<SummaryRow> rows;

  const SummaryRow* find(const std::string& name) const {
    for (const auto& r : rows) {
      if (r.parameter == name) return &r;
    }
    return nullptr;
  }
};

/// Summary of one scalar given per-chain draw sequences.
inline SummaryRow summarize_scalar(const std::string& name, const std::vector<std::vector<double>>& per_chain) {
  SummaryRow row;
  row.parameter = name;
  std::vector<double> all;
  for (const auto& c : per_chain) all.insert(all.end(), c.begin(), c.end());
  row.draws = all.size();
  if (all.empty()) return row;
  CompensatedSum s;
  for (double v : all) s.add(v);
  row.mean = s.value() / static_cast<double>(all.size());
  CompensatedSum ss;
  for (double v : all) ss.add((v - row.mean) * (v - row.mean));
  row.sd = all.size() > 1 ? std::sqrt(ss.value() / static_cast<double>(all.size() - 1)) : 0.0;
  std::sort(all.begin(), all.end());
  row.q025 = quantile_sorted(all, 0.025);
  row.q975 = quantile_sorted(all, 0.975);

  std::size_t shortest = per_chain.empty() ? 0 : per_chain.front().size();
  for (const auto& c : per_chain) shortest = std::min(shortest, c.size());
  if (per_chain.size() >= 2 && shortest >= 10) {
    std::vector<std::vector<double>> trimmed;
    for (const auto& c : per_chain) trimmed.emplace_back(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(shortest));
    row.rhat = gelman_rubin(trimmed, true);
  }
  return row;
}

enum class Conditioning { all_draws, mode_model };

inline constexpr std::size_t kMinModeDraws = 100;

struct SummaryNames {
  std::vector<std::string> beta;
  std::vector<std::string> gamma;
};

inline SummaryNames summary_names(const SurveyDataset& d) {
  SummaryNames n;
  for (const auto& b : d.beta_names) n.beta.push_back("beta[" + b + "]");
  for (const auto& g : d.gamma_names) n.gamma.push_back("gamma[" + g + "]");
  return n;
}

/// Posterior summaries. All-draws summaries average over models, counting an
/// inactive coefficient as 0. Mode-model summaries use only draws whose three
/// structure components all equal their marginal modes, report only the
/// coefficients active there, and give one dispersion row per mode block.
inline SummaryTable summarize(const std::vector<ChainOutput>& outputs, const SurveyDataset& data,
                              Conditioning conditioning) {
  const SummaryNames names = summary_names(data);
  SummaryTable table;
  table.conditioning = conditioning == Conditioning::all_draws ? "all-draws" : "mode-model";
  const std::size_t chains = outputs.size();
  std::vector<std::vector<const ChainState*>> selected(chains);

  std::optional<ModelStructure> mode;
  if (conditioning == Conditioning::mode_model) {
    const ModelTable mb = model_probabilities(outputs, ModelTarget::beta);
    const ModelTable mg = model_probabilities(outputs, ModelTarget::gamma);
    const ModelTable mn = model_probabilities(outputs, ModelTarget::nu);
    if (mb.rows.empty()) fail(ErrorKind::too_few_mode_draws, "no retained draws");
    for (std::size_t c = 0; c < chains; ++c) {
      for (const auto& d : outputs[c].draws) {
        if (set_fingerprint(d.structure.beta_active) == mb.rows[0].fingerprint &&
            set_fingerprint(d.structure.gamma_active) == mg.rows[0].fingerprint &&
            d.structure.nu_partition.fingerprint() == mn.rows[0].fingerprint) {
          if (!mode) mode = d.structure;
          selected[c].push_back(&d);
        }
      }
    }
    std::size_t n = 0;
    for (const auto& s : selected) n += s.size();
    if (n < kMinModeDraws) {
      fail(ErrorKind::too_few_mode_draws, "the posterior mode model has " + std::to_string(n) + " draws (need " +
                                              std::to_string(kMinModeDraws) + ")");
    }
    table.mode_structure = structure_fingerprint(*mode);
  } else {
    for (std::size_t c = 0; c < chains; ++c) {
      for (const auto& d : outputs[c].draws) selected[c].push_back(&d);
    }
  }

  auto collect = [&](auto&& get) {
    std::vector<std::vector<double>> per_chain(chains);
    for (std::size_t c = 0; c < chains; ++c) {
      for (const ChainState* s : selected[c]) per_chain[c].push_back(get(*s));
    }
    return per_chain;
  };

  for (std::size_t m = 0; m < data.P; ++m) {
    if (mode && !mode->beta_active[m]) continue;
    const auto mm = static_cast<Eigen::Index>(m);
    table.rows.push_back(summarize_scalar(names.beta[m], collect([&](const ChainState& s) { return s.params.beta[mm]; })));
  }
  const std::size_t M = outputs.empty() || outputs.front().draws.empty()
                            ? 0
                            : static_cast<std::size_t>(outputs.front().draws.front().params.gamma.size());
  for (std::size_t m = 0; m < M; ++m) {
    if (mode && !mode->gamma_active[m]) continue;
    const auto mm = static_cast<Eigen::Index>(m);
    table.rows.push_back(summarize_scalar(names.gamma[m], collect([&](const ChainState& s) { return s.params.gamma[mm]; })));
  }
  for (std::size_t j = 0; j < data.J; ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    table.rows.push_back(summarize_scalar("gamma0[" + std::to_string(j + 1) + "]",
                                          collect([&](const ChainState& s) { return s.params.gamma0[jj]; })));
  }
  if (mode) {
    for (std::size_t b = 0; b < mode->nu_partition.size(); ++b) {
      std::string label = "nu";
      for (std::size_t j : mode->nu_partition.block(b)) label += "_" + std::to_string(j + 1);
      table.rows.push_back(summarize_scalar(label, collect([&](const ChainState& s) { return s.params.nu_values[b]; })));
    }
  } else {
    for (std::size_t j = 0; j < data.J; ++j) {
      table.rows.push_back(summarize_scalar("nu[" + std::to_string(j + 1) + "]",
                                            collect([&](const ChainState& s) { return s.nu(j); })));
    }
  }
  const std::size_t spatial_j = outputs.empty() || outputs.front().draws.empty()
                                    ? 0
                                    : static_cast<std::size_t>(outputs.front().draws.front().params.sigma2_alpha.size());
  for (std::size_t j = 0; j < spatial_j; ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    table.rows.push_back(summarize_scalar("sigma2_alpha[" + std::to_string(j + 1) + "]",
                                          collect([&](const ChainState& s) { return s.params.sigma2_alpha[jj]; })));
  }
  return table;
}

struct AbundanceRow {
  std::size_t site = 0;
  std::size_t occasion = 0;  // 0-based
  double mean = 0.0;
  double sd = 0.0;
};

/// Per (site, occasion) posterior mean and sd of N averaged over every retained
/// draw: E[N] = avg E[N | y, theta], Var[N] = avg(Var + E^2) - E[N]^2.
inline std::vector<AbundanceRow> abundance_summary(const std::vector<ChainOutput>& outputs,
                                                   const PosteriorModel& model, WorkerPool* pool = nullptr) {
  const SurveyDataset& d = *model.data;
  std::vector<const ChainState*> draws;
  for (const auto& o : outputs) {
    for (const auto& s : o.draws) draws.push_back(&s);
  }
  std::vector<AbundanceRow> rows(d.G * d.J);
  std::vector<std::exception_ptr> errors(rows.size());
  auto work = [&](std::size_t idx) {
    const std::size_t j = idx / d.G;
    const std::size_t i = idx % d.G;
    AbundanceRow& row = rows[idx];
    row.site = i;
    row.occasion = j;
    if (draws.empty()) {
      row.mean = kNaN;
      row.sd = kNaN;
      return;
    }
    try {
      const std::ptrdiff_t c = d.cell_index(i, j);
      std::vector<double> eta;
      CompensatedSum first;
      CompensatedSum second;
      for (const ChainState* s : draws) {
        const AbundancePmf f = abundance_pmf(model, *s, i, j);
        AbundanceMoments m;
        if (c >= 0) {
          const Cell& cell = d.cells[static_cast<std::size_t>(c)];
          detail::cell_eta(cell, s->params.beta, eta);
          m = abundance_moments(cell.y, eta, f, model.tail_mass);
        } else {
          m = abundance_moments({}, {}, f, model.tail_mass);
        }
        first.add(m.mean);
        second.add(m.variance + m.mean * m.mean);
      }
      const double n = static_cast<double>(draws.size());
      row.mean = first.value() / n;
      row.sd = std::sqrt(std::max(0.0, second.value() / n - row.mean * row.mean));
    } catch (...) {
      errors[idx] = std::current_exception();
    }
  };
  if (pool != nullptr) {
    pool->run(rows.size(), work);
  } else {
    for (std::size_t k = 0; k < rows.size(); ++k) work(k);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return rows;
}

/// Same layout as abundance_summary, from one draw of N per retained draw.
inline std::vector<AbundanceRow> abundance_by_sampling(const std::vector<ChainOutput>& outputs,
                                                       const PosteriorModel& model, Rng& rng) {
  const SurveyDataset& d = *model.data;
  std::vector<AbundanceRow> rows(d.G * d.J);
  std::vector<CompensatedSum> first(rows.size());
  std::vector<CompensatedSum> second(rows.size());
  std::size_t n = 0;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (const auto& o : outputs) {
    for (const auto& s : o.draws) {
      ++n;
      for (std::size_t j = 0; j < d.J; ++j) {
        for (std::size_t i = 0; i < d.G; ++i) {
          const AbundancePosterior post = latent_abundance_posterior(model, s, i, j, model.tail_mass);
          double acc = 0.0;
          const double target = u(rng);
          std::size_t k = 0;
          for (; k + 1 < post.probabilities.size(); ++k) {
            acc += post.probabilities[k];
            if (target <= acc) break;
          }
          const double value = static_cast<double>(post.lower + static_cast<std::int64_t>(k));
          first[j * d.G + i].add(value);
          second[j * d.G + i].add(value * value);
        }
      }
    }
  }
  for (std::size_t idx = 0; idx < rows.size(); ++idx) {
    rows[idx].site = idx % d.G;
    rows[idx].occasion = idx / d.G;
    rows[idx].mean = first[idx].value() / static_cast<double>(n);
    rows[idx].sd = std::sqrt(std::max(0.0, second[idx].value() / static_cast<double>(n) - rows[idx].mean * rows[idx].mean));
  }
  return rows;
}

}  // namespace bincmp
