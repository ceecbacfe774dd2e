#pragma once

// Metropolis-Hastings within Gibbs with reversible-jump moves for covariate
// selection (birth/death) and dispersion grouping (split/combine).

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "bincmp/error.hpp"
#include "bincmp/likelihood.hpp"
#include "bincmp/model.hpp"
#include "bincmp/numeric.hpp"
#include "bincmp/parallel.hpp"
#include "bincmp/rng.hpp"

namespace bincmp {

enum class Move : std::size_t {
  beta_birth,
  beta_death,
  gamma_birth,
  gamma_death,
  nu_split,
  nu_combine,
  rw_beta,
  rw_gamma,
  rw_gamma0,
  rw_nu,
  rw_nu_gamma0,
  rw_alpha,
  gibbs_sigma_alpha,
};

inline constexpr std::size_t kMoveCount = 13;

inline std::string_view to_string(Move m) {
  static constexpr std::array<std::string_view, kMoveCount> names = {
      "beta-birth", "beta-death", "gamma-birth", "gamma-death", "nu-split",     "nu-combine",       "rw-beta",
      "rw-gamma",   "rw-gamma0",  "rw-nu",       "rw-nu-gamma0", "rw-alpha", "gibbs-sigma-alpha"};
  return names[static_cast<std::size_t>(m)];
}

struct MoveStats {
  std::array<std::uint64_t, kMoveCount> proposed{};
  std::array<std::uint64_t, kMoveCount> accepted{};
  std::array<std::uint64_t, kMoveCount> numerical_rejections{};  // rejected because a normalizer or sum hit its cap

  std::uint64_t total_numerical_rejections() const {
    std::uint64_t n = 0;
    for (auto v : numerical_rejections) n += v;
    return n;
  }

  void record(Move m, bool accept, std::uint64_t n = 1) {
    proposed[static_cast<std::size_t>(m)] += n;
    if (accept) accepted[static_cast<std::size_t>(m)] += n;
  }

  double rate(Move m) const {
    const auto p = proposed[static_cast<std::size_t>(m)];
    return p == 0 ? kNaN : static_cast<double>(accepted[static_cast<std::size_t>(m)]) / static_cast<double>(p);
  }

  MoveStats& operator+=(const MoveStats& o) {
    for (std::size_t i = 0; i < kMoveCount; ++i) {
      proposed[i] += o.proposed[i];
      accepted[i] += o.accepted[i];
      numerical_rejections[i] += o.numerical_rejections[i];
    }
    return *this;
  }
};

struct RwScales {
  double beta = 0.1;
  double gamma = 0.05;
  double gamma0 = 0.1;
  double nu = 0.01;
  double nu_gamma0 = 0.05;  // log-scale step of the joint dispersion/intercept move
  double alpha = 0.1;
};

struct ProgressInfo {
  std::size_t chain = 0;
  std::size_t iteration = 0;
  double log_posterior = kNaN;
  std::string structure;
};

struct SamplerConfig {
  std::size_t iterations = 1000;
  std::size_t burn_in = 500;
  std::size_t thin = 1;
  double zeta_beta = 0.5;   // sd of the birth proposal for detection coefficients
  double zeta_gamma = 0.2;  // sd of the birth proposal for intensity coefficients
  double eta = 0.05;        // half-width of the split perturbation
  RwScales rw_scales;
  bool adapt = true;
  bool joint_nu_gamma0 = true;
  bool update_beta = true;
  bool update_gamma = true;
  bool select_beta = true;
  bool select_gamma = true;
  bool group_nu = true;
  std::uint64_t seed = 1;
  std::size_t workers = 1;
  std::size_t chains = 1;
  bool debug_checks = false;
  bool record_trace = false;
  std::size_t progress_stride = 0;
  std::function<void(const ProgressInfo&)> progress;

  void validate() const {
    require(iterations == 0 || burn_in < iterations, ErrorKind::config_error, "burn_in must be below iterations");
    require(thin >= 1, ErrorKind::config_error, "thin must be at least 1");
    require(zeta_beta > 0.0 && zeta_gamma > 0.0, ErrorKind::config_error, "zeta must be positive");
    require(eta > 0.0, ErrorKind::config_error, "eta must be positive");
    require(chains >= 1 && workers >= 1, ErrorKind::config_error, "chains and workers must be at least 1");
  }
};

/// Canonical text for a full structure, e.g. "{1,2,4}|{6,10}|{1,3,5}{2,4}".
inline std::string structure_fingerprint(const ModelStructure& s) {
  return set_fingerprint(s.beta_active) + "|" + set_fingerprint(s.gamma_active) + "|" + s.nu_partition.fingerprint();
}

struct ChainOutput {
  std::size_t chain = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> iterations;  // sweep index of each retained draw
  std::vector<ChainState> draws;
  std::vector<double> log_posterior;
  MoveStats stats;
  RwScales final_scales;
  // Structure visited after every post-burn-in sweep, when record_trace is set.
  std::vector<std::string> trace_names;
  std::vector<std::uint32_t> trace;
};

namespace detail {

inline double log_choose2(double n) { return std::log(n * (n - 1.0) / 2.0); }

inline std::string describe_state(const ChainState& s) {
  std::ostringstream o;
  o.precision(17);
  o << "structure " << structure_fingerprint(s.structure) << "; beta [" << s.params.beta.transpose()
    << "]; gamma [" << s.params.gamma.transpose() << "]; gamma0 [" << s.params.gamma0.transpose() << "]; nu [";
  for (std::size_t b = 0; b < s.params.nu_values.size(); ++b) o << (b ? " " : "") << s.params.nu_values[b];
  o << "]";
  return o.str();
}

// Replaces the partition and block values, keeping values attached to their blocks.
inline void set_partition(ChainState& s, std::vector<std::pair<std::vector<std::size_t>, double>> blocks) {
  for (auto& [b, v] : blocks) std::sort(b.begin(), b.end());
  std::sort(blocks.begin(), blocks.end(), [](const auto& a, const auto& b) { return a.first.front() < b.first.front(); });
  std::vector<std::vector<std::size_t>> parts;
  s.params.nu_values.clear();
  for (auto& [b, v] : blocks) {
    parts.push_back(b);
    s.params.nu_values.push_back(v);
  }
  s.structure.nu_partition = Partition(std::move(parts));
}

inline std::size_t splittable_blocks(const Partition& p) {
  std::size_t n = 0;
  for (const auto& b : p.blocks()) n += b.size() > 1 ? 1 : 0;
  return n;
}

}  // namespace detail

/// One chain's sampler. The state, evaluator cache and random stream are owned here.
class Chain {
 public:
  Chain(const PosteriorModel& model, const SamplerConfig& config, ChainState init, Rng rng, std::size_t index = 0,
        WorkerPool* pool = nullptr)
      : model_(&model), config_(config), state_(std::move(init)), rng_(std::move(rng)), index_(index),
        evaluator_(model, pool), scales_(config.rw_scales) {
    const std::string problem = check_state(model, state_);
    if (!problem.empty()) fail(ErrorKind::numerical_failure, "invalid initial state: " + problem);
    try {
      evaluator_.reset(state_);
    } catch (const Error& e) {
      fail(ErrorKind::numerical_failure, std::string("initial state (iteration 0): ") + e.what() + "; " +
                                             detail::describe_state(state_));
    }
    log_prior_ = log_prior(model, state_);
    if (!std::isfinite(evaluator_.log_likelihood() + log_prior_)) {
      fail(ErrorKind::numerical_failure,
           "initial log posterior is not finite (iteration 0); " + detail::describe_state(state_));
    }
  }

  const ChainState& state() const { return state_; }
  const MoveStats& stats() const { return stats_; }
  const RwScales& scales() const { return scales_; }
  double log_posterior() const { return evaluator_.log_likelihood() + log_prior_; }

  /// One full sweep in the fixed order.
  void sweep(std::size_t iteration) {
    const bool adapt = config_.adapt && iteration < config_.burn_in;
    const double step = 1.0 / std::pow(static_cast<double>(iteration) + 1.0, 0.6);
    auto tune = [&](double& scale, double rate) {
      if (adapt && std::isfinite(rate)) scale *= std::exp(step * (rate - 0.3));
    };

    if (config_.update_beta) tune(scales_.beta, rw_beta());
    if (config_.update_gamma) tune(scales_.gamma, rw_gamma());
    tune(scales_.gamma0, rw_gamma0());
    tune(scales_.nu, rw_nu());
    if (config_.joint_nu_gamma0) tune(scales_.nu_gamma0, rw_nu_gamma0());
    if (is_spatial(model_->variant) && model_->tau() > 0) {
      tune(scales_.alpha, rw_alpha());
      gibbs_sigma_alpha();
    }
    if (config_.select_beta) rj_variable(true);
    if (config_.select_gamma && uses_covariates(model_->variant)) rj_variable(false);
    if (config_.group_nu) rj_dispersion();

    if (config_.debug_checks) {
      const std::string problem = check_state(*model_, state_);
      if (!problem.empty()) {
        fail(ErrorKind::numerical_failure, "state invariant violated after iteration " + std::to_string(iteration) +
                                               ": " + problem + "; " + detail::describe_state(state_));
      }
    }
  }

  // The moves below are public so tests can drive them one at a time. Each
  // returns its acceptance rate for this call (NaN when nothing was proposed).

  double rw_beta() {
    std::vector<std::size_t> idx;
    for (std::size_t m = 0; m < state_.structure.beta_active.size(); ++m) {
      if (state_.structure.beta_active[m]) idx.push_back(m);
    }
    if (idx.empty()) return kNaN;
    ChainState prop = state_;
    for (std::size_t m : idx) prop.params.beta[static_cast<Eigen::Index>(m)] += scales_.beta * normal();
    const bool ok = metropolis_full(prop, Move::rw_beta);
    return ok ? 1.0 : 0.0;
  }

  double rw_gamma() {
    std::vector<std::size_t> idx;
    for (std::size_t m = 0; m < state_.structure.gamma_active.size(); ++m) {
      if (state_.structure.gamma_active[m]) idx.push_back(m);
    }
    if (idx.empty()) return kNaN;
    ChainState prop = state_;
    for (std::size_t m : idx) prop.params.gamma[static_cast<Eigen::Index>(m)] += scales_.gamma * normal();
    const bool ok = metropolis_full(prop, Move::rw_gamma);
    return ok ? 1.0 : 0.0;
  }

  double rw_gamma0() {
    const std::size_t J = model_->data->J;
    ChainState prop = state_;
    std::vector<std::vector<std::size_t>> groups;
    std::vector<double> prior_delta;
    const Priors& pr = model_->priors;
    for (std::size_t j = 0; j < J; ++j) {
      const auto jj = static_cast<Eigen::Index>(j);
      prop.params.gamma0[jj] += scales_.gamma0 * normal();
      groups.push_back({j});
      prior_delta.push_back(normal_logpdf(prop.params.gamma0[jj], pr.gamma0_mean, pr.gamma0_sd) -
                            normal_logpdf(state_.params.gamma0[jj], pr.gamma0_mean, pr.gamma0_sd));
    }
    const std::vector<char> accepted = metropolis_factorized(prop, groups, prior_delta, Move::rw_gamma0);
    for (std::size_t j = 0; j < J; ++j) {
      if (accepted[j]) state_.params.gamma0[static_cast<Eigen::Index>(j)] = prop.params.gamma0[static_cast<Eigen::Index>(j)];
    }
    log_prior_ = log_prior(*model_, state_);
    return fraction(accepted);
  }

  double rw_nu() {
    const Partition& part = state_.structure.nu_partition;
    ChainState prop = state_;
    std::vector<double> prior_delta;
    for (std::size_t b = 0; b < part.size(); ++b) {
      prop.params.nu_values[b] += scales_.nu * normal();
      prior_delta.push_back(model_->priors.nu_block_log_density(part.block(b), prop.params.nu_values[b]) -
                            model_->priors.nu_block_log_density(part.block(b), state_.params.nu_values[b]));
    }
    const std::vector<char> accepted = metropolis_factorized(prop, part.blocks(), prior_delta, Move::rw_nu);
    for (std::size_t b = 0; b < part.size(); ++b) {
      if (accepted[b]) state_.params.nu_values[b] = prop.params.nu_values[b];
    }
    log_prior_ = log_prior(*model_, state_);
    return fraction(accepted);
  }

  /// Scales a block's dispersion and its occasions' intercepts by a common
  /// factor e^u, which follows the ridge log E(N) ~ gamma0 / nu. The map has
  /// Jacobian e^{u (1 + |block|)}.
  double rw_nu_gamma0() {
    const Partition& part = state_.structure.nu_partition;
    const Priors& pr = model_->priors;
    ChainState prop = state_;
    std::vector<double> prior_delta;
    for (std::size_t b = 0; b < part.size(); ++b) {
      const double u = scales_.nu_gamma0 * normal();
      const double factor = std::exp(u);
      prop.params.nu_values[b] *= factor;
      double delta = model_->priors.nu_block_log_density(part.block(b), prop.params.nu_values[b]) -
                     model_->priors.nu_block_log_density(part.block(b), state_.params.nu_values[b]);
      for (std::size_t j : part.block(b)) {
        const auto jj = static_cast<Eigen::Index>(j);
        prop.params.gamma0[jj] *= factor;
        delta += normal_logpdf(prop.params.gamma0[jj], pr.gamma0_mean, pr.gamma0_sd) -
                 normal_logpdf(state_.params.gamma0[jj], pr.gamma0_mean, pr.gamma0_sd);
      }
      delta += u * (1.0 + static_cast<double>(part.block(b).size()));
      prior_delta.push_back(delta);
    }
    const std::vector<char> accepted = metropolis_factorized(prop, part.blocks(), prior_delta, Move::rw_nu_gamma0);
    for (std::size_t b = 0; b < part.size(); ++b) {
      if (!accepted[b]) continue;
      state_.params.nu_values[b] = prop.params.nu_values[b];
      for (std::size_t j : part.block(b)) {
        const auto jj = static_cast<Eigen::Index>(j);
        state_.params.gamma0[jj] = prop.params.gamma0[jj];
      }
    }
    log_prior_ = log_prior(*model_, state_);
    return fraction(accepted);
  }

  double rw_alpha() {
    const std::size_t J = model_->data->J;
    ChainState prop = state_;
    std::vector<std::vector<std::size_t>> groups;
    std::vector<double> prior_delta;
    for (std::size_t j = 0; j < J; ++j) {
      const auto jj = static_cast<Eigen::Index>(j);
      for (Eigen::Index l = 0; l < prop.params.alpha.rows(); ++l) prop.params.alpha(l, jj) += scales_.alpha * normal();
      groups.push_back({j});
      prior_delta.push_back(spatial_log_prior(*model_, prop.params, j) - spatial_log_prior(*model_, state_.params, j));
    }
    const std::vector<char> accepted = metropolis_factorized(prop, groups, prior_delta, Move::rw_alpha);
    for (std::size_t j = 0; j < J; ++j) {
      if (accepted[j]) state_.params.alpha.col(static_cast<Eigen::Index>(j)) = prop.params.alpha.col(static_cast<Eigen::Index>(j));
    }
    log_prior_ = log_prior(*model_, state_);
    return fraction(accepted);
  }

  /// sigma2_j | alpha_j ~ IG(a + tau/2, b + |alpha_j|^2 / 2).
  void gibbs_sigma_alpha() {
    const double a = model_->priors.sigma_alpha_shape;
    const double b = model_->priors.sigma_alpha_scale;
    for (Eigen::Index j = 0; j < state_.params.alpha.cols(); ++j) {
      const double shape = a + 0.5 * static_cast<double>(state_.params.alpha.rows());
      const double scale = b + 0.5 * state_.params.alpha.col(j).squaredNorm();
      std::gamma_distribution<double> g(shape, 1.0 / scale);
      state_.params.sigma2_alpha[j] = 1.0 / g(rng_);
      stats_.record(Move::gibbs_sigma_alpha, true);
    }
    log_prior_ = log_prior(*model_, state_);
  }

  /// Birth/death on one selectable detection (beta) or intensity (gamma) coefficient.
  void rj_variable(bool beta) {
    ModelStructure& st = state_.structure;
    const std::vector<char>& active = beta ? st.beta_active : st.gamma_active;
    const std::vector<char>& forced = beta ? st.beta_forced : st.gamma_forced;
    std::vector<std::size_t> selectable;
    for (std::size_t m = 0; m < active.size(); ++m) {
      if (!forced[m]) selectable.push_back(m);
    }
    if (selectable.empty()) return;
    const std::size_t m = selectable[std::uniform_int_distribution<std::size_t>(0, selectable.size() - 1)(rng_)];
    const double zeta = beta ? config_.zeta_beta : config_.zeta_gamma;
    const auto mm = static_cast<Eigen::Index>(m);

    ChainState prop = state_;
    Eigen::VectorXd& coef = beta ? prop.params.beta : prop.params.gamma;
    std::vector<char>& prop_active = beta ? prop.structure.beta_active : prop.structure.gamma_active;
    double log_r = 0.0;
    Move move;
    if (active[m]) {
      move = beta ? Move::beta_death : Move::gamma_death;
      log_r = normal_logpdf(coef[mm], 0.0, zeta);
      coef[mm] = 0.0;
      prop_active[m] = 0;
    } else {
      move = beta ? Move::beta_birth : Move::gamma_birth;
      const double b = zeta * normal();
      log_r = -normal_logpdf(b, 0.0, zeta);
      coef[mm] = b;
      prop_active[m] = 1;
    }
    metropolis_full(prop, move, log_r);
  }

  /// Split or combine of dispersion blocks, each chosen with probability 1/2.
  void rj_dispersion() {
    const std::size_t J = model_->data->J;
    if (J < 2) return;
    const Partition& part = state_.structure.nu_partition;
    const double eta = config_.eta;
    if (uniform() < 0.5) {
      const std::size_t n_split = detail::splittable_blocks(part);
      if (n_split == 0) return;
      std::size_t pick = std::uniform_int_distribution<std::size_t>(0, n_split - 1)(rng_);
      std::size_t b = 0;
      for (; b < part.size(); ++b) {
        if (part.block(b).size() > 1 && pick-- == 0) break;
      }
      const std::vector<std::size_t>& block = part.block(b);
      const std::size_t t = block.size();
      const std::uint64_t n_bip = (std::uint64_t{1} << (t - 1)) - 1;
      const std::uint64_t bits = std::uniform_int_distribution<std::uint64_t>(1, n_bip)(rng_);
      std::vector<std::size_t> part_a{block[0]};
      std::vector<std::size_t> part_b;
      for (std::size_t k = 1; k < t; ++k) ((bits >> (k - 1)) & 1 ? part_b : part_a).push_back(block[k]);
      const double eps = eta * (2.0 * uniform() - 1.0);
      const double nu = state_.params.nu_values[b];

      std::vector<std::pair<std::vector<std::size_t>, double>> blocks;
      for (std::size_t c = 0; c < part.size(); ++c) {
        if (c != b) blocks.emplace_back(part.block(c), state_.params.nu_values[c]);
      }
      blocks.emplace_back(part_a, nu + eps);
      blocks.emplace_back(part_b, nu - eps);
      ChainState prop = state_;
      detail::set_partition(prop, std::move(blocks));

      const double log_q_fwd = std::log(0.5) - std::log(static_cast<double>(n_split)) - std::log(static_cast<double>(n_bip));
      const double log_q_rev = std::log(0.5) - detail::log_choose2(static_cast<double>(part.size() + 1));
      const double log_r = log_q_rev - log_q_fwd + std::log(2.0 * eta) + std::log(2.0);
      metropolis_full(prop, Move::nu_split, log_r, &block);
    } else {
      const std::size_t n = part.size();
      if (n < 2) return;
      const std::size_t n_pairs = n * (n - 1) / 2;
      std::size_t pick = std::uniform_int_distribution<std::size_t>(0, n_pairs - 1)(rng_);
      std::size_t a = 0;
      std::size_t c = 1;
      for (a = 0; a < n; ++a) {
        if (pick < n - 1 - a) {
          c = a + 1 + pick;
          break;
        }
        pick -= n - 1 - a;
      }
      const double nu_a = state_.params.nu_values[a];
      const double nu_c = state_.params.nu_values[c];
      const double eps = 0.5 * (nu_a - nu_c);
      std::vector<std::size_t> merged = part.block(a);
      merged.insert(merged.end(), part.block(c).begin(), part.block(c).end());
      std::sort(merged.begin(), merged.end());
      if (std::abs(eps) >= eta) {
        stats_.record(Move::nu_combine, false);
        return;
      }
      std::vector<std::pair<std::vector<std::size_t>, double>> blocks;
      for (std::size_t k = 0; k < n; ++k) {
        if (k != a && k != c) blocks.emplace_back(part.block(k), state_.params.nu_values[k]);
      }
      blocks.emplace_back(merged, 0.5 * (nu_a + nu_c));
      ChainState prop = state_;
      detail::set_partition(prop, std::move(blocks));

      const std::size_t n_split_rev = detail::splittable_blocks(prop.structure.nu_partition);
      const double n_bip = std::ldexp(1.0, static_cast<int>(merged.size()) - 1) - 1.0;
      const double log_q_fwd = std::log(0.5) - detail::log_choose2(static_cast<double>(n));
      const double log_q_rev = std::log(0.5) - std::log(static_cast<double>(n_split_rev)) - std::log(n_bip);
      const double log_r = log_q_rev - log_q_fwd - std::log(2.0 * eta) - std::log(2.0);
      metropolis_full(prop, Move::nu_combine, log_r, &merged);
    }
  }

 private:
  double normal() { return normal_(rng_); }
  double uniform() { return uniform_(rng_); }

  static double fraction(const std::vector<char>& flags) {
    if (flags.empty()) return kNaN;
    double n = 0.0;
    for (char f : flags) n += f ? 1.0 : 0.0;
    return n / static_cast<double>(flags.size());
  }

  /// MH step on a proposal touching all occasions, or only `occasions` when given.
  bool metropolis_full(const ChainState& prop, Move move, double log_extra = 0.0,
                       const std::vector<std::size_t>* occasions = nullptr) {
    const std::size_t J = model_->data->J;
    const double prior = log_prior(*model_, prop);
    if (!(prior > kNegInf)) {
      stats_.record(move, false);
      return false;
    }
    std::vector<char> mask(J, occasions == nullptr ? 1 : 0);
    if (occasions != nullptr) {
      for (std::size_t j : *occasions) mask[j] = 1;
    }
    double delta_ll = 0.0;
    try {
      const std::vector<double>& ll = evaluator_.propose(prop, mask);
      for (std::size_t j = 0; j < J; ++j) {
        if (mask[j]) delta_ll += ll[j] - evaluator_.occasion_log_likelihood(j);
      }
    } catch (const Error&) {
      ++stats_.numerical_rejections[static_cast<std::size_t>(move)];
      stats_.record(move, false);
      return false;
    }
    const double log_alpha = delta_ll + prior - log_prior_ + log_extra;
    const bool accept = std::isfinite(log_alpha) ? std::log(uniform()) < log_alpha : false;
    stats_.record(move, accept);
    if (accept) {
      evaluator_.commit(mask);
      state_ = prop;
      log_prior_ = prior;
    }
    return accept;
  }

  /// Independent MH decisions for disjoint groups of occasions whose likelihood
  /// terms factorize. Returns one flag per group; the evaluator is committed for
  /// accepted groups, but state_ is updated by the caller.
  std::vector<char> metropolis_factorized(const ChainState& prop, const std::vector<std::vector<std::size_t>>& groups,
                                          const std::vector<double>& prior_delta, Move move) {
    const std::size_t J = model_->data->J;
    std::vector<char> accepted(groups.size(), 0);
    std::vector<char> mask(J, 0);
    for (std::size_t g = 0; g < groups.size(); ++g) {
      if (prior_delta[g] > kNegInf) {
        for (std::size_t j : groups[g]) mask[j] = 1;
      }
    }
    std::vector<double> group_ll(groups.size(), kNaN);
    try {
      const std::vector<double>& ll = evaluator_.propose(prop, mask);
      for (std::size_t g = 0; g < groups.size(); ++g) {
        if (prior_delta[g] == kNegInf) continue;
        double d = 0.0;
        for (std::size_t j : groups[g]) d += ll[j] - evaluator_.occasion_log_likelihood(j);
        group_ll[g] = d;
      }
    } catch (const Error&) {
      // Retry group by group so a failing group does not block the others.
      for (std::size_t g = 0; g < groups.size(); ++g) {
        if (prior_delta[g] == kNegInf) continue;
        std::vector<char> one(J, 0);
        for (std::size_t j : groups[g]) one[j] = 1;
        try {
          const std::vector<double>& ll = evaluator_.propose(prop, one);
          double d = 0.0;
          for (std::size_t j : groups[g]) d += ll[j] - evaluator_.occasion_log_likelihood(j);
          group_ll[g] = d;
        } catch (const Error&) {
          ++stats_.numerical_rejections[static_cast<std::size_t>(move)];
        }
      }
      // Scratch holds only the last group now; re-evaluate the survivors together.
      std::fill(mask.begin(), mask.end(), 0);
      for (std::size_t g = 0; g < groups.size(); ++g) {
        if (std::isfinite(group_ll[g])) {
          for (std::size_t j : groups[g]) mask[j] = 1;
        }
      }
      evaluator_.propose(prop, mask);
    }
    std::vector<char> commit(J, 0);
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const double log_alpha = group_ll[g] + prior_delta[g];
      const bool accept = std::isfinite(log_alpha) ? std::log(uniform()) < log_alpha : false;
      stats_.record(move, accept);
      accepted[g] = accept ? 1 : 0;
      if (accept) {
        for (std::size_t j : groups[g]) commit[j] = 1;
      }
    }
    evaluator_.commit(commit);
    return accepted;
  }

  const PosteriorModel* model_;
  SamplerConfig config_;
  ChainState state_;
  Rng rng_;
  std::size_t index_;
  PosteriorEvaluator evaluator_;
  RwScales scales_;
  MoveStats stats_;
  double log_prior_ = 0.0;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Forced-only structure with a single dispersion block at 1 (clamped to the
/// bounds), intercepts matched to the mean maximum count at p = 1/2, and a
/// small random perturbation so chains start apart.
inline ChainState initial_state(const PosteriorModel& model, const std::vector<char>& beta_forced,
                                const std::vector<char>& gamma_forced, Rng& rng, double jitter = 0.1) {
  ChainState s = forced_only_state(model, beta_forced, gamma_forced);
  const SurveyDataset& d = *model.data;
  std::normal_distribution<double> z(0.0, 1.0);
  for (std::size_t j = 0; j < d.J; ++j) {
    double total = 0.0;
    const std::size_t n = d.occasion_begin[j + 1] - d.occasion_begin[j];
    for (std::size_t c = d.occasion_begin[j]; c < d.occasion_begin[j + 1]; ++c) total += d.cells[c].y_max;
    const double mean = n > 0 ? total / static_cast<double>(n) : 0.0;
    s.params.gamma0[static_cast<Eigen::Index>(j)] = std::log(std::max(mean, 0.5) / 0.5) + jitter * z(rng);
  }
  for (std::size_t m = 0; m < d.P; ++m) {
    if (s.structure.beta_active[m]) s.params.beta[static_cast<Eigen::Index>(m)] = jitter * z(rng);
  }
  for (std::size_t m = 0; m < s.structure.gamma_active.size(); ++m) {
    if (s.structure.gamma_active[m]) s.params.gamma[static_cast<Eigen::Index>(m)] = jitter * z(rng);
  }
  return s;
}

/// Runs one chain from init; draws are kept for sweeps burn_in, burn_in + thin, ...
inline ChainOutput run_chain(const PosteriorModel& model, const SamplerConfig& config, const ChainState& init,
                             Rng rng, std::size_t index = 0, WorkerPool* pool = nullptr) {
  config.validate();
  ChainOutput out;
  out.chain = index;
  Chain chain(model, config, init, std::move(rng), index, pool);
  std::map<std::string, std::uint32_t> trace_ids;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    chain.sweep(it);
    if (it >= config.burn_in) {
      if ((it - config.burn_in) % config.thin == 0) {
        out.iterations.push_back(it);
        out.draws.push_back(chain.state());
        out.log_posterior.push_back(chain.log_posterior());
      }
      if (config.record_trace) {
        const std::string key = structure_fingerprint(chain.state().structure);
        auto [pos, inserted] = trace_ids.emplace(key, static_cast<std::uint32_t>(out.trace_names.size()));
        if (inserted) out.trace_names.push_back(key);
        out.trace.push_back(pos->second);
      }
    }
    if (config.progress && config.progress_stride > 0 && (it + 1) % config.progress_stride == 0) {
      config.progress({index, it + 1, chain.log_posterior(), structure_fingerprint(chain.state().structure)});
    }
  }
  out.stats = chain.stats();
  out.final_scales = chain.scales();
  return out;
}

}  // namespace bincmp
