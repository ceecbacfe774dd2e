#pragma once

// Marginal cell likelihood with the latent abundance summed out, the joint log
// posterior, and a cached evaluator used by the sampler.

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <exception>
#include <map>
#include <memory>
#include <span>
#include <sstream>
#include <vector>

#include "bincmp/cmp.hpp"
#include "bincmp/count_dist.hpp"
#include "bincmp/error.hpp"
#include "bincmp/model.hpp"
#include "bincmp/numeric.hpp"
#include "bincmp/parallel.hpp"

namespace bincmp {

inline constexpr std::int64_t kMaxCellTerms = 10'000'000;

struct CellLikelihoodResult {
  double log_marginal = kNegInf;
  std::int64_t truncation_upper = 0;
  double tail_bound = 0.0;  // certified bound on the omitted mass relative to the kept mass
};

struct AbundanceMoments {
  double mean = 0.0;
  double variance = 0.0;
};

namespace detail {

// Sums T(N) = prod_k Bin(y_k; N, p_k) f(N) for N >= y_max. Consecutive terms are
// linked by T(N+1)/T(N) = prod_k (N+1)/(N+1-y_k) * prod_k (1-p_k) * f(N+1)/f(N),
// whose binomial part decreases in N, so the ratio at N bounds every later one.
// The visitor sees each (N, term) relative to a running scale and is told via
// rescale(factor) whenever the scale changes.
template <class Visitor>
CellLikelihoodResult sum_cell(std::span<const int> y, std::span<const double> eta, const AbundancePmf& f,
                              double tail_mass, Visitor& visit) {
  int y_max = 0;
  for (int v : y) y_max = std::max(y_max, v);
  const double n0 = static_cast<double>(y_max);

  double log_t0 = f.log_pmf(n0);
  double log_q = 0.0;
  for (std::size_t k = 0; k < y.size(); ++k) {
    const double lp = log_logistic(eta[k]);
    const double lq = log_logistic(-eta[k]);
    log_q += lq;
    log_t0 += log_choose(n0, y[k]);
    if (y[k] > 0) log_t0 += y[k] * lp;
    if (n0 > y[k]) log_t0 += (n0 - y[k]) * lq;
  }
  CellLikelihoodResult out;
  out.truncation_upper = y_max;
  if (!(log_t0 > kNegInf)) return out;
  const double q = std::exp(log_q);

  auto cap_failure = [&] {
    std::ostringstream msg;
    msg << "cell abundance sum did not converge within " << kMaxCellTerms << " terms (y_max=" << y_max
        << ", lambda=" << f.lambda() << ", nu=" << f.nu() << ")";
    fail(ErrorKind::truncation_failure, msg.str());
  };
  // The ratio bound never increases with n, so if it is still >= 1 at the cap
  // the loop below cannot stop before it.
  {
    const double n_cap = n0 + static_cast<double>(kMaxCellTerms);
    double b = 1.0;
    for (int v : y) b *= (n_cap + 1.0) / (n_cap + 1.0 - v);
    if (b * q * f.ratio_bound(n_cap, f.ratio(n_cap)) >= 1.0) cap_failure();
  }

  constexpr double kBig = 1e200;
  double scale = 0.0;
  double t = 1.0;
  double sum = 1.0;
  visit(n0, t);
  double n = n0;
  for (;;) {
    double b = 1.0;
    for (int v : y) b *= (n + 1.0) / (n + 1.0 - v);
    const double fr = f.ratio(n);
    const double r = b * q * fr;
    const double rb = b * q * f.ratio_bound(n, fr);
    if (rb < 1.0) {
      const double tail = t * rb / (1.0 - rb);
      if (tail <= tail_mass * sum && t <= tail_mass * sum) {
        out.tail_bound = tail / sum;
        break;
      }
    }
    t *= r;
    n += 1.0;
    sum += t;
    visit(n, t);
    if (t > kBig) {
      t /= kBig;
      sum /= kBig;
      scale += std::log(kBig);
      visit.rescale(1.0 / kBig);
    }
    if (n - n0 > static_cast<double>(kMaxCellTerms)) cap_failure();
  }
  out.truncation_upper = static_cast<std::int64_t>(n);
  out.log_marginal = log_t0 + scale + std::log(sum);
  return out;
}

struct NoVisit {
  void operator()(double, double) const {}
  void rescale(double) const {}
};

// Weighted Welford update on d = N - n0.
struct MomentVisitor {
  double n0 = 0.0;
  double weight = 0.0;
  double mean = 0.0;
  double m2 = 0.0;

  void operator()(double n, double t) {
    if (t == 0.0) return;
    const double d = n - n0;
    weight += t;
    const double delta = d - mean;
    mean += t / weight * delta;
    m2 += t * delta * (d - mean);
  }

  void rescale(double factor) {
    weight *= factor;
    m2 *= factor;
  }
};

struct TermVisitor {
  std::vector<double> terms;

  void operator()(double, double t) { terms.push_back(t); }
  void rescale(double factor) {
    for (double& v : terms) v *= factor;
  }
};

}  // namespace detail

/// log P(y | p, f) for one cell, given the detection linear predictors eta_k.
inline CellLikelihoodResult cell_log_marginal(std::span<const int> y, std::span<const double> eta,
                                              const AbundancePmf& f, double tail_mass = 1e-10) {
  require(!y.empty(), ErrorKind::empty_cell, "cell has no observed visits");
  require(y.size() == eta.size(), ErrorKind::inconsistent_dimensions, "one linear predictor per visit");
  detail::NoVisit none;
  return detail::sum_cell(y, eta, f, tail_mass, none);
}

struct AbundancePosterior {
  std::int64_t lower = 0;
  std::vector<double> probabilities;  // P(N = lower + k | y)
  double mean = 0.0;
  double variance = 0.0;
};

/// Normalized P(N | y) on [y_max, U]; with no visits this is the prior.
inline AbundancePosterior abundance_posterior(std::span<const int> y, std::span<const double> eta,
                                              const AbundancePmf& f, double tail_mass = 1e-10) {
  AbundancePosterior out;
  detail::TermVisitor visitor;
  detail::sum_cell(y, eta, f, tail_mass, visitor);
  const std::vector<double>& terms = visitor.terms;
  int y_max = 0;
  for (int v : y) y_max = std::max(y_max, v);
  out.lower = y_max;
  CompensatedSum total;
  for (double v : terms) total.add(v);
  const double z = total.value();
  out.probabilities.reserve(terms.size());
  CompensatedSum first;
  for (std::size_t k = 0; k < terms.size(); ++k) {
    const double p = terms[k] / z;
    out.probabilities.push_back(p);
    first.add(static_cast<double>(k) * p);
  }
  CompensatedSum second;
  for (std::size_t k = 0; k < terms.size(); ++k) {
    const double d = static_cast<double>(k) - first.value();
    second.add(d * d * out.probabilities[k]);
  }
  out.mean = static_cast<double>(y_max) + first.value();
  out.variance = second.value();
  return out;
}

/// Posterior mean and variance of N without storing the distribution.
inline AbundanceMoments abundance_moments(std::span<const int> y, std::span<const double> eta,
                                          const AbundancePmf& f, double tail_mass = 1e-10) {
  int y_max = 0;
  for (int v : y) y_max = std::max(y_max, v);
  detail::MomentVisitor mv;
  mv.n0 = y_max;
  detail::sum_cell(y, eta, f, tail_mass, mv);
  return {static_cast<double>(y_max) + mv.mean, mv.weight > 0.0 ? mv.m2 / mv.weight : 0.0};
}

namespace detail {

inline void cell_eta(const Cell& c, const Eigen::VectorXd& beta, std::vector<double>& eta) {
  const std::size_t P = static_cast<std::size_t>(beta.size());
  eta.resize(c.visits());
  for (std::size_t k = 0; k < c.visits(); ++k) {
    double e = 0.0;
    const double* x = c.x.data() + k * P;
    for (std::size_t m = 0; m < P; ++m) e += beta[static_cast<Eigen::Index>(m)] * x[m];
    eta[k] = e;
  }
}

inline AbundancePmf make_pmf(const PosteriorModel& model, double lambda, double nu,
                             const std::shared_ptr<const NuPowers>& pw) {
  if (model.family != Family::cmp) return AbundancePmf(model.family, lambda, nu, model.z_rel_tol, model.z_policy);
  const CmpParams params(lambda, nu);
  const ZEvaluation z = pw ? log_z(params, model.z_rel_tol, model.z_policy, *pw)
                           : log_z(params, model.z_rel_tol, model.z_policy);
  return AbundancePmf(lambda, nu, z, pw);
}

}  // namespace detail

inline AbundancePmf abundance_pmf(const PosteriorModel& model, const ChainState& s, std::size_t site,
                                  std::size_t occasion) {
  return detail::make_pmf(model, intensity(model, s.params, site, occasion), s.nu(occasion), nullptr);
}

inline CellLikelihoodResult cell_log_marginal(const PosteriorModel& model, const ChainState& s, std::size_t site,
                                              std::size_t occasion, double tail_mass) {
  const SurveyDataset& d = *model.data;
  const std::ptrdiff_t idx = d.cell_index(site, occasion);
  require(idx >= 0, ErrorKind::empty_cell, "cell has no observed visits");
  const Cell& c = d.cells[static_cast<std::size_t>(idx)];
  std::vector<double> eta;
  detail::cell_eta(c, s.params.beta, eta);
  return cell_log_marginal(c.y, eta, abundance_pmf(model, s, site, occasion), tail_mass);
}

/// Posterior of N_ij given the cell's counts; the prior when the cell is empty.
inline AbundancePosterior latent_abundance_posterior(const PosteriorModel& model, const ChainState& s,
                                                     std::size_t site, std::size_t occasion, double tail_mass) {
  const SurveyDataset& d = *model.data;
  const std::ptrdiff_t idx = d.cell_index(site, occasion);
  const AbundancePmf f = abundance_pmf(model, s, site, occasion);
  if (idx < 0) return abundance_posterior({}, {}, f, tail_mass);
  const Cell& c = d.cells[static_cast<std::size_t>(idx)];
  std::vector<double> eta;
  detail::cell_eta(c, s.params.beta, eta);
  return abundance_posterior(c.y, eta, f, tail_mass);
}

/// log N(alpha_j | 0, sigma2_j I) + log IG(sigma2_j).
inline double spatial_log_prior(const PosteriorModel& model, const ParameterState& p, std::size_t j) {
  const auto jj = static_cast<Eigen::Index>(j);
  const double s2 = p.sigma2_alpha[jj];
  if (!(s2 > 0.0)) return kNegInf;
  const double sd = std::sqrt(s2);
  double lp = model.priors.sigma2_log_density(s2);
  for (Eigen::Index l = 0; l < p.alpha.rows(); ++l) lp += normal_logpdf(p.alpha(l, jj), 0.0, sd);
  return lp;
}

/// Sum of the coefficient, dispersion and spatial log priors. The model prior is uniform.
inline double log_prior(const PosteriorModel& model, const ChainState& s) {
  const Priors& pr = model.priors;
  const ModelStructure& st = s.structure;
  const ParameterState& p = s.params;
  double lp = 0.0;
  for (std::size_t m = 0; m < st.beta_active.size(); ++m) {
    if (st.beta_active[m]) lp += normal_logpdf(p.beta[static_cast<Eigen::Index>(m)], pr.beta_mean, pr.beta_sd);
  }
  for (std::size_t m = 0; m < st.gamma_active.size(); ++m) {
    if (st.gamma_active[m]) lp += normal_logpdf(p.gamma[static_cast<Eigen::Index>(m)], pr.gamma_mean, pr.gamma_sd);
  }
  for (Eigen::Index j = 0; j < p.gamma0.size(); ++j) lp += normal_logpdf(p.gamma0[j], pr.gamma0_mean, pr.gamma0_sd);
  for (std::size_t b = 0; b < st.nu_partition.size(); ++b) {
    lp += pr.nu_block_log_density(st.nu_partition.block(b), p.nu_values[b]);
  }
  if (is_spatial(model.variant)) {
    for (Eigen::Index j = 0; j < p.alpha.cols(); ++j) lp += spatial_log_prior(model, p, static_cast<std::size_t>(j));
  }
  return lp;
}

/// Cached per-cell likelihood terms for one chain. Proposals are evaluated into
/// scratch storage for a subset of occasions and committed per occasion. Cell
/// terms are reduced by a fixed pairwise tree within each occasion and then
/// summed over occasions in order, so values do not depend on the worker count.
class PosteriorEvaluator {
 public:
  explicit PosteriorEvaluator(const PosteriorModel& model, WorkerPool* pool = nullptr)
      : model_(&model), pool_(pool) {
    const SurveyDataset& d = *model.data;
    current_.resize(d.cells.size());
    proposed_.resize(d.cells.size());
    errors_.resize(d.cells.size());
    current_occ_.assign(d.J, 0.0);
    proposed_occ_.assign(d.J, 0.0);
    terms_.resize(d.cells.size());
  }

  const PosteriorModel& model() const { return *model_; }

  /// Evaluates every cell of s and makes the result current.
  void reset(const ChainState& s) {
    const std::vector<char> all(model_->data->J, 1);
    propose(s, all);
    commit(all);
  }

  double log_likelihood() const {
    double total = 0.0;
    for (double v : current_occ_) total += v;
    return total;
  }

  double occasion_log_likelihood(std::size_t j) const { return current_occ_[j]; }

  /// Evaluates the occasions flagged in mask under s. Throws the error of the
  /// lowest failing cell; current values are untouched either way.
  const std::vector<double>& propose(const ChainState& s, const std::vector<char>& mask) {
    const SurveyDataset& d = *model_->data;
    const auto block = s.structure.nu_partition.block_index(d.J);
    std::vector<std::shared_ptr<const NuPowers>> powers(d.J);
    for (std::size_t j = 0; j < d.J; ++j) {
      if (mask[j] && model_->family == Family::cmp) powers[j] = nu_powers(s.params.nu_values[block[j]]);
    }
    tasks_.clear();
    for (std::size_t j = 0; j < d.J; ++j) {
      if (!mask[j]) continue;
      for (std::size_t c = d.occasion_begin[j]; c < d.occasion_begin[j + 1]; ++c) tasks_.push_back(c);
    }
    // Tasks above a known failure are skipped; the lowest failing task is still
    // evaluated, so the reported error does not depend on the worker count.
    std::atomic<std::size_t> first_failed{tasks_.size()};
    auto work = [&](std::size_t t) {
      if (t > first_failed.load(std::memory_order_relaxed)) return;
      const std::size_t c = tasks_[t];
      try {
        const Cell& cell = d.cells[c];
        const double nu = s.params.nu_values[block[cell.occasion]];
        evaluate_cell(s, cell, nu, powers[cell.occasion], current_[c], proposed_[c]);
        errors_[c] = nullptr;
      } catch (...) {
        errors_[c] = std::current_exception();
        std::size_t seen = first_failed.load(std::memory_order_relaxed);
        while (t < seen && !first_failed.compare_exchange_weak(seen, t, std::memory_order_relaxed)) {
        }
      }
    };
    if (pool_ != nullptr) {
      pool_->run(tasks_.size(), work);
    } else {
      for (std::size_t t = 0; t < tasks_.size(); ++t) work(t);
    }
    if (first_failed.load() < tasks_.size()) {
      std::exception_ptr e = errors_[tasks_[first_failed.load()]];
      for (std::size_t c : tasks_) errors_[c] = nullptr;
      std::rethrow_exception(e);
    }
    for (std::size_t j = 0; j < d.J; ++j) {
      if (!mask[j]) continue;
      const std::size_t b = d.occasion_begin[j];
      const std::size_t e = d.occasion_begin[j + 1];
      for (std::size_t c = b; c < e; ++c) terms_[c] = proposed_[c].log_lik;
      proposed_occ_[j] = tree_sum(std::span<const double>(terms_.data() + b, e - b));
    }
    return proposed_occ_;
  }

  const std::vector<double>& proposed_occasions() const { return proposed_occ_; }

  /// Makes the proposed values of the flagged occasions current.
  void commit(const std::vector<char>& mask) {
    const SurveyDataset& d = *model_->data;
    for (std::size_t j = 0; j < d.J; ++j) {
      if (!mask[j]) continue;
      for (std::size_t c = d.occasion_begin[j]; c < d.occasion_begin[j + 1]; ++c) current_[c] = proposed_[c];
      current_occ_[j] = proposed_occ_[j];
    }
  }

 private:
  struct CellCache {
    double log_lik = kNaN;
    double lambda = kNaN;
    double nu = kNaN;
    ZEvaluation z{};
  };

  std::shared_ptr<const NuPowers> nu_powers(double nu) {
    const auto key = std::bit_cast<std::uint64_t>(nu);
    if (auto it = power_cache_.find(key); it != power_cache_.end()) return it->second;
    if (power_cache_.size() > 64) power_cache_.clear();
    auto table = std::make_shared<const NuPowers>(nu, 1024);
    power_cache_.emplace(key, table);
    return table;
  }

  void evaluate_cell(const ChainState& s, const Cell& cell, double nu, const std::shared_ptr<const NuPowers>& pw,
                     const CellCache& cur, CellCache& out) {
    const double lambda = intensity(*model_, s.params, cell.site, cell.occasion);
    thread_local std::vector<double> eta;
    detail::cell_eta(cell, s.params.beta, eta);
    out.lambda = lambda;
    out.nu = nu;
    detail::NoVisit none;
    if (model_->family == Family::cmp) {
      if (std::bit_cast<std::uint64_t>(lambda) == std::bit_cast<std::uint64_t>(cur.lambda) &&
          std::bit_cast<std::uint64_t>(nu) == std::bit_cast<std::uint64_t>(cur.nu)) {
        out.z = cur.z;
      } else {
        out.z = log_z(CmpParams(lambda, nu), model_->z_rel_tol, model_->z_policy, *pw);
      }
      const AbundancePmf f(lambda, nu, out.z, pw);
      out.log_lik = detail::sum_cell(cell.y, eta, f, model_->tail_mass, none).log_marginal;
    } else {
      const AbundancePmf f(model_->family, lambda, nu);
      out.log_lik = detail::sum_cell(cell.y, eta, f, model_->tail_mass, none).log_marginal;
    }
  }

  const PosteriorModel* model_;
  WorkerPool* pool_;
  std::vector<CellCache> current_;
  std::vector<CellCache> proposed_;
  std::vector<std::exception_ptr> errors_;
  std::vector<double> current_occ_;
  std::vector<double> proposed_occ_;
  std::vector<double> terms_;
  std::vector<std::size_t> tasks_;
  std::map<std::uint64_t, std::shared_ptr<const NuPowers>> power_cache_;
};

/// Log likelihood over observed cells plus log_prior.
inline double joint_log_posterior(const PosteriorModel& model, const ChainState& s, WorkerPool* pool = nullptr) {
  PosteriorEvaluator ev(model, pool);
  ev.reset(s);
  return ev.log_likelihood() + log_prior(model, s);
}

}  // namespace bincmp
