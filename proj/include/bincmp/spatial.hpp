#pragma once

// Low-rank thin-plate spline basis for the spatial intensity component.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bincmp/error.hpp"
#include "bincmp/numeric.hpp"

namespace bincmp {

using Coord = std::array<double, 2>;

inline double distance(const Coord& a, const Coord& b) { return std::hypot(a[0] - b[0], a[1] - b[1]); }

/// C(r) = |r|^2 log|r| (smoothness v = 2), with C(0) = 0.
inline double tps_kernel(double dx, double dy) {
  const double r2 = dx * dx + dy * dy;
  if (r2 == 0.0) return 0.0;
  return 0.5 * r2 * std::log(r2);
}

inline double tps_kernel(const Coord& a, const Coord& b) { return tps_kernel(a[0] - b[0], a[1] - b[1]); }

struct KnotSet {
  std::vector<Coord> knots;
  std::size_t tau() const { return knots.size(); }
};

/// max{20, min(G/4, 150)}
inline std::size_t default_knot_count(std::size_t sites) {
  return std::max<std::size_t>(20, std::min<std::size_t>(sites / 4, 150));
}

namespace detail {

struct Coverage {
  double max_distance;
  double mean_distance;

  bool better_than(const Coverage& other) const {
    constexpr double eps = 1e-12;
    if (max_distance < other.max_distance - eps) return true;
    if (max_distance > other.max_distance + eps) return false;
    return mean_distance < other.mean_distance - eps;
  }
};

inline Coverage coverage(const std::vector<Coord>& points, const std::vector<std::size_t>& chosen) {
  Coverage c{0.0, 0.0};
  for (const Coord& p : points) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k : chosen) best = std::min(best, distance(p, points[k]));
    c.max_distance = std::max(c.max_distance, best);
    c.mean_distance += best;
  }
  c.mean_distance /= static_cast<double>(points.size());
  return c;
}

}  // namespace detail

/// Maximum distance from any site to its nearest knot.
inline double coverage_radius(const std::vector<Coord>& sites, const std::vector<Coord>& knots) {
  double worst = 0.0;
  for (const Coord& s : sites) {
    double best = std::numeric_limits<double>::infinity();
    for (const Coord& k : knots) best = std::min(best, distance(s, k));
    worst = std::max(worst, best);
  }
  return worst;
}

/// Space-filling knot subset of the distinct site locations: farthest-point
/// initialization from a random start, then pairwise swaps that lower the
/// coverage radius (ties broken by the mean nearest-knot distance).
template <class Rng>
KnotSet select_knots(const std::vector<Coord>& sites, std::size_t tau, Rng& rng, int max_sweeps = 100) {
  std::vector<Coord> candidates;
  {
    std::set<Coord> seen;
    for (const Coord& s : sites) {
      if (seen.insert(s).second) candidates.push_back(s);
    }
  }
  if (tau == 0 || tau > candidates.size()) {
    std::ostringstream msg;
    msg << "cannot place " << tau << " knots on " << candidates.size() << " distinct sites";
    fail(ErrorKind::too_few_sites, msg.str());
  }

  const std::size_t n = candidates.size();
  std::vector<std::size_t> chosen;
  std::vector<char> in_set(n, 0);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::size_t next = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  while (chosen.size() < tau) {
    chosen.push_back(next);
    in_set[next] = 1;
    for (std::size_t i = 0; i < n; ++i) nearest[i] = std::min(nearest[i], distance(candidates[i], candidates[next]));
    double far = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!in_set[i] && nearest[i] > far) {
        far = nearest[i];
        next = i;
      }
    }
  }

  detail::Coverage current = detail::coverage(candidates, chosen);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool improved = false;
    for (std::size_t slot = 0; slot < chosen.size(); ++slot) {
      for (std::size_t c = 0; c < n; ++c) {
        if (in_set[c]) continue;
        const std::size_t old = chosen[slot];
        chosen[slot] = c;
        const detail::Coverage trial = detail::coverage(candidates, chosen);
        if (trial.better_than(current)) {
          current = trial;
          in_set[old] = 0;
          in_set[c] = 1;
          improved = true;
        } else {
          chosen[slot] = old;
        }
      }
    }
    if (!improved) break;
  }

  std::sort(chosen.begin(), chosen.end());
  KnotSet out;
  for (std::size_t k : chosen) out.knots.push_back(candidates[k]);
  return out;
}

struct SpatialBasis {
  Eigen::MatrixXd phi;             // G x tau, C(s_i - kappa_l)
  Eigen::MatrixXd omega;           // tau x tau, C(kappa_l - kappa_l')
  Eigen::MatrixXd omega_inv_sqrt;  // symmetric, from |eigenvalues| of omega
  Eigen::MatrixXd phi_star;        // phi * omega_inv_sqrt
  Eigen::MatrixXd phi_star_orth;   // phi_star projected off the covariate column space
  std::vector<std::string> warnings;

  std::size_t tau() const { return static_cast<std::size_t>(phi.cols()); }
};

/// Symmetric inverse square root built from the absolute eigenvalues; eigenvalues
/// below 1e-10 of the largest magnitude are dropped. The TPS Omega has zero trace,
/// so it is indefinite and this equals (Omega^2)^{-1/4}.
inline Eigen::MatrixXd inverse_sqrt_abs(const Eigen::MatrixXd& m, std::size_t* dropped = nullptr) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  const Eigen::VectorXd& values = eig.eigenvalues();
  const double largest = values.cwiseAbs().maxCoeff();
  Eigen::VectorXd scale(values.size());
  std::size_t count = 0;
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    const double a = std::abs(values[i]);
    if (largest == 0.0 || a < 1e-10 * largest) {
      scale[i] = 0.0;
      ++count;
    } else {
      scale[i] = 1.0 / std::sqrt(a);
    }
  }
  if (dropped != nullptr) *dropped = count;
  return eig.eigenvectors() * scale.asDiagonal() * eig.eigenvectors().transpose();
}

/// Pseudo-inverse of |m| for symmetric m, with the same eigenvalue floor.
inline Eigen::MatrixXd inverse_abs(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  const Eigen::VectorXd& values = eig.eigenvalues();
  const double largest = values.cwiseAbs().maxCoeff();
  Eigen::VectorXd scale(values.size());
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    const double a = std::abs(values[i]);
    scale[i] = (largest == 0.0 || a < 1e-10 * largest) ? 0.0 : 1.0 / a;
  }
  return eig.eigenvectors() * scale.asDiagonal() * eig.eigenvectors().transpose();
}

/// (I - W (W'W)^+ W') applied to m, via the left singular vectors spanning col(W).
inline Eigen::MatrixXd project_out(const Eigen::MatrixXd& design, const Eigen::MatrixXd& m,
                                   std::vector<std::string>* warnings = nullptr) {
  if (design.cols() == 0) return m;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(design, Eigen::ComputeThinU);
  const Eigen::VectorXd& sv = svd.singularValues();
  const double tol = std::max(design.rows(), design.cols()) * std::numeric_limits<double>::epsilon() *
                     (sv.size() > 0 ? sv[0] : 0.0);
  Eigen::Index rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv[i] > tol) ++rank;
  }
  if (rank < design.cols() && warnings != nullptr) {
    std::ostringstream msg;
    msg << "rank-deficient-covariates: design has rank " << rank << " < " << design.cols()
        << " columns; projecting with the pseudo-inverse";
    warnings->push_back(msg.str());
  }
  const Eigen::MatrixXd u = svd.matrixU().leftCols(rank);
  return m - u * (u.transpose() * m);
}

template <class Kernel>
SpatialBasis build_basis(const std::vector<Coord>& sites, const KnotSet& knots, const Eigen::MatrixXd& design,
                         Kernel kernel) {
  const std::size_t g = sites.size();
  const std::size_t tau = knots.tau();
  require(tau >= 1, ErrorKind::invalid_parameter, "basis needs at least one knot");
  require(design.rows() == 0 || static_cast<std::size_t>(design.rows()) == g, ErrorKind::inconsistent_dimensions,
          "covariate design rows must match the number of sites");
  for (std::size_t a = 0; a < tau; ++a) {
    for (std::size_t b = a + 1; b < tau; ++b) {
      if (knots.knots[a] == knots.knots[b]) fail(ErrorKind::singular_omega, "duplicate knot locations");
    }
  }

  SpatialBasis out;
  out.phi.resize(static_cast<Eigen::Index>(g), static_cast<Eigen::Index>(tau));
  for (std::size_t i = 0; i < g; ++i) {
    for (std::size_t l = 0; l < tau; ++l) out.phi(i, l) = kernel(sites[i], knots.knots[l]);
  }
  out.omega.resize(static_cast<Eigen::Index>(tau), static_cast<Eigen::Index>(tau));
  for (std::size_t a = 0; a < tau; ++a) {
    out.omega(a, a) = kernel(knots.knots[a], knots.knots[a]);
    for (std::size_t b = a + 1; b < tau; ++b) {
      const double v = kernel(knots.knots[a], knots.knots[b]);
      out.omega(a, b) = v;
      out.omega(b, a) = v;
    }
  }
  std::size_t dropped = 0;
  out.omega_inv_sqrt = inverse_sqrt_abs(out.omega, &dropped);
  if (dropped > 0) {
    std::ostringstream msg;
    msg << "omega: " << dropped << " eigenvalue(s) below the 1e-10 relative floor were dropped";
    out.warnings.push_back(msg.str());
  }
  out.phi_star = out.phi * out.omega_inv_sqrt;
  out.phi_star_orth = project_out(design, out.phi_star, &out.warnings);
  return out;
}

inline SpatialBasis build_basis(const std::vector<Coord>& sites, const KnotSet& knots,
                                const Eigen::MatrixXd& design) {
  return build_basis(sites, knots, design, [](const Coord& a, const Coord& b) { return tps_kernel(a, b); });
}

inline void write_knots(const std::string& path, const KnotSet& knots) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::io_error, "cannot write knot file " + path);
  out << "x,y\n";
  for (const Coord& k : knots.knots) out << format_double(k[0]) << ',' << format_double(k[1]) << '\n';
}

inline KnotSet read_knots(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io_error, "cannot read knot file " + path);
  KnotSet knots;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1 && line == "x,y") continue;
    const auto comma = line.find(',');
    Coord c{};
    if (comma == std::string::npos || !parse_double(std::string_view(line).substr(0, comma), c[0]) ||
        !parse_double(std::string_view(line).substr(comma + 1), c[1])) {
      fail(ErrorKind::parse_error, path + ":" + std::to_string(line_no) + ": expected 'x,y'");
    }
    knots.knots.push_back(c);
  }
  return knots;
}

}  // namespace bincmp
