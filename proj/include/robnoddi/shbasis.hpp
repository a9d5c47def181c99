#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <span>
#include <vector>

#include "robnoddi/errors.hpp"
#include "robnoddi/sphere.hpp"

namespace robnoddi {

/// Number of real even-order SH coefficients up to order L: (L+1)(L+2)/2.
inline int num_coefficients(int order) {
  if (order < 0 || order % 2 != 0)
    throw DomainError("num_coefficients: order must be even and non-negative "
                      "(diffusion signals are antipodally symmetric)");
  return (order + 1) * (order + 2) / 2;
}

/// Column of the (l, m) harmonic in the fixed enumeration: l even ascending,
/// m from -l to l.
inline int sh_index(int l, int m) { return l * (l + 1) / 2 + m; }

/// Degree l of a given column.
inline int sh_degree_of_column(int col) {
  int l = 0;
  while (sh_index(l, l) < col)
    l += 2;
  return l;
}

namespace detail {

/// Normalized associated Legendre values sqrt((2l+1)/(4pi) (l-m)!/(l+m)!)
/// P_l^m(x) for fixed m and l = m..lmax (ascending), Condon-Shortley phase
/// included. Standard stable upward recurrence.
inline void legendre_normalized(std::vector<double>& out, int lmax, int m, double x) {
  out.assign(static_cast<std::size_t>(lmax) + 1, 0.0);
  const double x2 = x * x;
  if (m > 0 && x2 >= 1.0)
    return; // P_l^m vanishes at the poles for m > 0
  double seed = 0.28209479177387814; // 1/(2 sqrt(pi))
  if (m > 0) {
    double prod = 1.0;
    for (int k = 2 * m; k > 1; k -= 2)
      prod *= (1.0 - x2) * (k - 1) / k;
    seed *= std::sqrt((2.0 * m + 1.0) * prod);
    if (m & 1)
      seed = -seed;
  }
  out[static_cast<std::size_t>(m)] = seed;
  if (lmax == m)
    return;
  double f = std::sqrt(2.0 * m + 3.0);
  out[static_cast<std::size_t>(m) + 1] = x * f * seed;
  for (int n = m + 2; n <= lmax; ++n) {
    double v = x * out[static_cast<std::size_t>(n) - 1] -
               out[static_cast<std::size_t>(n) - 2] / f;
    f = std::sqrt((4.0 * n * n - 1.0) / (static_cast<double>(n) * n - static_cast<double>(m) * m));
    out[static_cast<std::size_t>(n)] = v * f;
  }
}

} // namespace detail

/// Real symmetric-modified SH basis sampled at a direction set. Columns follow
/// sh_index ordering; the basis is orthonormal on the sphere.
struct ShBasisMatrix {
  Eigen::MatrixXd entries; // n_dirs x n_coeffs
  int order = 0;
  std::vector<UnitDirection> dirs;

  int n_dirs() const { return static_cast<int>(entries.rows()); }
  int n_coeffs() const { return static_cast<int>(entries.cols()); }
};

inline ShBasisMatrix eval_basis(std::span<const UnitDirection> dirs, int order) {
  const int nc = num_coefficients(order);
  if (dirs.empty())
    throw DomainError("eval_basis: need at least one direction");
  ShBasisMatrix basis;
  basis.order = order;
  basis.dirs.assign(dirs.begin(), dirs.end());
  basis.entries.resize(static_cast<Eigen::Index>(dirs.size()), nc);
  std::vector<double> al;
  constexpr double sqrt2 = 1.4142135623730950488;
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    const SphericalAngles a = cart_to_sph(dirs[i]);
    const double ct = std::cos(a.theta);
    detail::legendre_normalized(al, order, 0, ct);
    for (int l = 0; l <= order; l += 2)
      basis.entries(static_cast<Eigen::Index>(i), sh_index(l, 0)) =
          al[static_cast<std::size_t>(l)];
    for (int m = 1; m <= order; ++m) {
      detail::legendre_normalized(al, order, m, ct);
      const double cm = std::cos(m * a.phi);
      const double sm = std::sin(m * a.phi);
      for (int l = (m % 2 == 0) ? m : m + 1; l <= order; l += 2) {
        const double v = sqrt2 * al[static_cast<std::size_t>(l)];
        basis.entries(static_cast<Eigen::Index>(i), sh_index(l, m)) = v * cm;
        basis.entries(static_cast<Eigen::Index>(i), sh_index(l, -m)) = v * sm;
      }
    }
  }
  return basis;
}

struct FitSettings {
  int order = 6;
  double lambda = 6e-3; // Laplace-Beltrami regularization weight

  void validate() const {
    if (order < 0 || order > 8 || order % 2 != 0)
      throw DomainError("FitSettings: order must be in {0,2,4,6,8}");
    if (!(lambda >= 0.0))
      throw DomainError("FitSettings: lambda must be non-negative");
  }
};

/// Per-shell continuous representation of the normalized signal.
struct ShCoefficients {
  Eigen::VectorXd values;
  int order = 0;
  double shell_bvalue = 0.0;
};

/// Precomputed regularized least-squares solver for one direction set. Holds
/// the Cholesky factor of (B^T B + lambda R^2) with R = diag(l(l+1)), so
/// per-voxel fits are a matrix-vector product plus two triangular solves.
class ShellFitter {
public:
  ShellFitter(std::span<const UnitDirection> dirs, const FitSettings& settings,
              double shell_bvalue = 0.0)
      : basis_(eval_basis(dirs, settings.order)), settings_(settings),
        shell_bvalue_(shell_bvalue) {
    settings.validate();
    const int nc = basis_.n_coeffs();
    if (settings.lambda == 0.0 && basis_.n_dirs() < nc)
      throw DomainError("ShellFitter: rank-deficient fit (fewer directions than "
                        "coefficients); set lambda > 0");
    normal_ = basis_.entries.transpose() * basis_.entries;
    for (int j = 0; j < nc; ++j) {
      const double l = sh_degree_of_column(j);
      const double r = l * (l + 1.0);
      normal_(j, j) += settings.lambda * r * r;
    }
    llt_.compute(normal_);
    if (llt_.info() != Eigen::Success)
      throw DomainError("ShellFitter: rank-deficient normal matrix; set lambda > 0");
  }

  const ShBasisMatrix& basis() const { return basis_; }
  const FitSettings& settings() const { return settings_; }

  ShCoefficients fit(const Eigen::VectorXd& signals) const {
    if (signals.size() != basis_.entries.rows())
      throw DimensionError("ShellFitter::fit: signal count does not match directions");
    if (!signals.allFinite())
      throw DomainError("ShellFitter::fit: non-finite signal value");
    ShCoefficients c;
    c.order = basis_.order;
    c.shell_bvalue = shell_bvalue_;
    const Eigen::VectorXd rhs = basis_.entries.transpose() * signals;
    c.values = llt_.solve(rhs);
    // one step of iterative refinement; the squared conditioning of the
    // normal equations otherwise costs a couple of digits on minimal schemes
    c.values += llt_.solve(rhs - normal_ * c.values);
    return c;
  }

private:
  ShBasisMatrix basis_;
  FitSettings settings_;
  double shell_bvalue_;
  Eigen::MatrixXd normal_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
};

/// One-shot regularized fit of signals sampled at the basis directions.
inline ShCoefficients fit_sh(const Eigen::VectorXd& signals,
                             const ShBasisMatrix& basis,
                             const FitSettings& settings) {
  if (settings.order != basis.order)
    throw DimensionError("fit_sh: settings order does not match basis order");
  ShellFitter fitter(basis.dirs, settings);
  return fitter.fit(signals);
}

/// Evaluates the continuous representation at arbitrary new directions.
inline Eigen::VectorXd resample(const ShCoefficients& coeffs,
                                std::span<const UnitDirection> new_dirs) {
  if (!coeffs.values.allFinite())
    throw DomainError("resample: non-finite coefficients");
  const ShBasisMatrix basis = eval_basis(new_dirs, coeffs.order);
  return basis.entries * coeffs.values;
}

} // namespace robnoddi
