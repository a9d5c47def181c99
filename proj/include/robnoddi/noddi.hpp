#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "robnoddi/errors.hpp"
#include "robnoddi/rng.hpp"
#include "robnoddi/sphere.hpp"

namespace robnoddi {

constexpr double four_pi = 12.566370614359172953850573533118;

/// Intrinsic diffusivities, mm^2/s. Conventional in-vivo values.
struct TissueConstants {
  double d_par = 1.7e-3;
  double d_iso = 3.0e-3;

  void validate() const {
    if (!(d_par > 0.0) || !(d_iso > 0.0))
      throw DomainError("TissueConstants: diffusivities must be positive");
  }
};

/// Per-voxel microstructure parameters: intracellular volume fraction,
/// isotropic volume fraction, orientation dispersion index, mean fiber
/// orientation.
struct NoddiParams {
  double vic = 0.5;
  double viso = 0.0;
  double od = 0.5;
  UnitDirection mu{0.0, 0.0, 1.0};

  void validate() const {
    if (!(vic >= 0.0 && vic <= 1.0))
      throw DomainError("NoddiParams: vic must be in [0,1]");
    if (!(viso >= 0.0 && viso <= 1.0))
      throw DomainError("NoddiParams: viso must be in [0,1]");
    if (!(od > 0.0 && od <= 1.0))
      throw DomainError("NoddiParams: od must be in (0,1]");
    check_unit(mu, "NoddiParams");
  }
};

struct WatsonDistribution {
  UnitDirection mu{0.0, 0.0, 1.0};
  double kappa = 0.0;
};

/// kappa = 1/tan(od*pi/2); inverse of od = (2/pi) atan(1/kappa).
inline double od_to_kappa(double od) {
  if (!(od > 0.0 && od <= 1.0))
    throw DomainError("od_to_kappa: od must be in (0,1]");
  constexpr double half_pi = 1.5707963267948966192;
  return 1.0 / std::tan(od * half_pi);
}

inline double kappa_to_od(double kappa) {
  if (!(kappa >= 0.0))
    throw DomainError("kappa_to_od: kappa must be non-negative");
  constexpr double two_over_pi = 0.63661977236758134308;
  return two_over_pi * std::atan2(1.0, kappa);
}

/// Confluent hypergeometric M(1/2, 3/2, kappa) = sum_n kappa^n / (n! (2n+1)),
/// the Watson normalization integral (equals the 1D integral of e^{k t^2} on
/// [0,1]). Truncated power series, term ratio cutoff 1e-14.
inline double kummer_m_half(double kappa) {
  if (!(kappa >= 0.0))
    throw DomainError("kummer_m_half: kappa must be non-negative");
  double term = 1.0;
  double sum = 1.0;
  for (int n = 0; n < 2000; ++n) {
    term *= kappa * (2.0 * n + 1.0) / ((n + 1.0) * (2.0 * n + 3.0));
    sum += term;
    if (term < 1e-14 * sum)
      break;
  }
  return sum;
}

/// Watson density (per steradian): exp(kappa (mu.n)^2) / (4 pi M(1/2,3/2,kappa)).
inline double watson_pdf(const UnitDirection& n, const WatsonDistribution& w) {
  check_unit(n, "watson_pdf");
  if (!(w.kappa >= 0.0))
    throw DomainError("watson_pdf: kappa must be non-negative");
  const double t = w.mu.dot(n);
  return std::exp(w.kappa * t * t) / (four_pi * kummer_m_half(w.kappa));
}

/// Mean squared alignment tau = <(mu.n)^2> under Watson; in [1/3, 1),
/// increasing in kappa. Series ratio of the two 1D moment integrals; a
/// Dawson-style asymptotic expansion takes over where the series terms
/// would overflow.
inline double watson_tau(double kappa) {
  if (!(kappa >= 0.0))
    throw DomainError("watson_tau: kappa must be non-negative");
  if (kappa > 500.0) {
    // tau = (2k/(1+delta) - 1)/(2k) with delta from the Dawson asymptotic
    const double delta = 1.0 / (2.0 * kappa) + 3.0 / (4.0 * kappa * kappa) +
                         15.0 / (8.0 * kappa * kappa * kappa);
    return (2.0 * kappa / (1.0 + delta) - 1.0) / (2.0 * kappa);
  }
  // s1 = sum k^n/(n!(2n+1)), s3 = sum k^n/(n!(2n+3))
  double p = 1.0; // kappa^n / n!
  double s1 = 1.0;
  double s3 = 1.0 / 3.0;
  for (int n = 0; n < 2000; ++n) {
    p *= kappa / (n + 1.0);
    const double t1 = p / (2.0 * n + 3.0);
    const double t3 = p / (2.0 * n + 5.0);
    s1 += t1;
    s3 += t3;
    if (t1 < 1e-15 * s1)
      break;
  }
  return s3 / s1;
}

/// Spherical quadrature nodes from a subdivided icosahedron. Subdivision
/// level k yields 10*4^k + 2 nodes (k=4: 2562). Node weights are the
/// spherical Voronoi-style vertex areas (one third of each incident
/// triangle's spherical area) and sum to 4 pi; flat equal weights bias
/// concentrated integrands by ~1e-3, which breaks the oracle tolerances.
struct QuadratureGrid {
  std::vector<UnitDirection> points;
  std::vector<double> weights;
};

inline QuadratureGrid icosphere_grid(int subdivisions) {
  if (subdivisions < 0 || subdivisions > 7)
    throw DomainError("icosphere_grid: subdivision level out of range");
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<UnitDirection> verts = {
      make_direction(-1, phi, 0),  make_direction(1, phi, 0),
      make_direction(-1, -phi, 0), make_direction(1, -phi, 0),
      make_direction(0, -1, phi),  make_direction(0, 1, phi),
      make_direction(0, -1, -phi), make_direction(0, 1, -phi),
      make_direction(phi, 0, -1),  make_direction(phi, 0, 1),
      make_direction(-phi, 0, -1), make_direction(-phi, 0, 1)};
  std::vector<std::array<int, 3>> faces = {
      {0, 11, 5},  {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
      {1, 5, 9},   {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
      {3, 9, 4},   {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
      {4, 9, 5},   {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end())
        return it->second;
      const auto& va = verts[static_cast<std::size_t>(a)];
      const auto& vb = verts[static_cast<std::size_t>(b)];
      verts.push_back(make_direction(va.x + vb.x, va.y + vb.y, va.z + vb.z));
      const int idx = static_cast<int>(verts.size()) - 1;
      midpoint.emplace(key, idx);
      return idx;
    };
    std::vector<std::array<int, 3>> next;
    next.reserve(faces.size() * 4);
    for (const auto& f : faces) {
      const int ab = mid(f[0], f[1]);
      const int bc = mid(f[1], f[2]);
      const int ca = mid(f[2], f[0]);
      next.push_back({f[0], ab, ca});
      next.push_back({f[1], bc, ab});
      next.push_back({f[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    faces = std::move(next);
  }
  QuadratureGrid grid;
  grid.points = std::move(verts);
  grid.weights.assign(grid.points.size(), 0.0);
  // l'Huilier's theorem for the spherical excess of each face; each vertex
  // collects one third of its incident face areas
  auto arc = [&](int a, int b) {
    const double d = std::clamp(grid.points[static_cast<std::size_t>(a)].dot(
                                    grid.points[static_cast<std::size_t>(b)]),
                                -1.0, 1.0);
    return std::acos(d);
  };
  for (const auto& f : faces) {
    const double a = arc(f[1], f[2]);
    const double b = arc(f[0], f[2]);
    const double c = arc(f[0], f[1]);
    const double s = 0.5 * (a + b + c);
    const double t = std::sqrt(std::max(0.0, std::tan(0.5 * s) * std::tan(0.5 * (s - a)) *
                                                 std::tan(0.5 * (s - b)) *
                                                 std::tan(0.5 * (s - c))));
    const double area = 4.0 * std::atan(t);
    for (int v : f)
      grid.weights[static_cast<std::size_t>(v)] += area / 3.0;
  }
  double total = 0.0;
  for (double w : grid.weights)
    total += w;
  const double scale = four_pi / total;
  for (double& w : grid.weights)
    w *= scale;
  return grid;
}

namespace detail {

/// Watson pdf times quadrature weight at every node; reused across all
/// gradient directions of a voxel.
inline std::vector<double> watson_quad_weights(const UnitDirection& mu, double kappa,
                                               const QuadratureGrid& quad) {
  const double norm = four_pi * kummer_m_half(kappa);
  std::vector<double> w(quad.points.size());
  for (std::size_t q = 0; q < quad.points.size(); ++q) {
    const double t = mu.dot(quad.points[q]);
    w[q] = std::exp(kappa * t * t) / norm * quad.weights[q];
  }
  return w;
}

/// Stick attenuation exp(-c (g.n_q)^2) along the grid for one direction.
inline void fill_stick_row(double c, const UnitDirection& g,
                           const QuadratureGrid& quad, double* row) {
  for (std::size_t q = 0; q < quad.points.size(); ++q) {
    const double t = g.dot(quad.points[q]);
    row[q] = std::exp(-c * t * t);
  }
}

inline double weighted_sum(const double* w, const double* e, std::size_t n) {
  double acc = 0.0;
  for (std::size_t q = 0; q < n; ++q)
    acc += w[q] * e[q];
  return acc;
}

} // namespace detail

/// Voxel-level precomputation shared by every gradient direction: Watson
/// quadrature weights, tau, and the volume fractions.
struct VoxelForwardModel {
  NoddiParams params;
  TissueConstants consts;
  double kappa = 0.0;
  double tau = 1.0 / 3.0;
  std::vector<double> watson_weights;
};

inline VoxelForwardModel make_voxel_model(const NoddiParams& p,
                                          const TissueConstants& consts,
                                          const QuadratureGrid& quad) {
  p.validate();
  consts.validate();
  if (quad.points.size() < 100)
    throw DomainError("make_voxel_model: quadrature grid smaller than 100 points");
  VoxelForwardModel m;
  m.params = p;
  m.consts = consts;
  m.kappa = od_to_kappa(p.od);
  m.tau = watson_tau(m.kappa);
  m.watson_weights = detail::watson_quad_weights(p.mu, m.kappa, quad);
  return m;
}

/// Normalized signal for one (b, g) given the voxel model and the stick
/// attenuation row for g (as produced by fill_stick_row / a shared table).
inline double signal_from_model(const VoxelForwardModel& m, double bvalue,
                                const UnitDirection& g, const double* stick_row) {
  const double a_ic = detail::weighted_sum(m.watson_weights.data(), stick_row,
                                           m.watson_weights.size());
  const double d_par = m.consts.d_par;
  const double d_perp = d_par * (1.0 - m.params.vic); // tortuosity
  const double d_ax = d_perp + (d_par - d_perp) * m.tau;
  const double d_rad = d_perp + (d_par - d_perp) * (1.0 - m.tau) / 2.0;
  const double gm = g.dot(m.params.mu);
  const double a_ec = std::exp(-bvalue * (d_rad + (d_ax - d_rad) * gm * gm));
  const double a_iso = std::exp(-bvalue * m.consts.d_iso);
  const double vic = m.params.vic, viso = m.params.viso;
  return (1.0 - viso) * (vic * a_ic + (1.0 - vic) * a_ec) + viso * a_iso;
}

/// NODDI forward model at a single direction: Watson-dispersed stick
/// (spherical quadrature), tortuosity tensor, isotropic ball.
inline double synthesize_signal(const NoddiParams& p, const TissueConstants& consts,
                                double bvalue, const UnitDirection& g,
                                const QuadratureGrid& quad) {
  if (!(bvalue > 0.0))
    throw DomainError("synthesize_signal: b-value must be positive");
  check_unit(g, "synthesize_signal");
  const VoxelForwardModel m = make_voxel_model(p, consts, quad);
  std::vector<double> row(quad.points.size());
  detail::fill_stick_row(bvalue * consts.d_par, g, quad, row.data());
  return signal_from_model(m, bvalue, g, row.data());
}

/// Magnitude (Rician) noise: sqrt((s + e1)^2 + e2^2) with e ~ N(0, 1/snr^2).
/// snr is relative to a unit b0 signal; +infinity leaves the signal untouched.
inline double add_rician_noise(double signal, double snr, Rng& rng) {
  if (!(signal >= 0.0))
    throw DomainError("add_rician_noise: signal must be non-negative");
  if (!(snr > 0.0))
    throw DomainError("add_rician_noise: snr must be positive");
  const double sigma = 1.0 / snr;
  const double e1 = sigma * rng.normal();
  const double e2 = sigma * rng.normal();
  const double re = signal + e1;
  return std::sqrt(re * re + e2 * e2);
}

} // namespace robnoddi
