#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "robnoddi/errors.hpp"
#include "robnoddi/rng.hpp"

namespace robnoddi {

struct UnitDirection {
  double x = 0.0;
  double y = 0.0;
  double z = 1.0;

  double dot(const UnitDirection& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm() const { return std::sqrt(x * x + y * y + z * z); }
  UnitDirection negated() const { return {-x, -y, -z}; }
};

/// Builds a unit direction from an arbitrary nonzero vector. Vectors already
/// unit within 1e-12 pass through unchanged, so parsing a serialized unit
/// vector is idempotent.
inline UnitDirection make_direction(double x, double y, double z) {
  const double n = std::sqrt(x * x + y * y + z * z);
  if (!(n > 1e-12) || !std::isfinite(n))
    throw DomainError("make_direction: vector has (near-)zero or non-finite norm");
  if (std::abs(n - 1.0) < 1e-12)
    return {x, y, z};
  return {x / n, y / n, z / n};
}

inline void check_unit(const UnitDirection& d, const char* who) {
  if (std::abs(d.norm() - 1.0) > 1e-6)
    throw DomainError(std::string(who) + ": direction is not unit-norm");
}

/// Polar angle theta in [0, pi], azimuth phi in [0, 2*pi).
struct SphericalAngles {
  double theta = 0.0;
  double phi = 0.0;
};

inline SphericalAngles cart_to_sph(const UnitDirection& d) {
  check_unit(d, "cart_to_sph");
  const double z = std::clamp(d.z, -1.0, 1.0);
  double phi = std::atan2(d.y, d.x);
  constexpr double two_pi = 6.283185307179586476925286766559;
  if (phi < 0.0)
    phi += two_pi;
  if (phi >= two_pi)
    phi = 0.0;
  return {std::acos(z), phi};
}

inline UnitDirection sph_to_cart(const SphericalAngles& a) {
  const double st = std::sin(a.theta);
  return {st * std::cos(a.phi), st * std::sin(a.phi), std::cos(a.theta)};
}

struct Shell {
  double bvalue = 0.0; // nominal, s/mm^2
  std::vector<UnitDirection> directions;
};

/// Per-shell unit direction sets plus the b0 channel count; the q-space
/// acquisition description.
struct GradientScheme {
  std::vector<Shell> shells;
  int b0_count = 0;

  int total_directions() const {
    int n = 0;
    for (const auto& s : shells)
      n += static_cast<int>(s.directions.size());
    return n;
  }
  int total_channels() const { return total_directions() + b0_count; }

  void validate() const {
    if (b0_count < 0)
      throw DomainError("GradientScheme: negative b0 count");
    for (std::size_t i = 0; i < shells.size(); ++i) {
      if (shells[i].directions.empty())
        throw DomainError("GradientScheme: shell without directions");
      if (!(shells[i].bvalue > 0.0))
        throw DomainError("GradientScheme: shell b-value must be positive");
      for (std::size_t j = 0; j < i; ++j)
        if (shells[j].bvalue == shells[i].bvalue)
          throw DomainError("GradientScheme: duplicate nominal b-value");
    }
  }
};

/// Maps scheme positions to channel indices of the stored signal vector.
struct ChannelMap {
  std::vector<std::vector<int>> shell_channels; // [shell][dir] -> channel
  std::vector<int> b0_channels;
  int total_channels = 0;
};

/// Canonical layout used for generated data: b0 channels first, then each
/// shell's directions in order.
inline ChannelMap canonical_channel_map(const GradientScheme& scheme) {
  ChannelMap map;
  int c = 0;
  for (int i = 0; i < scheme.b0_count; ++i)
    map.b0_channels.push_back(c++);
  for (const auto& shell : scheme.shells) {
    std::vector<int> idx;
    idx.reserve(shell.directions.size());
    for (std::size_t j = 0; j < shell.directions.size(); ++j)
      idx.push_back(c++);
    map.shell_channels.push_back(std::move(idx));
  }
  map.total_channels = c;
  return map;
}

struct SubsampleSelection {
  int shell_index = 0;
  std::vector<int> indices; // distinct, ascending
};

/// Draws n distinct direction indices uniformly without replacement.
inline SubsampleSelection random_subsample(const GradientScheme& scheme,
                                           int shell_index, int n, Rng& rng) {
  if (shell_index < 0 || shell_index >= static_cast<int>(scheme.shells.size()))
    throw DimensionError("random_subsample: shell index out of range");
  const int size = static_cast<int>(scheme.shells[shell_index].directions.size());
  if (n < 1 || n > size)
    throw DomainError("random_subsample: selection size out of range");
  std::vector<int> pool(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i)
    pool[static_cast<std::size_t>(i)] = i;
  // partial Fisher-Yates
  for (int i = 0; i < n; ++i) {
    const auto j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(size - i)));
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
  }
  SubsampleSelection sel;
  sel.shell_index = shell_index;
  sel.indices.assign(pool.begin(), pool.begin() + n);
  std::sort(sel.indices.begin(), sel.indices.end());
  return sel;
}

/// Minimum pairwise angle with g and -g identified, in radians.
inline double min_angular_separation(std::span<const UnitDirection> dirs) {
  if (dirs.size() < 2)
    throw DomainError("min_angular_separation: need at least 2 directions");
  double best = 1e300;
  for (std::size_t i = 0; i < dirs.size(); ++i)
    for (std::size_t j = i + 1; j < dirs.size(); ++j) {
      const double c = std::clamp(std::abs(dirs[i].dot(dirs[j])), 0.0, 1.0);
      best = std::min(best, std::acos(c));
    }
  return best;
}

namespace detail {

/// Antipodal electrostatic energy sum_{i<j} 1/|di-dj| + 1/|di+dj|.
inline double antipodal_energy(const std::vector<UnitDirection>& d) {
  double e = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = i + 1; j < d.size(); ++j) {
      const double dx = d[i].x - d[j].x, dy = d[i].y - d[j].y, dz = d[i].z - d[j].z;
      const double sx = d[i].x + d[j].x, sy = d[i].y + d[j].y, sz = d[i].z + d[j].z;
      const double dn = std::sqrt(dx * dx + dy * dy + dz * dz);
      const double sn = std::sqrt(sx * sx + sy * sy + sz * sz);
      e += 1.0 / dn + 1.0 / sn;
    }
  return e;
}

inline void antipodal_energy_gradient(const std::vector<UnitDirection>& d,
                                      std::vector<UnitDirection>& grad) {
  grad.assign(d.size(), UnitDirection{0.0, 0.0, 0.0});
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = i + 1; j < d.size(); ++j) {
      const double dx = d[i].x - d[j].x, dy = d[i].y - d[j].y, dz = d[i].z - d[j].z;
      const double sx = d[i].x + d[j].x, sy = d[i].y + d[j].y, sz = d[i].z + d[j].z;
      const double dn3 = std::pow(dx * dx + dy * dy + dz * dz, 1.5);
      const double sn3 = std::pow(sx * sx + sy * sy + sz * sz, 1.5);
      // d/d(di) of 1/|di-dj| and 1/|di+dj|
      grad[i].x += -dx / dn3 - sx / sn3;
      grad[i].y += -dy / dn3 - sy / sn3;
      grad[i].z += -dz / dn3 - sz / sn3;
      grad[j].x += dx / dn3 - sx / sn3;
      grad[j].y += dy / dn3 - sy / sn3;
      grad[j].z += dz / dn3 - sz / sn3;
    }
}

inline std::vector<UnitDirection> fibonacci_sphere(int n) {
  std::vector<UnitDirection> pts;
  pts.reserve(static_cast<std::size_t>(n));
  constexpr double pi = 3.14159265358979323846;
  const double golden = pi * (std::sqrt(5.0) + 1.0);
  const double dz = 2.0 / n;
  double z = -1.0 + 0.5 * dz;
  double theta = 0.0;
  for (int i = 0; i < n; ++i) {
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    pts.push_back(make_direction(r * std::cos(theta), r * std::sin(theta), z));
    z += dz;
    theta += golden;
  }
  return pts;
}

/// Rotation matrix from a seed-derived random unit quaternion.
inline std::array<double, 9> random_rotation(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x726f7461u));
  double q[4];
  double n = 0.0;
  do {
    n = 0.0;
    for (double& v : q) {
      v = rng.normal();
      n += v * v;
    }
  } while (n < 1e-12);
  n = std::sqrt(n);
  const double w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
  return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
          2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
          2 * (x * z - w * y),     2 * (y * z + w * x), 1 - 2 * (x * x + y * y)};
}

/// Projected gradient descent with backtracking line search; at most
/// max_iter iterations, stopping early once the relative energy change is
/// < 1e-9. Returns the final energy.
inline double descend_antipodal_energy(std::vector<UnitDirection>& dirs, int max_iter) {
  double energy = antipodal_energy(dirs);
  std::vector<UnitDirection> grad, cand(dirs.size());
  double step = 0.1 / static_cast<double>(dirs.size());
  for (int iter = 0; iter < max_iter; ++iter) {
    antipodal_energy_gradient(dirs, grad);
    // project onto the tangent plane of each direction
    double gmax = 0.0;
    for (std::size_t i = 0; i < dirs.size(); ++i) {
      const double gd = grad[i].dot(dirs[i]);
      grad[i].x -= gd * dirs[i].x;
      grad[i].y -= gd * dirs[i].y;
      grad[i].z -= gd * dirs[i].z;
      gmax = std::max(gmax, grad[i].norm());
    }
    if (gmax < 1e-14)
      break;
    bool accepted = false;
    double new_energy = energy;
    for (int half = 0; half < 40; ++half) {
      for (std::size_t i = 0; i < dirs.size(); ++i)
        cand[i] = make_direction(dirs[i].x - step * grad[i].x,
                                 dirs[i].y - step * grad[i].y,
                                 dirs[i].z - step * grad[i].z);
      new_energy = antipodal_energy(cand);
      if (new_energy < energy) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted)
      break;
    const double rel = (energy - new_energy) / energy;
    dirs.swap(cand);
    energy = new_energy;
    step *= 2.0;
    if (rel < 1e-9)
      break;
  }
  return energy;
}

} // namespace detail

/// Generates n well-spread antipodally-symmetric unit directions: spherical
/// Fibonacci start (randomly rotated by seed), then projected gradient
/// descent on the antipodal electrostatic energy (500 iterations or relative
/// change < 1e-9). Plain descent can park on a saddle (n = 3 starts flow to
/// the coplanar configuration), so a few seeded perturb-and-redescend rounds
/// follow; a round is kept only when it lowers the energy.
inline std::vector<UnitDirection> generate_uniform_directions(int n,
                                                              std::uint64_t seed) {
  if (n < 1)
    throw DomainError("generate_uniform_directions: need at least one direction");
  auto dirs = detail::fibonacci_sphere(n);
  const auto r = detail::random_rotation(seed);
  for (auto& d : dirs) {
    const double x = r[0] * d.x + r[1] * d.y + r[2] * d.z;
    const double y = r[3] * d.x + r[4] * d.y + r[5] * d.z;
    const double z = r[6] * d.x + r[7] * d.y + r[8] * d.z;
    d = make_direction(x, y, z);
  }
  if (n == 1)
    return dirs;

  double energy = detail::descend_antipodal_energy(dirs, 500);
  Rng perturb_rng(mix_seed(seed, 0x70657274u));
  for (int round = 0; round < 3; ++round) {
    std::vector<UnitDirection> cand = dirs;
    for (auto& d : cand)
      d = make_direction(d.x + 0.02 * perturb_rng.normal(),
                         d.y + 0.02 * perturb_rng.normal(),
                         d.z + 0.02 * perturb_rng.normal());
    const double cand_energy = detail::descend_antipodal_energy(cand, 500);
    if (cand_energy < energy) {
      dirs.swap(cand);
      energy = cand_energy;
    }
  }
  return dirs;
}

} // namespace robnoddi
