#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <vector>

#include "robnoddi/errors.hpp"
#include "robnoddi/noddi.hpp"
#include "robnoddi/parallel.hpp"
#include "robnoddi/rng.hpp"
#include "robnoddi/sphere.hpp"

namespace robnoddi {

using Dims3 = std::array<int, 3>;

inline std::size_t voxel_count(const Dims3& d) {
  return static_cast<std::size_t>(d[0]) * static_cast<std::size_t>(d[1]) *
         static_cast<std::size_t>(d[2]);
}

/// x fastest, then y, then z (matches the RVOL spatial order).
inline std::size_t voxel_index(const Dims3& d, int x, int y, int z) {
  return static_cast<std::size_t>(x) +
         static_cast<std::size_t>(d[0]) *
             (static_cast<std::size_t>(y) + static_cast<std::size_t>(d[1]) * static_cast<std::size_t>(z));
}

/// Ground-truth parameter fields over a 3D grid with a foreground mask.
struct ParameterVolume {
  Dims3 dims{0, 0, 0};
  std::vector<double> vic, viso, od;
  std::vector<UnitDirection> mu;
  std::vector<std::uint8_t> mask;

  NoddiParams params_at(std::size_t v) const {
    return NoddiParams{vic[v], viso[v], od[v], mu[v]};
  }
};

/// Multi-shell DWI volume; per-voxel signal vectors stored voxel-major
/// (channel fastest). Channel meaning is given by the channel map.
struct DwiVolume {
  Dims3 dims{0, 0, 0};
  GradientScheme scheme;
  ChannelMap map;
  int channels = 0;
  std::vector<double> data;
  std::vector<std::uint8_t> mask;
  bool normalized = false;

  double* voxel(std::size_t v) { return data.data() + v * static_cast<std::size_t>(channels); }
  const double* voxel(std::size_t v) const {
    return data.data() + v * static_cast<std::size_t>(channels);
  }
};

namespace detail {

/// Separable 3x3x3 box filter, replicated edges.
inline void box_filter3(std::vector<double>& f, const Dims3& d) {
  std::vector<double> tmp(f.size());
  auto clampi = [](int v, int n) { return std::clamp(v, 0, n - 1); };
  // x pass
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x)
        tmp[voxel_index(d, x, y, z)] =
            (f[voxel_index(d, clampi(x - 1, d[0]), y, z)] + f[voxel_index(d, x, y, z)] +
             f[voxel_index(d, clampi(x + 1, d[0]), y, z)]) /
            3.0;
  // y pass
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x)
        f[voxel_index(d, x, y, z)] =
            (tmp[voxel_index(d, x, clampi(y - 1, d[1]), z)] + tmp[voxel_index(d, x, y, z)] +
             tmp[voxel_index(d, x, clampi(y + 1, d[1]), z)]) /
            3.0;
  // z pass
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x)
        tmp[voxel_index(d, x, y, z)] =
            (f[voxel_index(d, x, y, clampi(z - 1, d[2]))] + f[voxel_index(d, x, y, z)] +
             f[voxel_index(d, x, y, clampi(z + 1, d[2]))]) /
            3.0;
  f.swap(tmp);
}

/// White normal noise smoothed by repeated box-filter passes.
inline std::vector<double> smooth_noise_field(const Dims3& d, std::uint64_t seed,
                                              std::uint64_t field_tag, int passes = 3) {
  std::vector<double> f(voxel_count(d));
  for (std::size_t v = 0; v < f.size(); ++v) {
    Rng rng(mix_seed(seed, field_tag, v));
    f[v] = rng.normal();
  }
  for (int pass = 0; pass < passes; ++pass)
    box_filter3(f, d);
  return f;
}

/// Affine map of [lo_src, hi_src] onto [lo_dst, hi_dst].
inline void affine_map(std::vector<double>& f, double lo_dst, double hi_dst) {
  const auto [mn, mx] = std::minmax_element(f.begin(), f.end());
  const double lo = *mn, hi = *mx;
  const double span = hi - lo;
  for (double& v : f)
    v = span < 1e-12 ? 0.5 * (lo_dst + hi_dst)
                     : lo_dst + (v - lo) / span * (hi_dst - lo_dst);
}

/// Piecewise-affine map sending the lower `frac` quantile of values into
/// [lo_dst, knee] and the remainder into [knee, hi_dst].
inline void skewed_map(std::vector<double>& f, double frac, double lo_dst,
                       double knee, double hi_dst) {
  std::vector<double> sorted(f);
  std::sort(sorted.begin(), sorted.end());
  const double lo = sorted.front(), hi = sorted.back();
  const double q = sorted[static_cast<std::size_t>(frac * (sorted.size() - 1))];
  for (double& v : f) {
    if (v <= q)
      v = q - lo < 1e-12 ? lo_dst : lo_dst + (v - lo) / (q - lo) * (knee - lo_dst);
    else
      v = hi - q < 1e-12 ? knee : knee + (v - q) / (hi - q) * (hi_dst - knee);
  }
}

} // namespace detail

/// Smooth random parameter fields with an ellipsoidal foreground mask.
/// Ranges: vic in [0.1, 0.9], od in [0.04, 0.9], viso in [0, 0.9] with 80% of
/// voxels below 0.2. mu_passes controls the orientation field's correlation
/// length (tract-like coherence). Deterministic given (dims, seed).
inline ParameterVolume generate_parameter_volume(const Dims3& dims, std::uint64_t seed,
                                                 int mu_passes = 12) {
  for (int k = 0; k < 3; ++k)
    if (dims[k] < 8)
      throw DomainError("generate_parameter_volume: each dim must be >= 8");
  ParameterVolume pv;
  pv.dims = dims;
  pv.vic = detail::smooth_noise_field(dims, seed, 1);
  pv.viso = detail::smooth_noise_field(dims, seed, 2);
  pv.od = detail::smooth_noise_field(dims, seed, 3);
  detail::affine_map(pv.vic, 0.1, 0.9);
  detail::affine_map(pv.od, 0.04, 0.9);
  detail::skewed_map(pv.viso, 0.8, 0.0, 0.2, 0.9);

  // fiber orientations get a much longer correlation length than the scalar
  // fields: coherent orientation domains, as in white-matter tracts
  const auto fx = detail::smooth_noise_field(dims, seed, 4, mu_passes);
  const auto fy = detail::smooth_noise_field(dims, seed, 5, mu_passes);
  const auto fz = detail::smooth_noise_field(dims, seed, 6, mu_passes);
  pv.mu.resize(voxel_count(dims));
  for (std::size_t v = 0; v < pv.mu.size(); ++v) {
    const double n = std::sqrt(fx[v] * fx[v] + fy[v] * fy[v] + fz[v] * fz[v]);
    pv.mu[v] = n < 1e-8 ? UnitDirection{0.0, 0.0, 1.0}
                        : UnitDirection{fx[v] / n, fy[v] / n, fz[v] / n};
  }

  pv.mask.assign(voxel_count(dims), 0);
  const double cx = (dims[0] - 1) / 2.0, cy = (dims[1] - 1) / 2.0, cz = (dims[2] - 1) / 2.0;
  const double rx = 0.48 * dims[0], ry = 0.48 * dims[1], rz = 0.48 * dims[2];
  for (int z = 0; z < dims[2]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x) {
        const double ex = (x - cx) / rx, ey = (y - cy) / ry, ez = (z - cz) / rz;
        if (ex * ex + ey * ey + ez * ez <= 1.0)
          pv.mask[voxel_index(dims, x, y, z)] = 1;
      }
  return pv;
}

/// Stick attenuation table exp(-b d_par (g.n_q)^2), one row per direction.
/// Shared across voxels; rows feed signal_from_model unchanged, so the batch
/// path reproduces synthesize_signal bit for bit.
struct ShellStickTable {
  std::size_t n_quad = 0;
  std::vector<double> rows; // [dir * n_quad + q]

  const double* row(std::size_t dir) const { return rows.data() + dir * n_quad; }
};

inline ShellStickTable make_stick_table(double bvalue, const TissueConstants& consts,
                                        std::span<const UnitDirection> dirs,
                                        const QuadratureGrid& quad) {
  ShellStickTable t;
  t.n_quad = quad.points.size();
  t.rows.resize(dirs.size() * t.n_quad);
  for (std::size_t i = 0; i < dirs.size(); ++i)
    detail::fill_stick_row(bvalue * consts.d_par, dirs[i], quad,
                           t.rows.data() + i * t.n_quad);
  return t;
}

/// Synthesizes the multi-shell DWI volume for a parameter volume: b0 channels
/// are 1, every channel gets Rician noise at the given snr (snr = +inf skips
/// noise entirely), background voxels are 0. Deterministic given seed; noise
/// streams are per voxel, so the voxel loop may run in parallel.
inline DwiVolume generate_dwi(const ParameterVolume& pv, const GradientScheme& scheme,
                              const TissueConstants& consts, double snr,
                              std::uint64_t seed, const QuadratureGrid& quad) {
  scheme.validate();
  consts.validate();
  if (!(snr > 0.0))
    throw DomainError("generate_dwi: snr must be positive");
  DwiVolume vol;
  vol.dims = pv.dims;
  vol.scheme = scheme;
  vol.map = canonical_channel_map(scheme);
  vol.channels = vol.map.total_channels;
  vol.mask = pv.mask;
  vol.data.assign(voxel_count(pv.dims) * static_cast<std::size_t>(vol.channels), 0.0);

  std::vector<ShellStickTable> tables;
  tables.reserve(scheme.shells.size());
  for (const auto& shell : scheme.shells)
    tables.push_back(make_stick_table(shell.bvalue, consts, shell.directions, quad));

  const bool noisy = std::isfinite(snr);
  parallel_for(voxel_count(pv.dims), [&](std::size_t v) {
    if (!pv.mask[v])
      return;
    double* out = vol.voxel(v);
    const VoxelForwardModel model = make_voxel_model(pv.params_at(v), consts, quad);
    for (int b = 0; b < scheme.b0_count; ++b)
      out[vol.map.b0_channels[static_cast<std::size_t>(b)]] = 1.0;
    for (std::size_t s = 0; s < scheme.shells.size(); ++s) {
      const auto& shell = scheme.shells[s];
      for (std::size_t i = 0; i < shell.directions.size(); ++i)
        out[vol.map.shell_channels[s][i]] =
            signal_from_model(model, shell.bvalue, shell.directions[i], tables[s].row(i));
    }
    if (noisy) {
      Rng rng(mix_seed(seed, 0x6e6f6973u, v));
      for (int c = 0; c < vol.channels; ++c)
        out[c] = add_rician_noise(out[c], snr, rng);
    }
  });
  return vol;
}

} // namespace robnoddi
