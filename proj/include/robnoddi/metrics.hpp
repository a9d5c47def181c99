#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "robnoddi/errors.hpp"
#include "robnoddi/phantom.hpp"

namespace robnoddi {

/// PSNR cap reported when the error is exactly zero.
constexpr double psnr_cap_db = 99.0;

/// Mean squared difference over masked voxels and the 3 parameter channels.
inline double mse(const ParameterVolume& pred, const ParameterVolume& truth,
                  const std::vector<std::uint8_t>& mask) {
  if (pred.dims != truth.dims)
    throw DimensionError("mse: volume dims differ");
  if (mask.size() != voxel_count(pred.dims))
    throw DimensionError("mse: mask size mismatch");
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t v = 0; v < mask.size(); ++v) {
    if (!mask[v])
      continue;
    const double d0 = pred.vic[v] - truth.vic[v];
    const double d1 = pred.viso[v] - truth.viso[v];
    const double d2 = pred.od[v] - truth.od[v];
    acc += d0 * d0 + d1 * d1 + d2 * d2;
    ++count;
  }
  if (count == 0)
    throw DomainError("mse: empty evaluation mask");
  return acc / static_cast<double>(3 * count);
}

/// 10 log10(peak^2 / mse); zero error maps to the 99 dB sentinel.
inline double psnr(double mse_value, double peak = 1.0) {
  if (mse_value < 0.0)
    throw DomainError("psnr: mse must be non-negative");
  if (mse_value == 0.0)
    return psnr_cap_db;
  return std::min(psnr_cap_db, 10.0 * std::log10(peak * peak / mse_value));
}

namespace detail {

/// Local SSIM for one scalar field. Window statistics use the 7^3
/// neighborhood clipped to bounds and restricted to masked voxels, so values
/// outside the mask can never influence the score.
inline double ssim_field(const std::vector<double>& a, const std::vector<double>& b,
                         const std::vector<std::uint8_t>& mask, const Dims3& dims,
                         int half_window, double c1, double c2) {
  double total = 0.0;
  std::size_t count = 0;
  for (int z = 0; z < dims[2]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x) {
        const std::size_t center = voxel_index(dims, x, y, z);
        if (!mask[center])
          continue;
        double sa = 0.0, sb = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0;
        int n = 0;
        for (int dz = -half_window; dz <= half_window; ++dz) {
          const int zz = z + dz;
          if (zz < 0 || zz >= dims[2])
            continue;
          for (int dy = -half_window; dy <= half_window; ++dy) {
            const int yy = y + dy;
            if (yy < 0 || yy >= dims[1])
              continue;
            for (int dx = -half_window; dx <= half_window; ++dx) {
              const int xx = x + dx;
              if (xx < 0 || xx >= dims[0])
                continue;
              const std::size_t v = voxel_index(dims, xx, yy, zz);
              if (!mask[v])
                continue;
              sa += a[v];
              sb += b[v];
              saa += a[v] * a[v];
              sbb += b[v] * b[v];
              sab += a[v] * b[v];
              ++n;
            }
          }
        }
        const double inv = 1.0 / n;
        const double ma = sa * inv, mb = sb * inv;
        const double va = std::max(0.0, saa * inv - ma * ma);
        const double vb = std::max(0.0, sbb * inv - mb * mb);
        const double cov = sab * inv - ma * mb;
        const double num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        const double den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
        ++count;
      }
  if (count == 0)
    throw DomainError("ssim: empty evaluation mask");
  return total / static_cast<double>(count);
}

} // namespace detail

/// Mean local SSIM over masked voxels: 7^3 uniform window,
/// C1 = (0.01 peak)^2, C2 = (0.03 peak)^2, peak = 1, per parameter channel
/// then averaged.
inline double ssim(const ParameterVolume& pred, const ParameterVolume& truth,
                   const std::vector<std::uint8_t>& mask) {
  if (pred.dims != truth.dims)
    throw DimensionError("ssim: volume dims differ");
  for (int k = 0; k < 3; ++k)
    if (pred.dims[k] < 7)
      throw DomainError("ssim: volume smaller than the 7^3 window");
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  const double s0 = detail::ssim_field(pred.vic, truth.vic, mask, pred.dims, 3, c1, c2);
  const double s1 = detail::ssim_field(pred.viso, truth.viso, mask, pred.dims, 3, c1, c2);
  const double s2 = detail::ssim_field(pred.od, truth.od, mask, pred.dims, 3, c1, c2);
  return (s0 + s1 + s2) / 3.0;
}

/// Per-parameter and mean metric values over one evaluation mask.
struct MetricsReport {
  std::array<double, 3> mse_param{0, 0, 0};
  std::array<double, 3> psnr_param{0, 0, 0};
  std::array<double, 3> ssim_param{0, 0, 0};
  double mse_mean = 0.0;
  double psnr_mean = 0.0;
  double ssim_mean = 0.0;
  std::size_t voxels = 0;
};

inline MetricsReport compute_metrics(const ParameterVolume& pred,
                                     const ParameterVolume& truth,
                                     const std::vector<std::uint8_t>& mask) {
  if (pred.dims != truth.dims)
    throw DimensionError("compute_metrics: volume dims differ");
  MetricsReport r;
  const std::array<const std::vector<double>*, 3> pf{&pred.vic, &pred.viso, &pred.od};
  const std::array<const std::vector<double>*, 3> tf{&truth.vic, &truth.viso, &truth.od};
  std::size_t count = 0;
  for (int p = 0; p < 3; ++p) {
    double acc = 0.0;
    count = 0;
    for (std::size_t v = 0; v < mask.size(); ++v) {
      if (!mask[v])
        continue;
      const double d = (*pf[static_cast<std::size_t>(p)])[v] - (*tf[static_cast<std::size_t>(p)])[v];
      acc += d * d;
      ++count;
    }
    if (count == 0)
      throw DomainError("compute_metrics: empty evaluation mask");
    r.mse_param[static_cast<std::size_t>(p)] = acc / static_cast<double>(count);
    r.psnr_param[static_cast<std::size_t>(p)] = psnr(r.mse_param[static_cast<std::size_t>(p)]);
  }
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  for (int k = 0; k < 3; ++k)
    if (pred.dims[k] < 7)
      throw DomainError("ssim: volume smaller than the 7^3 window");
  r.ssim_param[0] = detail::ssim_field(pred.vic, truth.vic, mask, pred.dims, 3, c1, c2);
  r.ssim_param[1] = detail::ssim_field(pred.viso, truth.viso, mask, pred.dims, 3, c1, c2);
  r.ssim_param[2] = detail::ssim_field(pred.od, truth.od, mask, pred.dims, 3, c1, c2);
  r.voxels = count;
  r.mse_mean = (r.mse_param[0] + r.mse_param[1] + r.mse_param[2]) / 3.0;
  r.psnr_mean = psnr(r.mse_mean);
  r.ssim_mean = (r.ssim_param[0] + r.ssim_param[1] + r.ssim_param[2]) / 3.0;
  return r;
}

// ---------------------------------------------------------------------------
// CSV rows (fixed column order shared by eval and ablation outputs).
// ---------------------------------------------------------------------------

inline const char* csv_header() {
  return "method,sampling_mode,n_dirs_shell1,n_dirs_shell2,mse,psnr,ssim";
}

struct CsvRow {
  std::string method;
  std::string sampling_mode;
  int n_dirs_shell1 = 0;
  int n_dirs_shell2 = 0;
  double mse = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
};

inline std::string format_csv_row(const CsvRow& row) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%s,%d,%d,%.8f,%.5f,%.6f", row.method.c_str(),
                row.sampling_mode.c_str(), row.n_dirs_shell1, row.n_dirs_shell2,
                row.mse, row.psnr, row.ssim);
  return buf;
}

} // namespace robnoddi
