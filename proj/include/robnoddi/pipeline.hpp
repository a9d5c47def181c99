#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "robnoddi/dataio.hpp"
#include "robnoddi/errors.hpp"
#include "robnoddi/rng.hpp"
#include "robnoddi/shbasis.hpp"
#include "robnoddi/sphere.hpp"

namespace robnoddi {

enum class SamplingMode { fixed, adaptive };

/// Training-time direction sampling. adaptive draws, per shell and per
/// example, n ~ Uniform{n_min..n_max} fresh directions; fixed always uses the
/// stored per-shell selections.
struct SamplingPolicy {
  SamplingMode mode = SamplingMode::adaptive;
  int n_min = 30;
  int n_max = 30;
  std::vector<SubsampleSelection> fixed_selection; // one per shell when fixed

  void validate(const GradientScheme& scheme) const {
    if (mode == SamplingMode::adaptive) {
      int max_size = 0;
      for (const auto& s : scheme.shells)
        max_size = std::max(max_size, static_cast<int>(s.directions.size()));
      if (!(20 <= n_min && n_min <= n_max))
        throw DomainError("SamplingPolicy: need 20 <= n_min <= n_max");
      for (const auto& s : scheme.shells)
        if (n_max > static_cast<int>(s.directions.size()))
          throw DomainError("SamplingPolicy: n_max exceeds shell size");
    } else {
      if (fixed_selection.size() != scheme.shells.size())
        throw DomainError("SamplingPolicy: fixed mode needs one selection per shell");
      for (std::size_t s = 0; s < fixed_selection.size(); ++s) {
        if (fixed_selection[s].shell_index != static_cast<int>(s))
          throw DomainError("SamplingPolicy: fixed selection shell index mismatch");
        const int size = static_cast<int>(scheme.shells[s].directions.size());
        for (int idx : fixed_selection[s].indices)
          if (idx < 0 || idx >= size)
            throw DomainError("SamplingPolicy: fixed selection index out of range");
      }
    }
  }
};

enum class Representation { raw_dwi, sh_coeffs };

/// What the estimator consumes per voxel: raw signals of a fixed selection,
/// or concatenated per-shell SH coefficients. channels is the derived total.
struct FeatureSpec {
  Representation representation = Representation::sh_coeffs;
  int sh_order = 6;
  std::vector<int> shells_used; // indices into the scheme's shells
  int channels = 0;
};

inline FeatureSpec make_feature_spec(Representation repr, int sh_order,
                                     const GradientScheme& scheme,
                                     const SamplingPolicy& policy) {
  FeatureSpec spec;
  spec.representation = repr;
  spec.sh_order = sh_order;
  spec.shells_used.resize(scheme.shells.size());
  std::iota(spec.shells_used.begin(), spec.shells_used.end(), 0);
  if (repr == Representation::sh_coeffs) {
    spec.channels = num_coefficients(sh_order) * static_cast<int>(spec.shells_used.size());
  } else {
    if (policy.mode != SamplingMode::fixed)
      throw DomainError("policy mismatch: raw_dwi features require a fixed "
                        "sampling policy");
    spec.channels = 0;
    for (int s : spec.shells_used)
      spec.channels += static_cast<int>(policy.fixed_selection[static_cast<std::size_t>(s)].indices.size());
  }
  return spec;
}

namespace detail {

/// Offset of each shell's block inside a raw patch's channel axis.
inline std::vector<int> shell_offsets(const GradientScheme& scheme) {
  std::vector<int> off(scheme.shells.size() + 1, 0);
  for (std::size_t s = 0; s < scheme.shells.size(); ++s)
    off[s + 1] = off[s] + static_cast<int>(scheme.shells[s].directions.size());
  return off;
}

/// SH-fits every patch voxel of one shell on the selected directions and
/// writes the coefficient block into the feature tensor.
inline void fit_shell_block(const PatchExample& raw, PatchExample& out,
                            const GradientScheme& scheme, int shell,
                            const std::vector<int>& selection, int block_offset,
                            const FitSettings& settings) {
  const auto& all_dirs = scheme.shells[static_cast<std::size_t>(shell)].directions;
  std::vector<UnitDirection> dirs;
  dirs.reserve(selection.size());
  for (int idx : selection)
    dirs.push_back(all_dirs[static_cast<std::size_t>(idx)]);
  ShellFitter fitter(dirs, settings, scheme.shells[static_cast<std::size_t>(shell)].bvalue);
  const int nc = num_coefficients(settings.order);
  const auto offsets = shell_offsets(scheme);
  const int base = offsets[static_cast<std::size_t>(shell)];
  const std::size_t voxels = static_cast<std::size_t>(raw.w) * raw.w * raw.w;
  Eigen::VectorXd signals(static_cast<Eigen::Index>(selection.size()));
  for (std::size_t v = 0; v < voxels; ++v) {
    const double* src = raw.input.data() + v * static_cast<std::size_t>(raw.channels);
    for (std::size_t j = 0; j < selection.size(); ++j)
      signals[static_cast<Eigen::Index>(j)] = src[base + selection[j]];
    const ShCoefficients c = fitter.fit(signals);
    double* dst = out.input.data() + v * static_cast<std::size_t>(out.channels) + block_offset;
    for (int k = 0; k < nc; ++k)
      dst[k] = c.values[k];
  }
}

} // namespace detail

/// Builds one training example from a raw multi-shell patch: per shell,
/// draw the selection (adaptive: fresh size and directions from rng), SH-fit
/// every voxel on it, and concatenate the shells' coefficient blocks. In
/// raw_dwi mode the selected channels pass through unchanged.
inline PatchExample make_training_example(const PatchExample& raw,
                                          const GradientScheme& scheme,
                                          const SamplingPolicy& policy,
                                          const FeatureSpec& spec,
                                          const FitSettings& settings, Rng& rng) {
  policy.validate(scheme);
  if (raw.channels != scheme.total_directions())
    throw DimensionError("make_training_example: patch channels do not match scheme");
  if (spec.representation == Representation::raw_dwi &&
      policy.mode == SamplingMode::adaptive)
    throw DomainError("policy mismatch: raw_dwi features require a fixed "
                      "sampling policy");

  PatchExample out;
  out.w = raw.w;
  out.channels = spec.channels;
  out.volume_id = raw.volume_id;
  out.corner = raw.corner;
  out.target = raw.target;
  out.input.resize(out.input_size());

  const auto offsets = detail::shell_offsets(scheme);
  const std::size_t voxels = static_cast<std::size_t>(raw.w) * raw.w * raw.w;
  int block = 0;
  for (int shell : spec.shells_used) {
    std::vector<int> selection;
    if (policy.mode == SamplingMode::adaptive) {
      const int n = policy.n_min +
                    static_cast<int>(rng.below(static_cast<std::uint64_t>(policy.n_max - policy.n_min + 1)));
      selection = random_subsample(scheme, shell, n, rng).indices;
    } else {
      selection = policy.fixed_selection[static_cast<std::size_t>(shell)].indices;
    }
    if (spec.representation == Representation::sh_coeffs) {
      detail::fit_shell_block(raw, out, scheme, shell, selection, block, settings);
      block += num_coefficients(settings.order);
    } else {
      const int base = offsets[static_cast<std::size_t>(shell)];
      for (std::size_t v = 0; v < voxels; ++v) {
        const double* src = raw.input.data() + v * static_cast<std::size_t>(raw.channels);
        double* dst = out.input.data() + v * static_cast<std::size_t>(out.channels) + block;
        for (std::size_t j = 0; j < selection.size(); ++j)
          dst[j] = src[base + selection[j]];
      }
      block += static_cast<int>(selection.size());
    }
  }
  return out;
}

/// Builds one test example. The test patch carries its own scheme, whose
/// direction counts may differ from training: SH fitting uses ALL provided
/// directions per shell, producing a feature tensor whose channel count
/// depends only on the SH order — this is the robustness mechanism. raw_dwi
/// features require the channel count to match the trained selection.
inline PatchExample make_test_example(const PatchExample& raw,
                                      const GradientScheme& test_scheme,
                                      const FeatureSpec& spec,
                                      const FitSettings& settings) {
  if (raw.channels != test_scheme.total_directions())
    throw DimensionError("make_test_example: patch channels do not match test scheme");
  if (spec.representation == Representation::raw_dwi) {
    if (raw.channels != spec.channels)
      throw DimensionError(
          "make_test_example: raw_dwi features are tied to the trained direction "
          "count (" + std::to_string(spec.channels) + "), got " +
          std::to_string(raw.channels) +
          " test directions; raw baselines cannot absorb changed counts");
    PatchExample out = raw;
    return out;
  }
  PatchExample out;
  out.w = raw.w;
  out.channels = spec.channels;
  out.volume_id = raw.volume_id;
  out.corner = raw.corner;
  out.target = raw.target;
  out.input.resize(out.input_size());
  int block = 0;
  for (int shell : spec.shells_used) {
    const int n = static_cast<int>(test_scheme.shells[static_cast<std::size_t>(shell)].directions.size());
    std::vector<int> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), 0);
    detail::fit_shell_block(raw, out, test_scheme, shell, all, block, settings);
    block += num_coefficients(settings.order);
  }
  return out;
}

/// Applies make_training_example to every patch with per-patch rng derived
/// from (epoch_seed, patch index), then shuffles the example order
/// deterministically.
inline std::vector<PatchExample> build_epoch(const std::vector<PatchExample>& dataset,
                                             const GradientScheme& scheme,
                                             const SamplingPolicy& policy,
                                             const FeatureSpec& spec,
                                             const FitSettings& settings,
                                             std::uint64_t epoch_seed) {
  if (dataset.empty())
    throw DomainError("build_epoch: empty dataset");
  std::vector<PatchExample> out(dataset.size());
  parallel_for(dataset.size(), [&](std::size_t i) {
    Rng rng(mix_seed(epoch_seed, 0x70617463u, i));
    out[i] = make_training_example(dataset[i], scheme, policy, spec, settings, rng);
  });
  Rng shuffle_rng(mix_seed(epoch_seed, 0x73687566u));
  for (std::size_t i = out.size(); i > 1; --i)
    std::swap(out[i - 1], out[shuffle_rng.below(i)]);
  return out;
}

} // namespace robnoddi
