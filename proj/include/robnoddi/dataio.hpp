#pragma once

#include <array>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "robnoddi/errors.hpp"
#include "robnoddi/phantom.hpp"
#include "robnoddi/sphere.hpp"

namespace robnoddi {

static_assert(std::endian::native == std::endian::little,
              "RVOL payloads are little-endian; big-endian hosts unsupported");

// ---------------------------------------------------------------------------
// FSL-style gradient tables: bvals is one whitespace-separated row, bvecs is
// three rows (x, y, z components per volume channel).
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::string cur;
  std::istringstream in(text);
  while (std::getline(in, cur)) {
    bool blank = true;
    for (char ch : cur)
      if (!std::isspace(static_cast<unsigned char>(ch)))
        blank = false;
    if (!blank)
      lines.push_back(cur);
  }
  return lines;
}

inline std::vector<double> parse_row(const std::string& line, const char* what) {
  std::vector<double> vals;
  std::istringstream in(line);
  std::string tok;
  while (in >> tok) {
    try {
      std::size_t used = 0;
      const double v = std::stod(tok, &used);
      if (used != tok.size())
        throw std::invalid_argument(tok);
      vals.push_back(v);
    } catch (const std::exception&) {
      throw IoError(std::string("malformed gradient table: bad ") + what +
                    " token '" + tok + "'");
    }
  }
  return vals;
}

} // namespace detail

struct ParsedGradientTable {
  GradientScheme scheme;
  ChannelMap map;
};

/// Parses bvals/bvecs text into a scheme plus a map from scheme positions to
/// original channel indices. Channels with b below b0_threshold are b0; the
/// rest are grouped into shells whose nominal b-values differ by more than
/// shell_tolerance. A diffusion channel that ends up alone (matching no
/// other channel's shell) is treated as ungroupable.
inline ParsedGradientTable parse_gradient_table(const std::string& bvals_text,
                                                const std::string& bvecs_text,
                                                double b0_threshold = 50.0,
                                                double shell_tolerance = 50.0) {
  const auto bval_lines = detail::split_lines(bvals_text);
  if (bval_lines.size() != 1)
    throw IoError("malformed gradient table: bvals must be a single row");
  const auto bvals = detail::parse_row(bval_lines[0], "bvals");

  const auto bvec_lines = detail::split_lines(bvecs_text);
  if (bvec_lines.size() != 3)
    throw IoError("malformed gradient table: bvecs must have exactly 3 rows");
  std::array<std::vector<double>, 3> comps;
  for (int r = 0; r < 3; ++r) {
    comps[static_cast<std::size_t>(r)] = detail::parse_row(bvec_lines[static_cast<std::size_t>(r)], "bvecs");
    if (comps[static_cast<std::size_t>(r)].size() != bvals.size())
      throw IoError("malformed gradient table: bvals/bvecs channel count mismatch");
  }

  ParsedGradientTable out;
  struct Cluster {
    double nominal;
    std::vector<int> channels;
  };
  std::vector<Cluster> clusters;
  for (std::size_t c = 0; c < bvals.size(); ++c) {
    if (bvals[c] < b0_threshold) {
      out.map.b0_channels.push_back(static_cast<int>(c));
      continue;
    }
    bool placed = false;
    for (auto& cl : clusters)
      if (std::abs(bvals[c] - cl.nominal) <= shell_tolerance) {
        cl.channels.push_back(static_cast<int>(c));
        placed = true;
        break;
      }
    if (!placed)
      clusters.push_back({bvals[c], {static_cast<int>(c)}});
  }
  for (const auto& cl : clusters)
    if (cl.channels.size() < 2)
      throw IoError("ungrouped channel: b=" + std::to_string(cl.nominal) +
                    " matches no shell");
  // shells sorted by nominal b for a canonical ordering
  std::sort(clusters.begin(), clusters.end(),
            [](const Cluster& a, const Cluster& b) { return a.nominal < b.nominal; });
  for (const auto& cl : clusters) {
    Shell shell;
    shell.bvalue = cl.nominal;
    std::vector<int> chans;
    for (int c : cl.channels) {
      const double x = comps[0][static_cast<std::size_t>(c)];
      const double y = comps[1][static_cast<std::size_t>(c)];
      const double z = comps[2][static_cast<std::size_t>(c)];
      const double n = std::sqrt(x * x + y * y + z * z);
      if (std::abs(n - 1.0) > 1e-3)
        throw IoError("malformed gradient table: diffusion bvec is not unit-norm");
      shell.directions.push_back(make_direction(x, y, z));
      chans.push_back(c);
    }
    out.scheme.shells.push_back(std::move(shell));
    out.map.shell_channels.push_back(std::move(chans));
  }
  out.scheme.b0_count = static_cast<int>(out.map.b0_channels.size());
  out.map.total_channels = static_cast<int>(bvals.size());
  out.scheme.validate();
  return out;
}

/// Serializes a scheme in canonical channel order (b0 first, then shells).
/// Values use max precision so parse -> serialize -> parse is a fixed point.
inline void serialize_gradient_table(const GradientScheme& scheme,
                                     std::string& bvals_text, std::string& bvecs_text) {
  char buf[64];
  std::string bv, r0, r1, r2;
  auto push = [&buf](std::string& s, double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    if (!s.empty())
      s += ' ';
    s += buf;
  };
  for (int i = 0; i < scheme.b0_count; ++i) {
    push(bv, 0.0);
    push(r0, 0.0);
    push(r1, 0.0);
    push(r2, 0.0);
  }
  for (const auto& shell : scheme.shells)
    for (const auto& d : shell.directions) {
      push(bv, shell.bvalue);
      push(r0, d.x);
      push(r1, d.y);
      push(r2, d.z);
    }
  bvals_text = bv + "\n";
  bvecs_text = r0 + "\n" + r1 + "\n" + r2 + "\n";
}

// ---------------------------------------------------------------------------
// RVOL: minimal binary 4D float container.
// Header "RVOL1 nx ny nz nc dtype=f32 order=xyzc\n", then nx*ny*nz*nc
// little-endian f32 values, x fastest, channel slowest.
// ---------------------------------------------------------------------------

struct RawVolume {
  Dims3 dims{0, 0, 0};
  int nc = 0;
  std::vector<float> data; // file order: [((c*nz + z)*ny + y)*nx + x]

  std::size_t size() const { return voxel_count(dims) * static_cast<std::size_t>(nc); }
  float& at(int x, int y, int z, int c) {
    return data[voxel_index(dims, x, y, z) + static_cast<std::size_t>(c) * voxel_count(dims)];
  }
  float at(int x, int y, int z, int c) const {
    return data[voxel_index(dims, x, y, z) + static_cast<std::size_t>(c) * voxel_count(dims)];
  }
};

inline void write_rvol(const std::string& path, const RawVolume& vol) {
  if (vol.data.size() != vol.size())
    throw DimensionError("write_rvol: payload size does not match header dims");
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw IoError("write_rvol: cannot open '" + path + "' for writing");
  char header[128];
  const int len = std::snprintf(header, sizeof(header),
                                "RVOL1 %d %d %d %d dtype=f32 order=xyzc\n",
                                vol.dims[0], vol.dims[1], vol.dims[2], vol.nc);
  out.write(header, len);
  out.write(reinterpret_cast<const char*>(vol.data.data()),
            static_cast<std::streamsize>(vol.data.size() * sizeof(float)));
  if (!out)
    throw IoError("write_rvol: short write to '" + path + "'");
}

inline RawVolume read_rvol(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("read_rvol: cannot open '" + path + "'");
  std::string header;
  if (!std::getline(in, header))
    throw IoError("read_rvol: corrupt file, missing header: " + path);
  std::istringstream hs(header);
  std::string magic, dtype, order;
  RawVolume vol;
  if (!(hs >> magic))
    throw IoError("read_rvol: corrupt file, empty header: " + path);
  if (magic != "RVOL1")
    throw IoError("read_rvol: unknown version token '" + magic + "' in " + path);
  if (!(hs >> vol.dims[0] >> vol.dims[1] >> vol.dims[2] >> vol.nc))
    throw IoError("read_rvol: corrupt header dims in " + path);
  if (!(hs >> dtype >> order))
    throw IoError("read_rvol: corrupt header tokens in " + path);
  if (dtype != "dtype=f32" || order != "order=xyzc")
    throw IoError("read_rvol: unknown header token '" + dtype + " " + order + "' in " + path);
  if (vol.dims[0] <= 0 || vol.dims[1] <= 0 || vol.dims[2] <= 0 || vol.nc <= 0)
    throw IoError("read_rvol: corrupt non-positive dims in " + path);
  vol.data.resize(vol.size());
  in.read(reinterpret_cast<char*>(vol.data.data()),
          static_cast<std::streamsize>(vol.data.size() * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != vol.data.size() * sizeof(float))
    throw IoError("read_rvol: corrupt file, truncated payload in " + path);
  char extra;
  if (in.read(&extra, 1))
    throw IoError("read_rvol: corrupt file, trailing bytes in " + path);
  return vol;
}

// ---------------------------------------------------------------------------
// Conversions between file containers and in-memory volumes.
// ---------------------------------------------------------------------------

inline RawVolume to_raw(const DwiVolume& vol) {
  RawVolume raw;
  raw.dims = vol.dims;
  raw.nc = vol.channels;
  raw.data.resize(raw.size());
  const std::size_t nvox = voxel_count(vol.dims);
  for (std::size_t v = 0; v < nvox; ++v)
    for (int c = 0; c < vol.channels; ++c)
      raw.data[v + static_cast<std::size_t>(c) * nvox] =
          static_cast<float>(vol.voxel(v)[c]);
  return raw;
}

inline DwiVolume from_raw(const RawVolume& raw, const GradientScheme& scheme,
                          const ChannelMap& map) {
  if (raw.nc != map.total_channels)
    throw DimensionError("from_raw: channel count does not match gradient table");
  DwiVolume vol;
  vol.dims = raw.dims;
  vol.scheme = scheme;
  vol.map = map;
  vol.channels = raw.nc;
  const std::size_t nvox = voxel_count(raw.dims);
  vol.data.resize(nvox * static_cast<std::size_t>(raw.nc));
  for (std::size_t v = 0; v < nvox; ++v)
    for (int c = 0; c < raw.nc; ++c)
      vol.voxel(v)[c] = raw.data[v + static_cast<std::size_t>(c) * nvox];
  vol.mask.assign(nvox, 1);
  return vol;
}

/// Parameter volumes serialize with channels (vic, viso, od, mux, muy, muz, mask).
inline RawVolume to_raw(const ParameterVolume& pv) {
  RawVolume raw;
  raw.dims = pv.dims;
  raw.nc = 7;
  raw.data.resize(raw.size());
  const std::size_t nvox = voxel_count(pv.dims);
  for (std::size_t v = 0; v < nvox; ++v) {
    raw.data[v + 0 * nvox] = static_cast<float>(pv.vic[v]);
    raw.data[v + 1 * nvox] = static_cast<float>(pv.viso[v]);
    raw.data[v + 2 * nvox] = static_cast<float>(pv.od[v]);
    raw.data[v + 3 * nvox] = static_cast<float>(pv.mu[v].x);
    raw.data[v + 4 * nvox] = static_cast<float>(pv.mu[v].y);
    raw.data[v + 5 * nvox] = static_cast<float>(pv.mu[v].z);
    raw.data[v + 6 * nvox] = pv.mask[v] ? 1.0f : 0.0f;
  }
  return raw;
}

inline ParameterVolume parameter_volume_from_raw(const RawVolume& raw) {
  if (raw.nc != 7)
    throw DimensionError("parameter volume file must have 7 channels");
  ParameterVolume pv;
  pv.dims = raw.dims;
  const std::size_t nvox = voxel_count(raw.dims);
  pv.vic.resize(nvox);
  pv.viso.resize(nvox);
  pv.od.resize(nvox);
  pv.mu.resize(nvox);
  pv.mask.resize(nvox);
  for (std::size_t v = 0; v < nvox; ++v) {
    pv.vic[v] = raw.data[v + 0 * nvox];
    pv.viso[v] = raw.data[v + 1 * nvox];
    pv.od[v] = raw.data[v + 2 * nvox];
    const double x = raw.data[v + 3 * nvox];
    const double y = raw.data[v + 4 * nvox];
    const double z = raw.data[v + 5 * nvox];
    const double n = std::sqrt(x * x + y * y + z * z);
    pv.mu[v] = n < 1e-6 ? UnitDirection{0.0, 0.0, 1.0}
                        : UnitDirection{x / n, y / n, z / n};
    pv.mask[v] = raw.data[v + 6 * nvox] > 0.5f ? 1 : 0;
  }
  return pv;
}

// ---------------------------------------------------------------------------
// b0 normalization and patch extraction.
// ---------------------------------------------------------------------------

/// Divides every channel by the voxel's mean b0 signal; voxels whose mean b0
/// falls below 1e-6 are masked out and zeroed. Results clamp to [0, 2].
inline DwiVolume normalize_by_b0(const DwiVolume& vol) {
  if (vol.map.b0_channels.empty())
    throw DomainError("normalize_by_b0: volume has no b0 channels");
  DwiVolume out = vol;
  const std::size_t nvox = voxel_count(vol.dims);
  for (std::size_t v = 0; v < nvox; ++v) {
    double* p = out.voxel(v);
    if (!out.mask.empty() && !out.mask[v]) {
      std::fill(p, p + out.channels, 0.0);
      continue;
    }
    double b0 = 0.0;
    for (int c : vol.map.b0_channels)
      b0 += p[c];
    b0 /= static_cast<double>(vol.map.b0_channels.size());
    if (b0 < 1e-6) {
      if (out.mask.empty())
        out.mask.assign(nvox, 1);
      out.mask[v] = 0;
      std::fill(p, p + out.channels, 0.0);
      continue;
    }
    for (int c = 0; c < out.channels; ++c)
      p[c] = std::clamp(p[c] / b0, 0.0, 2.0);
  }
  if (out.mask.empty())
    out.mask.assign(nvox, 1);
  out.normalized = true;
  return out;
}

/// One training/testing unit. input is voxel-major (channel fastest) over a
/// w^3 patch; target is the center (w-2)^3 block of (vic, viso, od).
struct PatchExample {
  int w = 0;
  int channels = 0;
  std::vector<double> input;  // w^3 * channels
  std::vector<double> target; // (w-2)^3 * 3, empty for prediction patches
  int volume_id = 0;
  std::array<int, 3> corner{0, 0, 0};

  std::size_t input_size() const {
    return static_cast<std::size_t>(w) * w * w * static_cast<std::size_t>(channels);
  }
};

namespace detail {

inline std::size_t patch_voxel(int w, int x, int y, int z) {
  return static_cast<std::size_t>(x) +
         static_cast<std::size_t>(w) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(w) * static_cast<std::size_t>(z));
}

/// Corner grid positions along one axis: 0, stride, ... while corner+w fits.
inline std::vector<int> corner_grid(int dim, int w, int stride) {
  std::vector<int> g;
  for (int c = 0; c + w <= dim; c += stride)
    g.push_back(c);
  return g;
}

/// True when the center (w-2)^3 block at this corner is entirely foreground.
inline bool center_block_foreground(const std::vector<std::uint8_t>& mask,
                                    const Dims3& dims, int w, int cx, int cy, int cz) {
  for (int z = 1; z < w - 1; ++z)
    for (int y = 1; y < w - 1; ++y)
      for (int x = 1; x < w - 1; ++x)
        if (!mask[voxel_index(dims, cx + x, cy + y, cz + z)])
          return false;
  return true;
}

} // namespace detail

/// Gathers the diffusion channels of a w^3 patch in scheme order (shell 0
/// directions, then shell 1, ...), dropping b0 channels.
inline PatchExample gather_raw_patch(const DwiVolume& vol, int w, int cx, int cy, int cz,
                                     int volume_id = 0) {
  PatchExample p;
  p.w = w;
  p.channels = vol.scheme.total_directions();
  p.volume_id = volume_id;
  p.corner = {cx, cy, cz};
  p.input.resize(p.input_size());
  for (int z = 0; z < w; ++z)
    for (int y = 0; y < w; ++y)
      for (int x = 0; x < w; ++x) {
        const double* src = vol.voxel(voxel_index(vol.dims, cx + x, cy + y, cz + z));
        double* dst = p.input.data() +
                      detail::patch_voxel(w, x, y, z) * static_cast<std::size_t>(p.channels);
        int k = 0;
        for (const auto& shell : vol.map.shell_channels)
          for (int c : shell)
            dst[k++] = src[c];
      }
  return p;
}

/// Extracts training patches on the stride grid. A patch is emitted when it
/// lies fully inside the volume and its center (w-2)^3 block is entirely
/// foreground. Order is deterministic: z, then y, then x ascending.
inline std::vector<PatchExample> extract_patches(const DwiVolume& vol,
                                                 const ParameterVolume& params, int w,
                                                 int stride, int volume_id = 0) {
  if (w < 3 || w % 2 == 0)
    throw DomainError("extract_patches: w must be odd and >= 3");
  if (stride < 1)
    throw DomainError("extract_patches: stride must be >= 1");
  if (vol.dims != params.dims)
    throw DimensionError("extract_patches: volume and parameter dims differ");
  for (int k = 0; k < 3; ++k)
    if (w > vol.dims[k])
      throw DomainError("extract_patches: patch is larger than the volume");

  const auto gx = detail::corner_grid(vol.dims[0], w, stride);
  const auto gy = detail::corner_grid(vol.dims[1], w, stride);
  const auto gz = detail::corner_grid(vol.dims[2], w, stride);
  std::vector<PatchExample> out;
  const int t = w - 2;
  for (int cz : gz)
    for (int cy : gy)
      for (int cx : gx) {
        if (!detail::center_block_foreground(params.mask, params.dims, w, cx, cy, cz))
          continue;
        PatchExample p = gather_raw_patch(vol, w, cx, cy, cz, volume_id);
        p.target.resize(static_cast<std::size_t>(t) * t * t * 3);
        std::size_t k = 0;
        for (int z = 1; z < w - 1; ++z)
          for (int y = 1; y < w - 1; ++y)
            for (int x = 1; x < w - 1; ++x) {
              const std::size_t v = voxel_index(params.dims, cx + x, cy + y, cz + z);
              p.target[k++] = params.vic[v];
              p.target[k++] = params.viso[v];
              p.target[k++] = params.od[v];
            }
        out.push_back(std::move(p));
      }
  return out;
}

// ---------------------------------------------------------------------------
// Plain-text key=value manifest.
// ---------------------------------------------------------------------------

struct Manifest {
  std::vector<std::pair<std::string, std::string>> entries;

  void set(const std::string& key, const std::string& value) {
    for (auto& e : entries)
      if (e.first == key) {
        e.second = value;
        return;
      }
    entries.emplace_back(key, value);
  }
  const std::string& get(const std::string& key) const {
    for (const auto& e : entries)
      if (e.first == key)
        return e.second;
    throw IoError("manifest: missing key '" + key + "'");
  }
  bool has(const std::string& key) const {
    for (const auto& e : entries)
      if (e.first == key)
        return true;
    return false;
  }
};

inline void write_manifest(const std::string& path, const Manifest& m) {
  std::ofstream out(path);
  if (!out)
    throw IoError("write_manifest: cannot open '" + path + "'");
  for (const auto& e : m.entries)
    out << e.first << "=" << e.second << "\n";
}

inline Manifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in)
    throw IoError("read_manifest: cannot open '" + path + "'");
  Manifest m;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#')
      continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw IoError("manifest: malformed line '" + line + "'");
    m.entries.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  return m;
}

} // namespace robnoddi
