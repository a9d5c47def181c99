#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "robnoddi/dataio.hpp"

using namespace robnoddi;
namespace fs = std::filesystem;

namespace {

GradientScheme hcp_like_scheme() {
  GradientScheme scheme;
  scheme.b0_count = 18;
  Shell s1;
  s1.bvalue = 1000.0;
  s1.directions = generate_uniform_directions(90, 1);
  Shell s2;
  s2.bvalue = 2000.0;
  s2.directions = generate_uniform_directions(90, 2);
  scheme.shells = {s1, s2};
  return scheme;
}

std::string temp_path(const std::string& name) {
  return (fs::temp_directory_path() / name).string();
}

/// Hand-built two-voxel DWI volume: 2 b0 channels + one 6-direction shell.
DwiVolume tiny_volume() {
  DwiVolume vol;
  vol.dims = {8, 8, 8};
  vol.scheme.b0_count = 2;
  Shell s;
  s.bvalue = 1000.0;
  s.directions = generate_uniform_directions(6, 3);
  vol.scheme.shells = {s};
  vol.map = canonical_channel_map(vol.scheme);
  vol.channels = 8;
  vol.data.assign(voxel_count(vol.dims) * 8, 0.0);
  vol.mask.assign(voxel_count(vol.dims), 1);
  return vol;
}

} // namespace

TEST_CASE("parse_gradient_table groups an HCP-shaped acquisition") {
  const auto scheme = hcp_like_scheme();
  std::string bvals, bvecs;
  serialize_gradient_table(scheme, bvals, bvecs);
  const auto parsed = parse_gradient_table(bvals, bvecs);
  REQUIRE(parsed.scheme.shells.size() == 2);
  CHECK(parsed.scheme.shells[0].bvalue == 1000.0);
  CHECK(parsed.scheme.shells[1].bvalue == 2000.0);
  CHECK(parsed.scheme.shells[0].directions.size() == 90);
  CHECK(parsed.scheme.shells[1].directions.size() == 90);
  CHECK(parsed.scheme.b0_count == 18);

  SECTION("channel map is a bijection over all channels") {
    std::set<int> seen(parsed.map.b0_channels.begin(), parsed.map.b0_channels.end());
    for (const auto& shell : parsed.map.shell_channels)
      seen.insert(shell.begin(), shell.end());
    CHECK(seen.size() == 198);
    CHECK(*seen.begin() == 0);
    CHECK(*seen.rbegin() == 197);
  }
  SECTION("parse -> serialize -> parse is a fixed point") {
    std::string bvals2, bvecs2;
    serialize_gradient_table(parsed.scheme, bvals2, bvecs2);
    const auto parsed2 = parse_gradient_table(bvals2, bvecs2);
    CHECK(bvals2 == [&] {
      std::string b3, v3;
      serialize_gradient_table(parsed2.scheme, b3, v3);
      return b3;
    }());
    REQUIRE(parsed2.scheme.shells.size() == 2);
    for (std::size_t s = 0; s < 2; ++s)
      for (std::size_t i = 0; i < 90; ++i) {
        CHECK(parsed2.scheme.shells[s].directions[i].x ==
              parsed.scheme.shells[s].directions[i].x);
        CHECK(parsed2.scheme.shells[s].directions[i].z ==
              parsed.scheme.shells[s].directions[i].z);
      }
  }
}

TEST_CASE("parse_gradient_table edge cases") {
  SECTION("all-zero bvals means zero shells, everything b0") {
    const auto parsed = parse_gradient_table("0 0 0 0\n", "0 0 0 0\n0 0 0 0\n0 0 0 0\n");
    CHECK(parsed.scheme.shells.empty());
    CHECK(parsed.scheme.b0_count == 4);
  }
  SECTION("a stray channel at b=1500 with tolerance 50 cannot be grouped") {
    CHECK_THROWS_WITH(
        parse_gradient_table("0 1000 1000 1500 2000 2000\n",
                             "0 1 0 1 0 1\n0 0 1 0 0 0\n0 0 0 0 1 0\n"),
        Catch::Matchers::ContainsSubstring("ungrouped"));
  }
  SECTION("count mismatch is malformed") {
    CHECK_THROWS_WITH(parse_gradient_table("0 1000\n", "0 1 0\n0 0 1\n0 0 0\n"),
                      Catch::Matchers::ContainsSubstring("malformed"));
  }
  SECTION("bvecs needs exactly three rows") {
    CHECK_THROWS_AS(parse_gradient_table("0 0\n", "0 0\n0 0\n"), IoError);
  }
  SECTION("non-unit diffusion bvec is malformed") {
    CHECK_THROWS_WITH(parse_gradient_table("1000 1000\n", "0.5 1\n0 0\n0 0\n"),
                      Catch::Matchers::ContainsSubstring("unit"));
  }
  SECTION("shell nominal within tolerance groups") {
    const auto parsed = parse_gradient_table(
        "0 995 1005 1040\n", "0 1 0 0\n0 0 1 0\n0 0 0 1\n");
    REQUIRE(parsed.scheme.shells.size() == 1);
    CHECK(parsed.scheme.shells[0].directions.size() == 3);
  }
}

TEST_CASE("rvol roundtrip and format guards") {
  const std::string path = temp_path("robnoddi_test.rvol");
  RawVolume vol;
  vol.dims = {3, 4, 5};
  vol.nc = 2;
  vol.data.resize(vol.size());
  Rng rng(17);
  for (auto& v : vol.data)
    v = static_cast<float>(rng.uniform01());

  SECTION("write then read is bitwise equal") {
    write_rvol(path, vol);
    const RawVolume back = read_rvol(path);
    CHECK(back.dims == vol.dims);
    CHECK(back.nc == vol.nc);
    CHECK(back.data == vol.data);
  }
  SECTION("header 2x2x2x3 means exactly 96 payload bytes") {
    RawVolume small;
    small.dims = {2, 2, 2};
    small.nc = 3;
    small.data.assign(24, 1.0f);
    write_rvol(path, small);
    const auto file_size = fs::file_size(path);
    const std::string header = "RVOL1 2 2 2 3 dtype=f32 order=xyzc\n";
    CHECK(file_size == header.size() + 96);
  }
  SECTION("truncated payload is corrupt") {
    write_rvol(path, vol);
    fs::resize_file(path, fs::file_size(path) - 4);
    CHECK_THROWS_WITH(read_rvol(path), Catch::Matchers::ContainsSubstring("corrupt"));
  }
  SECTION("unknown magic is a version error") {
    std::ofstream out(path, std::ios::binary);
    out << "RVOL9 2 2 2 3 dtype=f32 order=xyzc\n";
    out.close();
    CHECK_THROWS_WITH(read_rvol(path), Catch::Matchers::ContainsSubstring("version"));
  }
  SECTION("unknown dtype token is a version error") {
    std::ofstream out(path, std::ios::binary);
    out << "RVOL1 1 1 1 1 dtype=f64 order=xyzc\n";
    for (int i = 0; i < 8; ++i)
      out.put(0);
    out.close();
    CHECK_THROWS_WITH(read_rvol(path), Catch::Matchers::ContainsSubstring("unknown"));
  }
  fs::remove(path);
}

TEST_CASE("dwi volume file roundtrip preserves values to f32") {
  DwiVolume vol = tiny_volume();
  Rng rng(4);
  for (auto& v : vol.data)
    v = rng.uniform01();
  const std::string path = temp_path("robnoddi_dwi.rvol");
  write_rvol(path, to_raw(vol));
  const DwiVolume back = from_raw(read_rvol(path), vol.scheme, vol.map);
  REQUIRE(back.data.size() == vol.data.size());
  for (std::size_t i = 0; i < vol.data.size(); ++i)
    CHECK(back.data[i] == static_cast<double>(static_cast<float>(vol.data[i])));
  fs::remove(path);
}

TEST_CASE("normalize_by_b0") {
  DwiVolume vol = tiny_volume();
  const std::size_t v0 = voxel_index(vol.dims, 2, 3, 4);

  SECTION("unit b0 leaves diffusion channels unchanged") {
    double* p = vol.voxel(v0);
    p[0] = p[1] = 1.0;
    for (int c = 2; c < 8; ++c)
      p[c] = 0.1 * c;
    const DwiVolume out = normalize_by_b0(vol);
    for (int c = 2; c < 8; ++c)
      CHECK(out.voxel(v0)[c] == Catch::Approx(0.1 * c).margin(1e-15));
    CHECK(out.normalized);
  }
  SECTION("global scale is removed") {
    double* p = vol.voxel(v0);
    p[0] = p[1] = 7.0;
    for (int c = 2; c < 8; ++c)
      p[c] = 7.0 * 0.05 * c;
    const DwiVolume out = normalize_by_b0(vol);
    for (int c = 2; c < 8; ++c)
      CHECK(out.voxel(v0)[c] == Catch::Approx(0.05 * c).margin(1e-12));
  }
  SECTION("zero b0 masks the voxel out") {
    double* p = vol.voxel(v0);
    p[0] = p[1] = 0.0;
    p[3] = 0.5;
    const DwiVolume out = normalize_by_b0(vol);
    CHECK(out.mask[v0] == 0);
    for (int c = 0; c < 8; ++c)
      CHECK(out.voxel(v0)[c] == 0.0);
  }
  SECTION("results clamp to [0, 2]") {
    double* p = vol.voxel(v0);
    p[0] = p[1] = 0.1;
    p[2] = 5.0;
    const DwiVolume out = normalize_by_b0(vol);
    CHECK(out.voxel(v0)[2] == 2.0);
  }
  SECTION("missing b0 channels is an error") {
    DwiVolume nob0 = tiny_volume();
    nob0.scheme.b0_count = 0;
    nob0.map = canonical_channel_map(nob0.scheme);
    nob0.channels = nob0.map.total_channels;
    nob0.data.assign(voxel_count(nob0.dims) * static_cast<std::size_t>(nob0.channels), 0.5);
    CHECK_THROWS_WITH(normalize_by_b0(nob0), Catch::Matchers::ContainsSubstring("b0"));
  }
}

TEST_CASE("extract_patches") {
  DwiVolume vol = tiny_volume(); // 8^3, 6 diffusion + 2 b0 channels
  Rng rng(9);
  for (auto& v : vol.data)
    v = rng.uniform01();
  ParameterVolume pv;
  pv.dims = vol.dims;
  const std::size_t n = voxel_count(pv.dims);
  pv.vic.assign(n, 0.5);
  pv.viso.assign(n, 0.1);
  pv.od.assign(n, 0.3);
  pv.mu.assign(n, UnitDirection{0, 0, 1});
  pv.mask.assign(n, 1);

  SECTION("8^3 volume, w=5, stride=3 gives the {0,3}^3 corner grid: 8 patches") {
    const auto patches = extract_patches(vol, pv, 5, 3);
    REQUIRE(patches.size() == 8);
    CHECK(patches[0].corner == std::array<int, 3>{0, 0, 0});
    CHECK(patches[1].corner == std::array<int, 3>{3, 0, 0}); // x fastest
    CHECK(patches[2].corner == std::array<int, 3>{0, 3, 0});
    CHECK(patches.back().corner == std::array<int, 3>{3, 3, 3});
    for (const auto& p : patches) {
      CHECK(p.channels == 6); // b0 channels are dropped
      CHECK(p.input.size() == 5u * 5u * 5u * 6u);
      CHECK(p.target.size() == 3u * 3u * 3u * 3u);
    }
  }
  SECTION("input gathers diffusion channels in scheme order") {
    const auto patches = extract_patches(vol, pv, 5, 3);
    const auto& p = patches[0];
    // voxel (1,2,3) of patch at corner (0,0,0) is volume voxel (1,2,3)
    const double* vox = vol.voxel(voxel_index(vol.dims, 1, 2, 3));
    const std::size_t pvox = (static_cast<std::size_t>(3) * 5 + 2) * 5 + 1;
    for (int j = 0; j < 6; ++j)
      CHECK(p.input[pvox * 6 + static_cast<std::size_t>(j)] ==
            vox[vol.map.shell_channels[0][static_cast<std::size_t>(j)]]);
  }
  SECTION("target is the center block of (vic, viso, od)") {
    const auto patches = extract_patches(vol, pv, 5, 3);
    CHECK(patches[0].target[0] == 0.5);
    CHECK(patches[0].target[1] == 0.1);
    CHECK(patches[0].target[2] == 0.3);
  }
  SECTION("fully masked volume yields no patches") {
    ParameterVolume empty = pv;
    empty.mask.assign(n, 0);
    CHECK(extract_patches(vol, empty, 5, 3).empty());
  }
  SECTION("stride <= w-2 covers every interior foreground voxel") {
    const auto patches = extract_patches(vol, pv, 5, 3);
    std::vector<int> covered(n, 0);
    for (const auto& p : patches)
      for (int z = 1; z < 4; ++z)
        for (int y = 1; y < 4; ++y)
          for (int x = 1; x < 4; ++x)
            covered[voxel_index(pv.dims, p.corner[0] + x, p.corner[1] + y,
                                p.corner[2] + z)] = 1;
    // interior voxels reachable by the stride grid: [1, 7) in each axis
    for (int z = 1; z < 7; ++z)
      for (int y = 1; y < 7; ++y)
        for (int x = 1; x < 7; ++x)
          CHECK(covered[voxel_index(pv.dims, x, y, z)] == 1);
  }
  SECTION("patch larger than the volume") {
    CHECK_THROWS_WITH(extract_patches(vol, pv, 9, 3),
                      Catch::Matchers::ContainsSubstring("larger"));
  }
  SECTION("even or tiny w rejected") {
    CHECK_THROWS_AS(extract_patches(vol, pv, 4, 3), DomainError);
    CHECK_THROWS_AS(extract_patches(vol, pv, 1, 3), DomainError);
  }
}

TEST_CASE("manifest roundtrip") {
  const std::string path = temp_path("robnoddi_manifest.txt");
  Manifest m;
  m.set("format", "robnoddi-dataset-v1");
  m.set("volume.0.split", "train");
  m.set("volume.0.dwi", "vol_000.dwi.rvol");
  write_manifest(path, m);
  const Manifest back = read_manifest(path);
  CHECK(back.get("format") == "robnoddi-dataset-v1");
  CHECK(back.get("volume.0.split") == "train");
  CHECK(back.has("volume.0.dwi"));
  CHECK_THROWS_AS(back.get("missing.key"), IoError);
  fs::remove(path);
}
