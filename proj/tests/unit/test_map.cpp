#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "doctest.h"
#include "latentmap/map/latent_map.hpp"
#include "latentmap/sim/scene.hpp"

using namespace latentmap;

namespace {

struct Fixture {
  GridSpec spec = GridSpec::desk();
  NetworkConfig cfg = NetworkConfig::from_grid(spec);
  Networks<float> nets{cfg, 11};
  Scene room = make_room_scene(2);
  SensorModel cam = [] {
    SensorModel s;
    s.width = 48;
    s.height = 36;
    s.max_range = 3.0;
    return s;
  }();

  std::vector<ScanFrame> scans(int n) const {
    TrajectoryOptions opt;
    return simulate_scans(room, generate_trajectory(room, n, opt, 5), cam);
  }
  NeuralMap empty_map() const { return NeuralMap(spec, cfg.latent_shape()); }
};

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

std::filesystem::path tmp(const char* name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST_CASE("policy and gate") {
  IntegrationPolicy p;
  CHECK_NOTHROW(p.validate());
  p.min_update_fraction = 1.5;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = {};
  p.input_subsample_fraction = -0.1;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  CHECK(gate_threshold(0.01, 0) == 1);
  CHECK(gate_threshold(0.01, 100) == 1);
  CHECK(gate_threshold(0.01, 101) == 2);
  CHECK(gate_threshold(0.01, 1000) == 10);
}

TEST_CASE("subsampling is seeded and uniform") {
  const auto a = subsample_indices(1000, 0.1, 7, 3);
  CHECK(a.size() == 100);
  CHECK(std::is_sorted(a.begin(), a.end()));
  CHECK(std::adjacent_find(a.begin(), a.end()) == a.end());
  CHECK(a == subsample_indices(1000, 0.1, 7, 3));
  CHECK(a != subsample_indices(1000, 0.1, 7, 4));
  CHECK(a != subsample_indices(1000, 0.1, 8, 3));
  CHECK(subsample_indices(10, 1.0, 0, 0).size() == 10);
  CHECK(subsample_indices(10, 0.0, 0, 0).empty());
  // Each index should be kept about 10% of the time over many frames.
  std::vector<int> hits(200, 0);
  for (int f = 0; f < 2000; ++f)
    for (auto i : subsample_indices(200, 0.1, 1, f)) ++hits[i];
  for (int h : hits) CHECK(std::abs(h / 2000.0 - 0.1) < 0.035);
}

TEST_CASE("empty cloud allocates the frustum only") {
  Fixture fx;
  NeuralMap map = fx.empty_map();
  ScanFrame f;
  f.pose = Pose::from_yaw(0.2, Vec3(1.5, 1.5, 1.2));
  f.sensor = fx.cam;
  const auto rep = integrate(map, f, fx.nets.encoder, {});
  const auto frustum = frustum_voxels(f.pose, f.sensor, f.sensor.max_range, fx.spec);
  CHECK(rep.updated.empty());
  CHECK(rep.skipped.empty());
  CHECK(rep.used_points == 0);
  CHECK(map.cells.size() == frustum.size());
  CHECK(rep.newly_allocated == frustum.size());
  for (const auto& [v, c] : map.cells) {
    CHECK(frustum.count(v) == 1);
    CHECK(c.count == 0);
    CHECK(std::all_of(c.z_sum.values().begin(), c.z_sum.values().end(), [](float x) { return x == 0.0f; }));
  }
  CHECK(map.observed_count() == 0);
}

TEST_CASE("integration preconditions") {
  Fixture fx;
  NeuralMap map = fx.empty_map();
  ScanFrame f = fx.scans(1).front();
  ScanFrame bad = f;
  bad.pose.R(0, 0) = 2.0;
  CHECK_THROWS_AS(integrate(map, bad, fx.nets.encoder, {}), InvalidPose);
  CHECK_THROWS(integrate(map, f, Encoder<float>{}, {}));
  NetworkConfig other = fx.cfg;
  other.latent_channels = 8;
  CHECK_THROWS_AS(integrate(map, f, Encoder<float>(other, 1), {}), ShapeError);
  CHECK(map.cells.empty());
}

TEST_CASE("same scan twice doubles the sums") {
  Fixture fx;
  const ScanFrame f = fx.scans(1).front();
  NeuralMap once = fx.empty_map(), twice = fx.empty_map();
  const auto r1 = integrate(once, f, fx.nets.encoder, {});
  integrate(twice, f, fx.nets.encoder, {});
  const auto r2 = integrate(twice, f, fx.nets.encoder, {});
  REQUIRE(!r1.updated.empty());
  CHECK(r2.updated == r1.updated);
  CHECK(r2.newly_allocated == 0);
  for (const auto& v : r1.updated) {
    const VoxelCell& a = once.cells.at(v);
    const VoxelCell& b = twice.cells.at(v);
    CHECK(b.count == 2);
    for (std::size_t i = 0; i < a.z_sum.size(); ++i) CHECK(b.z_sum[i] == 2.0f * a.z_sum[i]);
    // Mean of equal codes equals the single code, so fused codes agree.
    CHECK(bit_equal(*fused_code(once, v, fx.nets.fusion), *fused_code(twice, v, fx.nets.fusion)));
  }
  CHECK(twice.stats.scans_integrated == 2);
}

TEST_CASE("counts match a brute-force gate recomputation") {
  Fixture fx;
  const auto frames = fx.scans(8);
  NeuralMap map = fx.empty_map();
  IntegrationPolicy pol;
  pol.seed = 9;
  for (const auto& f : frames) integrate(map, f, fx.nets.encoder, pol);

  // Oracle: subsample each scan independently, bin points by brute-force
  // containment tests against every candidate voxel, apply the gate.
  std::map<VoxelIndex, std::int64_t> expected;
  std::set<VoxelIndex> touched;
  for (const auto& f : frames) {
    const auto keep = subsample_indices(f.points.size(), 0.10, 9, f.index);
    std::vector<Vec3> world;
    for (auto i : keep) world.push_back(f.pose.R * f.points.points[i] + f.pose.t);
    const std::size_t gate = std::max<std::size_t>(1, std::size_t(std::ceil(0.01 * double(world.size()))));
    std::map<VoxelIndex, std::size_t> counts;
    for (const auto& p : world) {
      const int ci = int(std::floor(p.x() / fx.spec.d_V)), cj = int(std::floor(p.y() / fx.spec.d_V)),
                ck = int(std::floor(p.z() / fx.spec.d_V));
      for (int a = ci - 1; a <= ci + 1; ++a)
        for (int b = cj - 1; b <= cj + 1; ++b)
          for (int c = ck - 1; c <= ck + 1; ++c) {
            const Vec3 lo = Vec3((a + 0.5) * fx.spec.d_V, (b + 0.5) * fx.spec.d_V, (c + 0.5) * fx.spec.d_V) -
                            Vec3::Constant(fx.spec.d_I / 2);
            const Vec3 rel = p - lo;
            if ((rel.array() >= 0).all() && (rel.array() < fx.spec.d_I).all()) ++counts[{a, b, c}];
          }
    }
    for (const auto& [v, n] : counts) {
      touched.insert(v);
      if (n >= gate) ++expected[v];
    }
  }
  REQUIRE(!expected.empty());
  for (const auto& v : touched) {
    REQUIRE(map.allocated(v));
    const auto it = expected.find(v);
    CHECK(map.cells.at(v).count == (it == expected.end() ? 0 : it->second));
  }
  for (const auto& [v, c] : map.cells) {
    if (!touched.count(v)) CHECK(c.count == 0);
  }
  CHECK(map.stats.voxels_updated ==
        std::accumulate(expected.begin(), expected.end(), std::int64_t{0},
                        [](std::int64_t s, const auto& kv) { return s + kv.second; }));
}

TEST_CASE("fused codes") {
  Fixture fx;
  const auto frames = fx.scans(8);
  NeuralMap map = fx.empty_map();
  IntegrationPolicy pol;
  pol.seed = 4;
  // Keep every code individually so the mean can be recomputed.
  std::map<VoxelIndex, std::vector<Tensor<float>>> stored;
  for (const auto& f : frames) {
    const PointCloud world = prepare_scan(f, pol);
    const std::size_t gate = gate_threshold(pol.min_update_fraction, world.size());
    for (const auto& [v, local] : partition_scan(world, fx.spec))
      if (local.size() >= gate) stored[v].push_back(fx.nets.encoder.encode(points_tensor<float>(local)));
    integrate(map, f, fx.nets.encoder, pol);
  }
  CHECK(!fused_code(map, {100, 100, 100}, fx.nets.fusion));
  bool saw_multi = false;
  for (const auto& [v, c] : map.cells) {
    if (c.count == 0) {
      CHECK(!fused_code(map, v, fx.nets.fusion));
      continue;
    }
    const auto& codes = stored.at(v);
    REQUIRE(codes.size() == std::size_t(c.count));
    saw_multi |= codes.size() > 1;
    Tensor<float> mean(codes.front().shape());
    for (const auto& z : codes)
      for (std::size_t i = 0; i < z.size(); ++i) mean[i] += z[i];
    for (auto& x : mean.values()) x /= float(codes.size());
    const Tensor<float> want = fx.nets.fusion.fuse(mean);
    const Tensor<float> got = *fused_code(map, v, fx.nets.fusion);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-6));
    if (c.count == 1) CHECK(bit_equal(got, fx.nets.fusion.fuse(c.z_sum)));
  }
  CHECK(saw_multi);
}

TEST_CASE("accumulation is order invariant") {
  Fixture fx;
  const auto frames = fx.scans(6);
  NeuralMap fwd = fx.empty_map(), rev = fx.empty_map();
  for (const auto& f : frames) integrate(fwd, f, fx.nets.encoder, {});
  for (auto it = frames.rbegin(); it != frames.rend(); ++it) integrate(rev, *it, fx.nets.encoder, {});
  REQUIRE(fwd.cells.size() == rev.cells.size());
  for (const auto& [v, a] : fwd.cells) {
    const VoxelCell& b = rev.cells.at(v);
    CHECK(a.count == b.count);
    for (std::size_t i = 0; i < a.z_sum.size(); ++i) CHECK(std::abs(a.z_sum[i] - b.z_sum[i]) <= 1e-5f * (1 + std::abs(a.z_sum[i])));
    // Per-voxel memory does not depend on the count.
    CHECK(a.z_sum.size() == numel(fx.cfg.latent_shape()));
  }
}

TEST_CASE("snapshots") {
  Fixture fx;
  SUBCASE("empty map") {
    const auto p = tmp("latentmap_empty.lmmap");
    save_snapshot(p, fx.empty_map());
    const NeuralMap back = load_snapshot(p);
    CHECK(back.cells.empty());
    CHECK(back.latent_shape == fx.cfg.latent_shape());
    std::filesystem::remove(p);
  }
  SUBCASE("after 8 scans") {
    NeuralMap map = fx.empty_map();
    for (const auto& f : fx.scans(8)) integrate(map, f, fx.nets.encoder, {});
    const auto p = tmp("latentmap_full.lmmap");
    save_snapshot(p, map);
    const NeuralMap back = load_snapshot(p);
    CHECK(back.cells.size() == map.cells.size());
    CHECK(back.stats.scans_integrated == 8);
    CHECK(back.spec.d_V == map.spec.d_V);
    for (const auto& [v, c] : map.cells) {
      CHECK(back.cells.at(v).count == c.count);
      CHECK(bit_equal(back.cells.at(v).z_sum, c.z_sum));
      if (c.count > 0) CHECK(bit_equal(*fused_code(back, v, fx.nets.fusion), *fused_code(map, v, fx.nets.fusion)));
    }

    SUBCASE("truncation at every tenth byte") {
      const auto size = std::filesystem::file_size(p);
      std::vector<char> bytes(size);
      std::ifstream(p, std::ios::binary).read(bytes.data(), std::streamsize(size));
      const auto cut = tmp("latentmap_cut.lmmap");
      for (std::size_t n = 0; n < size; n += std::max<std::size_t>(1, size / 10)) {
        std::ofstream(cut, std::ios::binary).write(bytes.data(), std::streamsize(n));
        CHECK_THROWS(load_snapshot(cut));
      }
      std::filesystem::remove(cut);
    }
    SUBCASE("version mismatch") {
      std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(8);
      const std::uint32_t v = 99;
      f.write(reinterpret_cast<const char*>(&v), 4);
      f.close();
      CHECK_THROWS_WITH(load_snapshot(p), doctest::Contains("version"));
    }
    std::filesystem::remove(p);
  }
}
