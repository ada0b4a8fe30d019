#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "doctest.h"
#include "latentmap/extract/extract.hpp"
#include "mc_tables.hpp"

using namespace latentmap;

namespace {

struct MapFixture {
  GridSpec spec = GridSpec::desk();
  NetworkConfig cfg = NetworkConfig::from_grid(spec);
  Networks<float> nets{cfg, 3};
  NeuralMap map{spec, cfg.latent_shape()};
  std::mt19937_64 rng{17};

  void put(const VoxelIndex& v, double scale = 3.0, std::int64_t count = 1) {
    VoxelCell& c = map.allocate(v);
    std::normal_distribution<float> n(0.0f, static_cast<float>(scale));
    for (auto& x : c.z_sum.values()) x = n(rng) * static_cast<float>(count);
    c.count = count;
  }
  MapDecoder decoder(ExtractionConfig cfg = {}) const { return MapDecoder(map, nets.decoder, nets.fusion, cfg); }
};

// Binary occupancy (1 inside, 0 outside) or, with ramp = true, the
// distance-derived field clamp(0.5 + (r - |x - c|) / spacing, 0, 1) whose
// 0.5 level set is the sphere.
OccupancyGrid sphere_grid(double r, double spacing, const Vec3& center, bool ramp = false) {
  OccupancyGrid g;
  g.spacing = spacing;
  const int n = static_cast<int>(std::ceil(2.4 * r / spacing)) + 1;
  g.origin = center - Vec3::Constant(1.2 * r);
  g.dims = {n, n, n};
  g.states.resize(std::size_t(n) * n * n);
  g.probabilities.resize(g.states.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        const double d = (g.position(i, j, k) - center).norm();
        const double p = ramp ? std::clamp(0.5 + (r - d) / spacing, 0.0, 1.0) : (d <= r ? 1.0 : 0.0);
        g.probabilities[g.index(i, j, k)] = static_cast<float>(p);
        g.states[g.index(i, j, k)] = p >= 0.5 ? NodeState::Occupied : NodeState::Free;
      }
  return g;
}

}  // namespace

TEST_CASE("query counts per voxel edge") {
  CHECK(queries_per_voxel_edge(GridSpec::paper_half_meter(), 100) == 60);
  CHECK(queries_per_voxel_edge(GridSpec::paper_one_meter(), 100) == 110);
  CHECK(GridSpec::paper_half_meter().d_q == doctest::Approx(0.6));
}

TEST_CASE("extraction config") {
  const GridSpec spec = GridSpec::desk();
  ExtractionConfig c;
  CHECK_NOTHROW(c.validate(spec));
  c.tau_occ = 0;
  CHECK_THROWS_AS(c.validate(spec), std::invalid_argument);
  c = {};
  c.query_density = 3;  // 1.5 nodes per 0.5 m edge
  CHECK_THROWS_AS(c.validate(spec), std::invalid_argument);
  CHECK(blend_space_from_string("logit") == BlendSpace::Logit);
  CHECK_THROWS(blend_space_from_string("mean"));
}

TEST_CASE("blend weights") {
  const GridSpec spec = GridSpec::desk();  // d_V 0.5, d_q 0.6: core half 0.2, face 0.3
  const VoxelIndex v{0, 0, 0};
  CHECK(blend_weight(Vec3(0.25, 0.25, 0.25), v, spec) == 1.0);
  CHECK(blend_weight(Vec3(0.25 + 0.2, 0.25, 0.25), v, spec) == doctest::Approx(1.0));
  CHECK(blend_weight(Vec3(0.25 + 0.25, 0.25, 0.25), v, spec) == doctest::Approx(0.5));
  CHECK(blend_weight(Vec3(0.25 + 0.3, 0.25, 0.25), v, spec) == 0.0);
  CHECK(blend_weight(Vec3(0.5, 0.5, 0.25), v, spec) == doctest::Approx(0.25));
  // Weights of the eight voxels sharing a corner are equal there.
  double total = 0;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int c = 0; c < 2; ++c) total += blend_weight(Vec3(0.5, 0.5, 0.5), {a, b, c}, spec);
  CHECK(total == doctest::Approx(1.0));
}

TEST_CASE("query states") {
  MapFixture fx;
  fx.put({0, 0, 0});
  fx.map.allocate({1, 0, 0});  // allocated, never observed
  const auto dec = fx.decoder();

  SUBCASE("voxel center is the single-owner decode") {
    const Vec3 c = index_to_center({0, 0, 0}, fx.spec.d_V);
    const auto q = dec.query(c);
    CHECK(q.probability == dec.decode_in_voxel({0, 0, 0}, c));
    CHECK(owners(fx.map, c, true).size() == 1);
  }
  SUBCASE("unknown and free") {
    CHECK(dec.query(Vec3(5, 5, 5)).state == NodeState::Unknown);
    const Vec3 in_empty = index_to_center({1, 0, 0}, fx.spec.d_V);
    CHECK(dec.query(in_empty).state == NodeState::Free);
    CHECK(dec.query(in_empty).probability == 0.0f);
    // In the overlap the observed neighbour alone decides.
    const Vec3 overlap(0.52, 0.25, 0.25);
    REQUIRE(owners(fx.map, overlap, true).size() == 2);
    CHECK(dec.query(overlap).probability == dec.decode_in_voxel({0, 0, 0}, overlap));
  }
  SUBCASE("regions") {
    const auto unknown = extract_grid(dec, Vec3(3, 3, 3), Vec3(3.5, 3.5, 3.5));
    CHECK(unknown.size() == 11 * 11 * 11);
    CHECK(unknown.count(NodeState::Unknown) == unknown.size());
    const auto free = extract_grid(dec, Vec3(0.55, 0.05, 0.05), Vec3(0.95, 0.45, 0.45));
    CHECK(free.count(NodeState::Free) == free.size());
    CHECK(extract_grid(dec, Vec3(0, 0, 0), Vec3(1, 1, 0)).empty());
  }
}

TEST_CASE("blending matches a closed-form weight computation") {
  MapFixture fx;
  fx.put({0, 0, 0});
  fx.put({1, 0, 0});
  fx.put({1, 1, 0});
  for (BlendSpace space : {BlendSpace::Probability, BlendSpace::Logit}) {
    ExtractionConfig cfg;
    cfg.blend = space;
    const auto dec = fx.decoder(cfg);
    std::uniform_real_distribution<double> strip(0.45, 0.55), u(0.05, 0.7);
    SUBCASE("midplane") {
      const Vec3 p(0.5, 0.25, 0.1);
      const double pa = dec.decode_in_voxel({0, 0, 0}, p), pb = dec.decode_in_voxel({1, 0, 0}, p);
      const auto logit = [](double x) { return std::log(x / (1 - x)); };
      const double want = space == BlendSpace::Probability ? 0.5 * (pa + pb)
                                                           : 1 / (1 + std::exp(-0.5 * (logit(pa) + logit(pb))));
      CHECK(std::abs(dec.query(p).probability - want) < 1e-6);
    }
    for (int t = 0; t < 100; ++t) {
      const Vec3 p(strip(fx.rng), u(fx.rng), 0.1 + 0.1 * u(fx.rng));
      double num = 0, den = 0;
      for (const VoxelIndex v : {VoxelIndex{0, 0, 0}, VoxelIndex{1, 0, 0}, VoxelIndex{1, 1, 0}}) {
        const Vec3 c = index_to_center(v, 0.5);
        double w = 1;
        for (int a = 0; a < 3; ++a) w *= std::clamp((0.3 - std::abs(p[a] - c[a])) / 0.1, 0.0, 1.0);
        if (w == 0) continue;
        const double pv = dec.decode_in_voxel(v, p);
        num += w * (space == BlendSpace::Probability ? pv : std::log(pv / (1 - pv)));
        den += w;
      }
      double want = num / den;
      if (space == BlendSpace::Logit) want = 1 / (1 + std::exp(-want));
      CHECK(std::abs(dec.query(p).probability - want) < 1e-6);
    }
  }
}

TEST_CASE("batched and single queries agree") {
  MapFixture fx;
  for (int i = 0; i < 3; ++i) fx.put({i, 0, 0});
  const auto dec = fx.decoder();
  std::uniform_real_distribution<double> u(-0.2, 1.7);
  std::vector<Vec3> pts;
  for (int t = 0; t < 200; ++t) pts.emplace_back(u(fx.rng), 0.5 * u(fx.rng), 0.3 * u(fx.rng));
  const auto batch = dec.query(pts);
  for (std::size_t n = 0; n < pts.size(); ++n) {
    const auto one = dec.query(pts[n]);
    CHECK(one.state == batch[n].state);
    CHECK(one.probability == batch[n].probability);
  }
}

TEST_CASE("interpolation off with d_q = d_V is per-voxel decoding") {
  MapFixture fx;
  fx.spec.d_q = fx.spec.d_V;
  fx.map.spec = fx.spec;
  fx.put({0, 0, 0});
  fx.put({1, 0, 0});
  ExtractionConfig cfg;
  cfg.interpolate_boundaries = false;
  const auto dec = fx.decoder(cfg);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 100; ++t) {
    const Vec3 p(u(fx.rng), 0.5 * u(fx.rng), 0.5 * u(fx.rng));
    const VoxelIndex home = world_to_index(p, 0.5);
    CHECK(dec.query(p).probability == dec.decode_in_voxel(home, p));
  }
}

TEST_CASE("probability is continuous across voxel faces") {
  MapFixture fx;
  fx.put({0, 0, 0});
  fx.put({1, 0, 0});
  const double eps = 0.01;
  double worst_jump_off = 0;
  int literal_misses = 0;
  for (bool interp : {true, false}) {
    ExtractionConfig cfg;
    cfg.interpolate_boundaries = interp;
    const auto dec = fx.decoder(cfg);
    std::uniform_real_distribution<double> u(0.05, 0.45);
    for (int t = 0; t < 50; ++t) {
      const double y = u(fx.rng), z = u(fx.rng);
      auto p = [&](double x) { return static_cast<double>(dec.query(Vec3(x, y, z)).probability); };
      auto pv = [&](int i, double x) { return static_cast<double>(dec.decode_in_voxel({i, 0, 0}, Vec3(x, y, z))); };
      const double across = std::abs(p(0.5 + eps / 2) - p(0.5 - eps / 2));
      // Largest same-distance variation with both points inside one voxel,
      // scanned along the whole line through both voxels.
      double local = 0;
      for (double x = 0.005; x + eps < 0.995; x += eps / 4) {
        if (x < 0.5 && x + eps >= 0.5) continue;
        local = std::max(local, std::abs(p(x + eps) - p(x)));
      }
      if (interp) {
        // Blending p = w pA + (1 - w) pB adds at most |dw| |pA - pB| on top
        // of the owners' own variation, and |dw| = eps / 0.1 here. That term
        // shrinks with eps, so it is not a seam.
        const double xa = 0.5 - eps / 2, xb = 0.5 + eps / 2;
        const double own = std::max(std::abs(pv(0, xb) - pv(0, xa)), std::abs(pv(1, xb) - pv(1, xa)));
        const double disagreement = std::max(std::abs(pv(0, xa) - pv(1, xa)), std::abs(pv(0, xb) - pv(1, xb)));
        CHECK(across <= own + eps / 0.1 * disagreement + 1e-6);
        literal_misses += across > local + 1e-6;
        CHECK(std::abs(p(0.5 + 1e-7) - p(0.5 - 1e-7)) < 1e-5);
      } else {
        worst_jump_off = std::max(worst_jump_off, across - local);
      }
    }
  }
  // The cruder bound (same-distance variation elsewhere in the voxels) can
  // be exceeded slightly when the neighbours disagree most at the face.
  MESSAGE("lines over the same-distance bound: " << literal_misses << "/50; hard-boundary excess "
                                                 << worst_jump_off);
  CHECK(literal_misses <= 5);
  CHECK(worst_jump_off > 1e-3);  // the hard boundary does show a seam
}

TEST_CASE("states form a trichotomy") {
  MapFixture fx;
  std::uniform_int_distribution<int> coin(0, 2);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) {
      const int c = coin(fx.rng);
      if (c == 1) fx.map.allocate({i, j, 0});
      if (c == 2) fx.put({i, j, 0});
    }
  ExtractionConfig cfg;
  cfg.tau_occ = 0.5;
  const auto dec = fx.decoder(cfg);
  std::uniform_real_distribution<double> u(-0.3, 2.3);
  for (int t = 0; t < 500; ++t) {
    const Vec3 p(u(fx.rng), 0.75 * u(fx.rng), 0.25 * u(fx.rng));
    const auto own = owners(fx.map, p, true);
    bool any_observed = false;
    for (const auto& v : own) any_observed |= fx.map.cells.at(v).count > 0;
    const auto q = dec.query(p);
    if (own.empty()) {
      CHECK(q.state == NodeState::Unknown);
    } else if (!any_observed) {
      CHECK(q.state == NodeState::Free);
    } else {
      CHECK(q.state == (q.probability >= 0.5f ? NodeState::Occupied : NodeState::Free));
    }
  }
}

TEST_CASE("raising tau never adds occupied nodes") {
  MapFixture fx;
  fx.put({0, 0, 0});
  fx.put({1, 0, 0});
  std::vector<NodeState> prev;
  for (double tau : {0.05, 0.2, 0.4, 0.5, 0.6, 0.8}) {
    ExtractionConfig cfg;
    cfg.tau_occ = tau;
    const auto g = extract_grid(fx.decoder(cfg), Vec3(0, 0, 0), Vec3(1, 0.5, 0.5));
    if (!prev.empty())
      for (std::size_t n = 0; n < g.size(); ++n)
        if (prev[n] == NodeState::Free) CHECK(g.states[n] != NodeState::Occupied);
    prev = g.states;
  }
}

TEST_CASE("marching cubes") {
  SUBCASE("uniform grids give nothing") {
    auto g = sphere_grid(0.001, 0.1, Vec3(10, 10, 10));  // no node inside
    CHECK(marching_cubes(g, 0.5).empty());
    std::fill(g.probabilities.begin(), g.probabilities.end(), 1.0f);
    CHECK(marching_cubes(g, 0.5).empty());
  }
  SUBCASE("single corner cases follow the table") {
    for (int corner = 0; corner < 8; ++corner) {
      OccupancyGrid g;
      g.spacing = 1;
      g.dims = {2, 2, 2};
      g.states.assign(8, NodeState::Free);
      g.probabilities.assign(8, 0.0f);
      static constexpr int off[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                                        {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
      g.probabilities[g.index(off[corner][0], off[corner][1], off[corner][2])] = 1.0f;
      const auto m = marching_cubes(g, 0.5);
      REQUIRE(m.triangles.size() == 1);
      // Case index has every bit set except this corner's.
      const int cube = 0xff & ~(1 << corner);
      int edges = 0;
      for (int t = 0; mc::kTriTable[cube][t] != -1; ++t) ++edges;
      CHECK(edges == 3);
      const Vec3 c(off[corner][0], off[corner][1], off[corner][2]);
      for (const auto& v : m.vertices) CHECK((v - c).norm() == doctest::Approx(0.5));
      // Normal points away from the occupied corner.
      const auto& t = m.triangles[0];
      const Vec3 n = (m.vertices[t[1]] - m.vertices[t[0]]).cross(m.vertices[t[2]] - m.vertices[t[0]]);
      CHECK(n.dot(m.vertices[t[0]] - c) > 0);
    }
  }
  SUBCASE("analytic sphere") {
    const double r = 0.5;
    const Vec3 center(0.013, -0.007, 0.004);
    const double area0 = 4 * std::numbers::pi * r * r, vol0 = 4.0 / 3.0 * std::numbers::pi * r * r * r;
    for (bool ramp : {false, true}) {
      const auto g = sphere_grid(r, 0.02, center, ramp);
      const auto m = marching_cubes(g, 0.5);
      const double area = m.area() / area0, vol = m.volume() / vol0;
      MESSAGE(std::string(ramp ? "distance field" : "binary field") << ": area ratio " << area << ", volume ratio " << vol);
      CHECK(std::abs(vol - 1) < 0.02);
      if (ramp) {
        CHECK(std::abs(area - 1) < 0.02);
      } else {
        // A 0/1 field puts every vertex at an edge midpoint; the resulting
        // terraced surface overstates area by roughly 8-9% no matter how
        // fine the lattice is. Pin the bias so a regression shows up.
        CHECK(area > 1.06);
        CHECK(area < 1.11);
      }
      const Vec3 lo = g.origin - Vec3::Constant(g.spacing),
                 hi = g.position(g.dims[0] - 1, g.dims[1] - 1, g.dims[2] - 1) + Vec3::Constant(g.spacing);
      for (const auto& v : m.vertices) {
        const bool inside = ((v - lo).array() >= 0).all() && ((hi - v).array() >= 0).all();
        CHECK(inside);
      }
      // Closed surface: every edge is shared by exactly two triangles.
      std::map<std::pair<int, int>, int> uses;
      for (const auto& t : m.triangles)
        for (int k = 0; k < 3; ++k) ++uses[{std::min(t[k], t[(k + 1) % 3]), std::max(t[k], t[(k + 1) % 3])}];
      std::size_t odd = 0;
      for (const auto& [_, n] : uses) odd += n != 2;
      CHECK(odd == 0);
    }
    // Binary field at the default tau: vertices slide 45% of a spacing
    // outward, so the volume grows accordingly.
    const auto m = marching_cubes(sphere_grid(r, 0.02, center), 0.05);
    const double r_eff = r + 0.45 * 0.02;
    CHECK(m.volume() / vol0 == doctest::Approx(std::pow(r_eff / r, 3)).epsilon(0.02));
  }
  SUBCASE("cells touching unknown are skipped") {
    auto g = sphere_grid(0.5, 0.05, Vec3::Zero());
    const std::size_t full = marching_cubes(g, 0.5).triangles.size();
    for (int j = 0; j < g.dims[1]; ++j)
      for (int k = 0; k < g.dims[2]; ++k)
        for (int i = g.dims[0] / 2; i < g.dims[0]; ++i) g.states[g.index(i, j, k)] = NodeState::Unknown;
    const auto half = marching_cubes(g, 0.5);
    CHECK(half.triangles.size() < full);
    for (const auto& v : half.vertices) CHECK(v.x() <= g.position(g.dims[0] / 2 - 1, 0, 0).x() + 1e-12);
  }
}

TEST_CASE("mesh from a map stays inside the allocated region") {
  MapFixture fx;
  fx.put({0, 0, 0});
  fx.put({1, 0, 0});
  ExtractionConfig cfg;
  cfg.tau_occ = 0.5;
  const auto dec = fx.decoder(cfg);
  const auto m = extract_mesh(dec);
  for (const auto& v : m.vertices) {
    CHECK(v.x() >= -1e-9);
    CHECK(v.x() <= 1.0 + 1e-9);
  }
  for (const auto& t : m.triangles) CHECK(triangle_area(m.vertices[t[0]], m.vertices[t[1]], m.vertices[t[2]]) > 1e-12);
}

TEST_CASE("grid files") {
  MapFixture fx;
  fx.put({0, 0, 0});
  fx.map.allocate({1, 0, 0});
  const auto g = extract_grid(fx.decoder(), Vec3(-0.2, 0, 0), Vec3(1.3, 0.5, 0.5));
  REQUIRE(g.count(NodeState::Unknown) > 0);
  REQUIRE(g.count(NodeState::Free) > 0);
  const auto path = std::filesystem::temp_directory_path() / "latentmap_grid.lmgrid";
  write_grid(path, g);
  const auto back = read_grid(path);
  CHECK(back.dims == g.dims);
  CHECK(back.origin == g.origin);
  CHECK(back.spacing == g.spacing);
  CHECK(back.states == g.states);
  for (std::size_t n = 0; n < g.size(); ++n) CHECK(std::abs(back.probabilities[n] - g.probabilities[n]) <= 0.5f / 65535 + 1e-7f);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  CHECK_THROWS(read_grid(path));
  std::filesystem::remove(path);
}
