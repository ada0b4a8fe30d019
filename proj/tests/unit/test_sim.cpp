#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "doctest.h"
#include "latentmap/sim/scene.hpp"

using namespace latentmap;

namespace {

SensorModel camera(int w = 32, int h = 24, double hfov = std::numbers::pi / 2, double vfov = 1.2) {
  SensorModel s;
  s.width = w;
  s.height = h;
  s.hfov = hfov;
  s.vfov = vfov;
  s.max_range = 10.0;
  return s;
}

/// Closed-form first hit of a ray against a single primitive, or -1.
double ray_box(const Vec3& o, const Vec3& d, const Vec3& half) {
  double t0 = -1e300, t1 = 1e300;
  for (int a = 0; a < 3; ++a) {
    const double ta = (-half[a] - o[a]) / d[a], tb = (half[a] - o[a]) / d[a];
    t0 = std::max(t0, std::min(ta, tb));
    t1 = std::min(t1, std::max(ta, tb));
  }
  return (t0 <= t1 && t0 > 0) ? t0 : -1;
}

double ray_sphere(const Vec3& o, const Vec3& d, double r) {
  const double b = o.dot(d), c = o.squaredNorm() - r * r, disc = b * b - c;
  if (disc < 0) return -1;
  const double t = -b - std::sqrt(disc);
  return t > 0 ? t : -1;
}

double ray_cylinder(const Vec3& o, const Vec3& d, double r, double hh) {
  double best = -1;
  const double a = d.x() * d.x() + d.y() * d.y();
  const double b = o.x() * d.x() + o.y() * d.y();
  const double c = o.x() * o.x() + o.y() * o.y() - r * r;
  const double disc = b * b - a * c;
  if (a > 0 && disc >= 0) {
    const double t = (-b - std::sqrt(disc)) / a;
    if (t > 0 && std::abs(o.z() + t * d.z()) <= hh) best = t;
  }
  for (double z : {-hh, hh}) {
    if (d.z() == 0) continue;
    const double t = (z - o.z()) / d.z();
    const Vec3 p = o + t * d;
    if (t > 0 && p.x() * p.x() + p.y() * p.y() <= r * r && (best < 0 || t < best)) best = t;
  }
  return best;
}

}  // namespace

TEST_CASE("primitive distance fields") {
  Primitive b{Primitive::Type::Box, Pose::from_translation(Vec3(1, 0, 0)), Vec3(0.5, 0.5, 0.5)};
  CHECK(b.sdf(Vec3(1, 0, 0)) == doctest::Approx(-0.5));
  CHECK(b.sdf(Vec3(2.5, 0, 0)) == doctest::Approx(1.0));
  CHECK(b.sdf(Vec3(2.5, 1.5, 0)) == doctest::Approx(std::sqrt(2.0)));
  Primitive c{Primitive::Type::Cylinder, Pose::identity(), Vec3(0.5, 1.0, 0)};
  CHECK(c.sdf(Vec3(1.5, 0, 0)) == doctest::Approx(1.0));
  CHECK(c.sdf(Vec3(0, 0, 3)) == doctest::Approx(2.0));
  CHECK(c.sdf(Vec3(0, 0, 0)) == doctest::Approx(-0.5));
  Scene empty;
  CHECK(std::isinf(empty.sdf(Vec3::Zero())));
}

TEST_CASE("ground-truth meshes lie on their surfaces") {
  std::vector<Primitive> prims = {
      {Primitive::Type::Box, Pose::from_yaw(0.3, Vec3(1, 2, 0.5)), Vec3(0.4, 0.2, 0.5)},
      {Primitive::Type::Sphere, Pose::from_translation(Vec3(0, 0, 1)), Vec3(0.5, 0.5, 0.5)},
      {Primitive::Type::Cylinder, Pose::from_yaw(1.0, Vec3(-1, 0, 0.3)), Vec3(0.2, 0.3, 0)},
      {Primitive::Type::Plane, Pose::identity(), Vec3(1, 1, 0)}};
  for (const auto& p : prims) {
    const TriangleMesh m = p.mesh(0.05);
    REQUIRE(!m.empty());
    for (const auto& v : m.vertices) CHECK(std::abs(p.sdf(v)) < 1e-6);
    for (const auto& t : m.triangles) {
      for (int k = 0; k < 3; ++k) {
        if (p.type != Primitive::Type::Sphere) CHECK((m.vertices[t[k]] - m.vertices[t[(k + 1) % 3]]).norm() <= std::sqrt(2.0) * 0.05 + 1e-9);  // quad diagonals
      }
    }
  }
  const TriangleMesh box = prims[0].mesh(0.05);
  CHECK(box.area() == doctest::Approx(8 * (0.4 * 0.2 + 0.2 * 0.5 + 0.4 * 0.5)).epsilon(1e-9));
  CHECK(box.volume() == doctest::Approx(8 * 0.4 * 0.2 * 0.5).epsilon(1e-9));
  const TriangleMesh ball = prims[1].mesh(0.05);
  CHECK(std::abs(ball.area() / (4 * std::numbers::pi * 0.25) - 1) < 1e-3);
  const TriangleMesh cyl = prims[2].mesh(0.05);
  CHECK(cyl.volume() > 0);  // outward orientation
  CHECK(std::abs(cyl.volume() / (std::numbers::pi * 0.04 * 0.6) - 1) < 0.01);
}

TEST_CASE("scene ground truth drops buried faces") {
  Scene s;
  s.primitives.push_back({Primitive::Type::Box, Pose::identity(), Vec3(1, 1, 1)});
  s.primitives.push_back({Primitive::Type::Sphere, Pose::identity(), Vec3(0.5, 0.5, 0.5)});
  const TriangleMesh gt = s.ground_truth_mesh(0.1);
  for (const auto& t : gt.triangles) {
    const Vec3 c = (gt.vertices[t[0]] + gt.vertices[t[1]] + gt.vertices[t[2]]) / 3.0;
    CHECK(s.sdf(c) > -1e-6);
  }
  CHECK(gt.area() == doctest::Approx(24.0).epsilon(1e-9));
}

TEST_CASE("raycast matches closed-form intersections") {
  SUBCASE("empty scene") { CHECK(raycast_scan(Scene{}, Pose::identity(), camera()).empty()); }
  SUBCASE("plane at 2 m") {
    Scene s;
    Primitive plane{Primitive::Type::Plane, Pose::identity(), Vec3(5, 5, 0)};
    plane.pose.R = Eigen::AngleAxisd(-std::numbers::pi / 2, Vec3::UnitY()).toRotationMatrix();
    plane.pose.t = Vec3(2, 0, 0);
    s.primitives.push_back(plane);
    const SensorModel cam = camera();
    const PointCloud c = raycast_scan(s, Pose::identity(), cam);
    REQUIRE(c.size() == cam.ray_directions().size());
    for (const auto& p : c.points) {
      const Vec3 d = p.normalized();
      CHECK(std::abs(p.norm() - 2.0 / d.x()) < 1e-4);
    }
  }
  SUBCASE("unit sphere at 3 m") {
    Scene s;
    s.primitives.push_back({Primitive::Type::Sphere, Pose::from_translation(Vec3(3, 0, 0)), Vec3(1, 1, 1)});
    const PointCloud c = raycast_scan(s, Pose::identity(), camera(9, 9, 0.05, 0.05));
    REQUIRE(!c.empty());
    double nearest = 1e9;
    for (const auto& p : c.points) nearest = std::min(nearest, p.norm());
    CHECK(std::abs(nearest - 2.0) < 1e-4);
  }
  SUBCASE("every primitive type from a moved sensor") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-1, 1);
    const std::vector<Primitive> prims = {
        {Primitive::Type::Box, Pose::identity(), Vec3(0.6, 0.4, 0.5)},
        {Primitive::Type::Sphere, Pose::identity(), Vec3(0.7, 0.7, 0.7)},
        {Primitive::Type::Cylinder, Pose::identity(), Vec3(0.5, 0.6, 0)}};
    for (const auto& prim : prims) {
      Scene s;
      s.primitives.push_back(prim);
      for (int trial = 0; trial < 5; ++trial) {
        const Vec3 pos = Vec3(-3.0 + 0.3 * u(rng), 0.5 * u(rng), 0.5 * u(rng));
        const Pose pose = Pose::from_yaw(0.1 * u(rng), pos);
        const SensorModel cam = camera(24, 18, 0.9, 0.7);
        const PointCloud got = raycast_scan(s, pose, cam);
        std::size_t expected_hits = 0;
        std::size_t k = 0;
        for (const Vec3& ds : cam.ray_directions()) {
          const Vec3 d = pose.R * ds;
          const double t = prim.type == Primitive::Type::Box      ? ray_box(pose.t, d, prim.size)
                           : prim.type == Primitive::Type::Sphere ? ray_sphere(pose.t, d, prim.size.x())
                                                                  : ray_cylinder(pose.t, d, prim.size.x(), prim.size.y());
          if (t < 0) continue;
          ++expected_hits;
          // Rays are emitted in pixel order, so hits line up with the
          // expected ones unless a grazing ray was dropped.
          if (k < got.size() && std::abs(got.points[k].normalized().dot(ds) - 1) < 1e-12) {
            CHECK(std::abs(got.points[k].norm() - t) < 1e-4);
            ++k;
          }
        }
        CHECK(k == got.size());
        CHECK(got.size() >= expected_hits * 95 / 100);
      }
    }
  }
  SUBCASE("range truncation") {
    Scene s;
    s.primitives.push_back({Primitive::Type::Sphere, Pose::from_translation(Vec3(5, 0, 0)), Vec3(1, 1, 1)});
    SensorModel cam = camera();
    cam.max_range = 3.0;
    CHECK(raycast_scan(s, Pose::identity(), cam).empty());
  }
}

TEST_CASE("pose noise") {
  const Pose p = Pose::from_yaw(0.4, Vec3(1, 2, 3));
  NoiseConfig none;
  const Pose same = perturb_pose(p, none, 5);
  CHECK(same.t == p.t);
  CHECK(same.R == p.R);

  NoiseConfig n;
  n.sigma_T = 0.075;
  n.seed = 42;
  double s1 = 0, s2 = 0;
  const int frames = 10000;
  for (int i = 0; i < frames; ++i) {
    const Pose q = perturb_pose(p, n, i);
    const double dx = q.t.x() - p.t.x();
    s1 += dx;
    s2 += dx * dx;
    CHECK(q.t.z() == p.t.z());
    CHECK(q.R == p.R);
  }
  const double mean = s1 / frames;
  const double sd = std::sqrt(s2 / frames - mean * mean);
  CHECK(std::abs(sd / 0.075 - 1) < 0.03);
  const Pose a = perturb_pose(p, n, 17), b = perturb_pose(p, n, 17);
  CHECK(a.t == b.t);
  CHECK(perturb_pose(p, n, 18).t != a.t);

  NoiseConfig yaw = n;
  yaw.sigma_yaw = 0.05;
  CHECK(perturb_pose(p, yaw, 3).valid(1e-12));
  NoiseConfig bad;
  bad.sigma_T = -1;
  CHECK_THROWS_AS(perturb_pose(p, bad, 0), std::invalid_argument);
}

TEST_CASE("trajectories") {
  const Scene room = make_room_scene(3);
  TrajectoryOptions opt;
  SUBCASE("single frame") { CHECK(generate_trajectory(room, 1, opt, 1).size() == 1); }
  SUBCASE("orbit steps are equal and poses collision free") {
    const auto poses = generate_trajectory(room, 8, opt, 2);
    REQUIRE(poses.size() == 8);
    Vec3 lo, hi;
    room.bounds(lo, hi);
    const Vec3 c = 0.5 * (lo + hi);
    std::vector<double> angles;
    for (const auto& p : poses) {
      CHECK(p.valid());
      CHECK(room.sdf(p.t) > opt.clearance);
      angles.push_back(std::atan2((p.t.y() - c.y()) / (hi.y() - lo.y()), (p.t.x() - c.x()) / (hi.x() - lo.x())));
    }
    for (std::size_t i = 1; i < angles.size(); ++i) {
      double step = std::remainder(angles[i] - angles[i - 1], 2 * std::numbers::pi);
      CHECK(step == doctest::Approx(2 * std::numbers::pi / 8).epsilon(1e-9));
    }
  }
  SUBCASE("alternating steps") {
    opt.alt_step = 3.0;
    const auto poses = generate_trajectory(room, 8, opt, 2);
    CHECK(poses.size() == 8);
  }
  SUBCASE("lawnmower") {
    opt.style = TrajectoryStyle::Lawnmower;
    const auto poses = generate_trajectory(room, 9, opt, 4);
    REQUIRE(poses.size() == 9);
    for (const auto& p : poses) CHECK(room.sdf(p.t) > opt.clearance);
  }
  SUBCASE("solid scene cannot host a sensor") {
    Scene solid;
    solid.primitives.push_back({Primitive::Type::Box, Pose::identity(), Vec3(10, 10, 10)});
    CHECK_THROWS_AS(generate_trajectory(solid, 3, opt, 1), std::runtime_error);
  }
  CHECK_THROWS_AS(generate_trajectory(room, 0, opt, 1), std::invalid_argument);
}

TEST_CASE("a 16-pose orbit covers the visible surface") {
  const Scene s = make_apartment_scene(1);
  SensorModel cam = camera(80, 60, 1.5, 1.1);
  cam.max_range = 4.0;
  TrajectoryOptions opt;
  const auto poses = generate_trajectory(s, 16, opt, 7);
  const auto frames = simulate_scans(s, poses, cam);
  std::vector<Vec3> world;
  for (const auto& f : frames)
    for (const auto& p : f.points.points) world.push_back(f.pose.apply(p));
  REQUIRE(world.size() > 10000);

  // Visible surface: ground-truth vertices that a denser sensor sees from
  // at least one pose.
  SensorModel dense = cam;
  dense.width = 240;
  dense.height = 180;
  std::vector<Vec3> visible;
  for (const auto& pose : poses)
    for (const auto& p : raycast_scan(s, pose, dense).points) visible.push_back(pose.apply(p));
  std::mt19937_64 rng(3);
  std::shuffle(visible.begin(), visible.end(), rng);
  visible.resize(std::min<std::size_t>(visible.size(), 4000));

  const TriangleMesh probe = [&] {
    TriangleMesh m;
    for (const auto& v : visible) m.vertices.push_back(v);
    for (std::size_t i = 0; i < visible.size(); ++i) m.triangles.push_back({int(i), int(i), int(i)});
    return m;
  }();
  const TriangleMesh covered = trim_to_points(probe, world, 0.05);
  const double coverage = double(covered.triangles.size()) / double(visible.size());
  MESSAGE("coverage " << coverage);
  CHECK(coverage >= 0.9);
}

TEST_CASE("scene files round trip") {
  const Scene s = make_apartment_scene(5);
  const auto path = std::filesystem::temp_directory_path() / "latentmap_scene.json";
  write_scene(path, s);
  const Scene back = read_scene(path);
  REQUIRE(back.primitives.size() == s.primitives.size());
  for (std::size_t i = 0; i < s.primitives.size(); ++i) {
    CHECK(back.primitives[i].type == s.primitives[i].type);
    CHECK((back.primitives[i].pose.t - s.primitives[i].pose.t).norm() == 0.0);
    CHECK((back.primitives[i].size - s.primitives[i].size).norm() == 0.0);
  }
  CHECK(back.sdf(Vec3(1, 1, 1)) == s.sdf(Vec3(1, 1, 1)));
  std::filesystem::remove(path);
}

TEST_CASE("room scenes") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Scene s = make_room_scene(seed);
    const std::size_t extra = s.primitives.size() - 5;
    CHECK(extra >= 3);
    CHECK(extra <= 10);
  }
  const Scene a = make_room_scene(4), b = make_room_scene(4);
  CHECK(a.sdf(Vec3(1, 1, 0.5)) == b.sdf(Vec3(1, 1, 0.5)));
}
