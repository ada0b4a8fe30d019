#include "latentmap/sim/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"

namespace latentmap {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

/// Quad grid over the parallelogram origin + s*u + t*v, s, t in [0, 1].
void add_grid(TriangleMesh& m, const Vec3& origin, const Vec3& u, const Vec3& v, double max_edge) {
  const int nu = std::max(1, static_cast<int>(std::ceil(u.norm() / max_edge)));
  const int nv = std::max(1, static_cast<int>(std::ceil(v.norm() / max_edge)));
  const int base = static_cast<int>(m.vertices.size());
  for (int j = 0; j <= nv; ++j)
    for (int i = 0; i <= nu; ++i) m.vertices.push_back(origin + u * (double(i) / nu) + v * (double(j) / nv));
  auto id = [&](int i, int j) { return base + j * (nu + 1) + i; };
  for (int j = 0; j < nv; ++j)
    for (int i = 0; i < nu; ++i) {
      m.triangles.push_back({id(i, j), id(i + 1, j), id(i + 1, j + 1)});
      m.triangles.push_back({id(i, j), id(i + 1, j + 1), id(i, j + 1)});
    }
}

TriangleMesh box_mesh(const Vec3& h, double e) {
  TriangleMesh m;
  // Each face: origin, u, v with u x v pointing outward.
  add_grid(m, Vec3(h.x(), -h.y(), -h.z()), Vec3(0, 2 * h.y(), 0), Vec3(0, 0, 2 * h.z()), e);
  add_grid(m, Vec3(-h.x(), -h.y(), -h.z()), Vec3(0, 0, 2 * h.z()), Vec3(0, 2 * h.y(), 0), e);
  add_grid(m, Vec3(-h.x(), h.y(), -h.z()), Vec3(0, 0, 2 * h.z()), Vec3(2 * h.x(), 0, 0), e);
  add_grid(m, Vec3(-h.x(), -h.y(), -h.z()), Vec3(2 * h.x(), 0, 0), Vec3(0, 0, 2 * h.z()), e);
  add_grid(m, Vec3(-h.x(), -h.y(), h.z()), Vec3(2 * h.x(), 0, 0), Vec3(0, 2 * h.y(), 0), e);
  add_grid(m, Vec3(-h.x(), -h.y(), -h.z()), Vec3(0, 2 * h.y(), 0), Vec3(2 * h.x(), 0, 0), e);
  return m;
}

TriangleMesh icosphere(double r, int subdivisions) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  TriangleMesh m;
  m.vertices = {{-1, t, 0}, {1, t, 0},   {-1, -t, 0}, {1, -t, 0}, {0, -1, t},  {0, 1, t},
                {0, -1, -t}, {0, 1, -t}, {t, 0, -1},  {t, 0, 1},  {-t, 0, -1}, {-t, 0, 1}};
  m.triangles = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
                 {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
                 {3, 8, 9},  {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (auto& v : m.vertices) v.normalize();
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> mid;
    auto midpoint = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = mid.find(key);
      if (it != mid.end()) return it->second;
      m.vertices.push_back((m.vertices[a] + m.vertices[b]).normalized());
      const int id = static_cast<int>(m.vertices.size()) - 1;
      mid.emplace(key, id);
      return id;
    };
    std::vector<std::array<int, 3>> next;
    next.reserve(m.triangles.size() * 4);
    for (const auto& f : m.triangles) {
      const int a = midpoint(f[0], f[1]), b = midpoint(f[1], f[2]), c = midpoint(f[2], f[0]);
      next.push_back({f[0], a, c});
      next.push_back({f[1], b, a});
      next.push_back({f[2], c, b});
      next.push_back({a, b, c});
    }
    m.triangles = std::move(next);
  }
  for (auto& v : m.vertices) v *= r;
  return m;
}

TriangleMesh cylinder_mesh(double r, double h, double e) {
  TriangleMesh m;
  const int nt = std::max(16, static_cast<int>(std::ceil(2 * std::numbers::pi * r / e)));
  const int nz = std::max(1, static_cast<int>(std::ceil(2 * h / e)));
  const int nr = std::max(1, static_cast<int>(std::ceil(r / e)));
  auto ring = [&](double rad, double z, int i) {
    const double a = 2 * std::numbers::pi * i / nt;
    return Vec3(rad * std::cos(a), rad * std::sin(a), z);
  };
  // Side wall.
  for (int k = 0; k <= nz; ++k)
    for (int i = 0; i < nt; ++i) m.vertices.push_back(ring(r, -h + 2 * h * k / nz, i));
  for (int k = 0; k < nz; ++k)
    for (int i = 0; i < nt; ++i) {
      const int a = k * nt + i, b = k * nt + (i + 1) % nt, c = a + nt, d = b + nt;
      m.triangles.push_back({a, b, d});
      m.triangles.push_back({a, d, c});
    }
  // Caps as concentric rings around a center vertex.
  for (int side : {-1, 1}) {
    const double z = side * h;
    const int center = static_cast<int>(m.vertices.size());
    m.vertices.emplace_back(0, 0, z);
    int prev = -1;
    for (int q = 1; q <= nr; ++q) {
      const int start = static_cast<int>(m.vertices.size());
      for (int i = 0; i < nt; ++i) m.vertices.push_back(ring(r * q / nr, z, i));
      for (int i = 0; i < nt; ++i) {
        const int a = start + i, b = start + (i + 1) % nt;
        if (prev < 0) {
          if (side > 0) m.triangles.push_back({center, a, b});
          else m.triangles.push_back({center, b, a});
        } else {
          const int pa = prev + i, pb = prev + (i + 1) % nt;
          if (side > 0) {
            m.triangles.push_back({pa, a, b});
            m.triangles.push_back({pa, b, pb});
          } else {
            m.triangles.push_back({pa, b, a});
            m.triangles.push_back({pa, pb, b});
          }
        }
      }
      prev = start;
    }
  }
  return m;
}

}  // namespace

double Primitive::sdf(const Vec3& world) const {
  const Vec3 p = pose.R.transpose() * (world - pose.t);
  switch (type) {
    case Type::Box: {
      const Vec3 q = p.cwiseAbs() - size;
      return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
    }
    case Type::Sphere:
      return p.norm() - size.x();
    case Type::Cylinder: {
      const double dx = std::hypot(p.x(), p.y()) - size.x();
      const double dz = std::abs(p.z()) - size.y();
      return std::min(std::max(dx, dz), 0.0) + std::hypot(std::max(dx, 0.0), std::max(dz, 0.0));
    }
    case Type::Plane:
      return p.z();
  }
  return kInf;
}

TriangleMesh Primitive::mesh(double max_edge) const {
  TriangleMesh m;
  switch (type) {
    case Type::Box: m = box_mesh(size, max_edge); break;
    case Type::Sphere: m = icosphere(size.x(), 5); break;
    case Type::Cylinder: m = cylinder_mesh(size.x(), size.y(), max_edge); break;
    case Type::Plane:
      add_grid(m, Vec3(-size.x(), -size.y(), 0), Vec3(2 * size.x(), 0, 0), Vec3(0, 2 * size.y(), 0), max_edge);
      break;
  }
  for (auto& v : m.vertices) v = pose.apply(v);
  return m;
}

std::string to_string(Primitive::Type t) {
  switch (t) {
    case Primitive::Type::Box: return "box";
    case Primitive::Type::Sphere: return "sphere";
    case Primitive::Type::Cylinder: return "cylinder";
    case Primitive::Type::Plane: return "plane";
  }
  return "?";
}

Primitive::Type primitive_type_from_string(const std::string& s) {
  if (s == "box") return Primitive::Type::Box;
  if (s == "sphere") return Primitive::Type::Sphere;
  if (s == "cylinder") return Primitive::Type::Cylinder;
  if (s == "plane") return Primitive::Type::Plane;
  throw std::invalid_argument("unknown primitive type '" + s + "'");
}

double Scene::sdf(const Vec3& p) const {
  double d = kInf;
  for (const auto& prim : primitives) d = std::min(d, prim.sdf(p));
  return d;
}

void Scene::bounds(Vec3& lo, Vec3& hi) const {
  lo = Vec3::Constant(kInf);
  hi = Vec3::Constant(-kInf);
  for (const auto& prim : primitives) {
    if (prim.type == Primitive::Type::Plane) continue;
    Vec3 ext;
    switch (prim.type) {
      case Primitive::Type::Box: ext = prim.size; break;
      case Primitive::Type::Sphere: ext = Vec3::Constant(prim.size.x()); break;
      default: ext = Vec3(prim.size.x(), prim.size.x(), prim.size.y()); break;
    }
    const Vec3 half = prim.pose.R.cwiseAbs() * ext;
    lo = lo.cwiseMin(prim.pose.t - half);
    hi = hi.cwiseMax(prim.pose.t + half);
  }
}

TriangleMesh Scene::ground_truth_mesh(double max_edge) const {
  TriangleMesh out;
  for (std::size_t i = 0; i < primitives.size(); ++i) {
    TriangleMesh m = primitives[i].mesh(max_edge);
    TriangleMesh kept;
    kept.vertices = m.vertices;
    for (const auto& t : m.triangles) {
      const Vec3 c = (m.vertices[t[0]] + m.vertices[t[1]] + m.vertices[t[2]]) / 3.0;
      bool buried = false;
      for (std::size_t j = 0; j < primitives.size() && !buried; ++j) {
        if (j != i && primitives[j].sdf(c) < -1e-6) buried = true;
      }
      if (!buried) kept.triangles.push_back(t);
    }
    out.append(kept);
  }
  return out;
}

void write_scene(const std::filesystem::path& path, const Scene& scene) {
  nlohmann::ordered_json j;
  j["name"] = scene.name;
  j["floor_z"] = scene.floor_z;
  j["primitives"] = nlohmann::ordered_json::array();
  for (const auto& p : scene.primitives) {
    nlohmann::ordered_json e;
    e["type"] = to_string(p.type);
    e["translation"] = {p.pose.t.x(), p.pose.t.y(), p.pose.t.z()};
    e["rotation"] = nlohmann::ordered_json::array();
    for (int r = 0; r < 3; ++r) e["rotation"].push_back({p.pose.R(r, 0), p.pose.R(r, 1), p.pose.R(r, 2)});
    e["size"] = {p.size.x(), p.size.y(), p.size.z()};
    j["primitives"].push_back(e);
  }
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os << j.dump(2) << '\n';
}

Scene read_scene(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open scene " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("scene " + path.string() + ": " + e.what());
  }
  Scene s;
  s.name = j.value("name", std::string());
  s.floor_z = j.value("floor_z", 0.0);
  for (const auto& e : j.at("primitives")) {
    Primitive p;
    p.type = primitive_type_from_string(e.at("type").get<std::string>());
    const auto t = e.at("translation").get<std::vector<double>>();
    const auto sz = e.at("size").get<std::vector<double>>();
    if (t.size() != 3 || sz.size() != 3) throw std::runtime_error("scene: translation and size need 3 values");
    p.pose.t = Vec3(t[0], t[1], t[2]);
    p.size = Vec3(sz[0], sz[1], sz[2]);
    if (e.contains("rotation")) {
      const auto rows = e.at("rotation").get<std::vector<std::vector<double>>>();
      if (rows.size() != 3) throw std::runtime_error("scene: rotation needs 3 rows");
      for (int r = 0; r < 3; ++r) {
        if (rows[r].size() != 3) throw std::runtime_error("scene: rotation rows need 3 values");
        for (int c = 0; c < 3; ++c) p.pose.R(r, c) = rows[r][c];
      }
    } else if (e.contains("yaw")) {
      p.pose.R = Pose::from_yaw(e.at("yaw").get<double>(), Vec3::Zero()).R;
    }
    require_valid(p.pose);
    if ((p.size.array() <= 0).any() && p.type != Primitive::Type::Plane) {
      throw std::runtime_error("scene: primitive sizes must be positive");
    }
    s.primitives.push_back(p);
  }
  return s;
}

namespace {

Primitive box(const Vec3& center, const Vec3& half, double yaw = 0) {
  return {Primitive::Type::Box, Pose::from_yaw(yaw, center), half};
}

Primitive sphere(const Vec3& center, double r) {
  return {Primitive::Type::Sphere, Pose::from_translation(center), Vec3(r, r, r)};
}

Primitive cylinder(const Vec3& center, double r, double half_h) {
  return {Primitive::Type::Cylinder, Pose::from_translation(center), Vec3(r, half_h, r)};
}

/// Floor slab top at z = 0 plus four walls enclosing [0, size.x] x [0, size.y].
void add_shell(Scene& s, const Vec3& size, double wall = 0.1) {
  const double h = size.z();
  s.primitives.push_back(box(Vec3(size.x() / 2, size.y() / 2, -0.05), Vec3(size.x() / 2 + wall, size.y() / 2 + wall, 0.05)));
  s.primitives.push_back(box(Vec3(-wall / 2, size.y() / 2, h / 2), Vec3(wall / 2, size.y() / 2 + wall, h / 2)));
  s.primitives.push_back(box(Vec3(size.x() + wall / 2, size.y() / 2, h / 2), Vec3(wall / 2, size.y() / 2 + wall, h / 2)));
  s.primitives.push_back(box(Vec3(size.x() / 2, -wall / 2, h / 2), Vec3(size.x() / 2, wall / 2, h / 2)));
  s.primitives.push_back(box(Vec3(size.x() / 2, size.y() + wall / 2, h / 2), Vec3(size.x() / 2, wall / 2, h / 2)));
}

void add_table(Scene& s, const Vec3& c, double w, double d, double h, double yaw) {
  const Pose frame = Pose::from_yaw(yaw, c);
  s.primitives.push_back(box(frame.apply(Vec3(0, 0, h - 0.02)), Vec3(w / 2, d / 2, 0.02), yaw));
  for (int sx : {-1, 1})
    for (int sy : {-1, 1}) {
      const Vec3 leg = frame.apply(Vec3(sx * (w / 2 - 0.05), sy * (d / 2 - 0.05), (h - 0.04) / 2));
      s.primitives.push_back(cylinder(leg, 0.025, (h - 0.04) / 2));
    }
}

void add_shelf(Scene& s, const Vec3& c, double w, double d, double h, double yaw, int boards) {
  const Pose frame = Pose::from_yaw(yaw, c);
  for (int sx : {-1, 1}) {
    s.primitives.push_back(box(frame.apply(Vec3(sx * (w / 2 - 0.01), 0, h / 2)), Vec3(0.01, d / 2, h / 2), yaw));
  }
  for (int b = 0; b < boards; ++b) {
    const double z = 0.1 + (h - 0.15) * b / std::max(1, boards - 1);
    s.primitives.push_back(box(frame.apply(Vec3(0, 0, z)), Vec3(w / 2 - 0.02, d / 2, 0.01), yaw));
  }
}

}  // namespace

Scene make_room_scene(std::uint64_t seed, const Vec3& room_size) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Scene s;
  s.name = "room-" + std::to_string(seed);
  add_shell(s, room_size);
  const int n = 3 + static_cast<int>(rng() % 8);
  const double margin = 0.5;
  for (int i = 0; i < n; ++i) {
    const double x = margin + u(rng) * (room_size.x() - 2 * margin);
    const double y = margin + u(rng) * (room_size.y() - 2 * margin);
    switch (rng() % 3) {
      case 0: {
        const Vec3 half(0.1 + 0.3 * u(rng), 0.1 + 0.3 * u(rng), 0.1 + 0.4 * u(rng));
        s.primitives.push_back(box(Vec3(x, y, half.z()), half, u(rng) * std::numbers::pi));
        break;
      }
      case 1: {
        const double r = 0.1 + 0.25 * u(rng);
        s.primitives.push_back(sphere(Vec3(x, y, r + 0.4 * u(rng)), r));
        break;
      }
      default: {
        const double r = 0.05 + 0.2 * u(rng), hh = 0.2 + 0.5 * u(rng);
        s.primitives.push_back(cylinder(Vec3(x, y, hh), r, hh));
        break;
      }
    }
  }
  return s;
}

Scene make_apartment_scene(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> j(-0.15, 0.15);
  Scene s;
  s.name = "apartment-" + std::to_string(seed);
  const Vec3 size(6.0, 4.5, 2.5);
  add_shell(s, size);
  // Partition wall at x = 3.2 with a doorway between y = 1.6 and 2.6.
  s.primitives.push_back(box(Vec3(3.2, 0.8, 1.25), Vec3(0.05, 0.8, 1.25)));
  s.primitives.push_back(box(Vec3(3.2, 3.55, 1.25), Vec3(0.05, 0.95, 1.25)));
  // Left room: table with thin legs, shelf, lamp pole and a ball.
  add_table(s, Vec3(1.5 + j(rng), 2.2 + j(rng), 0), 1.2, 0.7, 0.75, 0.2 * j(rng));
  add_shelf(s, Vec3(0.35, 3.6 + j(rng), 0), 0.9, 0.3, 1.8, std::numbers::pi / 2, 4);
  s.primitives.push_back(cylinder(Vec3(2.6 + j(rng), 0.6 + j(rng), 0.8), 0.03, 0.8));
  s.primitives.push_back(sphere(Vec3(2.6, 0.6, 1.72) + Vec3(0, 0, 0), 0.14));
  s.primitives.push_back(sphere(Vec3(0.9 + j(rng), 0.8 + j(rng), 0.25), 0.25));
  // Right room: couch, low table, standing cylinder and a thin shelf.
  s.primitives.push_back(box(Vec3(4.6 + j(rng), 3.9, 0.25), Vec3(0.9, 0.35, 0.25)));
  s.primitives.push_back(box(Vec3(4.6, 4.2, 0.6), Vec3(0.9, 0.08, 0.35)));
  add_table(s, Vec3(4.6 + j(rng), 2.6 + j(rng), 0), 0.8, 0.5, 0.45, 0.0);
  s.primitives.push_back(cylinder(Vec3(5.5 + j(rng), 0.7 + j(rng), 0.5), 0.2, 0.5));
  add_shelf(s, Vec3(4.2 + j(rng), 0.3, 0), 1.0, 0.25, 1.2, 0.0, 3);
  return s;
}

SensorModel desk_sensor() {
  SensorModel s;
  s.width = 160;
  s.height = 120;
  s.max_range = 3.0;
  return s;
}

namespace {

// The tracer stops within kTol of the surface, which at grazing incidence
// is up to kTol / cos(angle) short along the ray. A few secant steps on
// sdf(t) pull the hit onto the surface; a step is kept only if it shrinks
// the residual.
double refine_hit(const Scene& scene, const Vec3& o, const Vec3& d, double t) {
  constexpr double h = 1e-6;
  double f = scene.sdf(o + t * d);
  for (int it = 0; it < 6 && std::abs(f) > 1e-12; ++it) {
    const double slope = (scene.sdf(o + (t + h) * d) - scene.sdf(o + (t - h) * d)) / (2 * h);
    if (!(slope < -1e-3)) break;
    const double tn = t - f / slope;
    const double fn = scene.sdf(o + tn * d);
    if (!(std::abs(fn) < std::abs(f)) || std::abs(tn - t) > 1e-2) break;
    t = tn;
    f = fn;
  }
  return t;
}

}  // namespace

PointCloud raycast_scan(const Scene& scene, const Pose& pose, const SensorModel& sensor) {
  sensor.validate();
  PointCloud out;
  if (scene.empty()) return out;
  constexpr double kTol = 1e-5;
  constexpr int kMaxSteps = 256;
  const Vec3 o = pose.t;
  if (scene.sdf(o) <= 0) return out;
  for (const Vec3& d_sensor : sensor.ray_directions()) {
    const Vec3 d = pose.R * d_sensor;
    double t = 0;
    for (int step = 0; step < kMaxSteps; ++step) {
      const double dist = scene.sdf(o + t * d);
      if (dist < kTol) {
        t = refine_hit(scene, o, d, t);
        if (t <= sensor.max_range) out.points.push_back(t * d_sensor);
        break;
      }
      t += dist;
      if (t > sensor.max_range) break;
    }
  }
  return out;
}

void NoiseConfig::validate() const {
  if (!(sigma_T >= 0 && sigma_Tz >= 0 && sigma_yaw >= 0)) {
    throw std::invalid_argument("noise: standard deviations must be non-negative");
  }
}

Pose perturb_pose(const Pose& true_pose, const NoiseConfig& noise, int frame_index) {
  noise.validate();
  std::seed_seq sq{static_cast<std::uint32_t>(noise.seed), static_cast<std::uint32_t>(noise.seed >> 32),
                   static_cast<std::uint32_t>(frame_index), 0x9015eu};
  std::mt19937_64 rng(sq);
  std::normal_distribution<double> n(0.0, 1.0);
  // Always draw all four values so enabling one component does not shift
  // the others.
  const double dx = n(rng), dy = n(rng), dz = n(rng), dyaw = n(rng);
  Pose p = true_pose;
  p.t.x() += noise.sigma_T * dx;
  p.t.y() += noise.sigma_T * dy;
  p.t.z() += noise.sigma_Tz * dz;
  if (noise.sigma_yaw > 0) {
    p.R = orthonormalize(Eigen::AngleAxisd(noise.sigma_yaw * dyaw, Vec3::UnitZ()).toRotationMatrix() * p.R);
  }
  return p;
}

TrajectoryStyle trajectory_style_from_string(const std::string& s) {
  if (s == "orbit") return TrajectoryStyle::Orbit;
  if (s == "lawnmower") return TrajectoryStyle::Lawnmower;
  throw std::invalid_argument("unknown trajectory style '" + s + "' (expected orbit or lawnmower)");
}

namespace {

Pose look_pose(const Vec3& position, double yaw, double pitch) {
  Pose p;
  p.R = (Eigen::AngleAxisd(yaw, Vec3::UnitZ()) * Eigen::AngleAxisd(pitch, Vec3::UnitY())).toRotationMatrix();
  p.t = position;
  return p;
}

}  // namespace

std::vector<Pose> generate_trajectory(const Scene& scene, int n_frames, const TrajectoryOptions& opt,
                                      std::uint64_t seed) {
  if (n_frames < 1) throw std::invalid_argument("trajectory: n_frames must be at least 1");
  Vec3 lo, hi;
  scene.bounds(lo, hi);
  if (!lo.allFinite() || !hi.allFinite()) {
    lo = Vec3(-1, -1, scene.floor_z);
    hi = Vec3(1, 1, scene.floor_z + 2);
  }
  const Vec3 center = 0.5 * (lo + hi);
  const double z = scene.floor_z + opt.height;
  std::mt19937_64 rng(seed);
  const double phase = std::uniform_real_distribution<double>(0, 2 * std::numbers::pi)(rng);

  auto free_at = [&](const Vec3& p) { return scene.sdf(p) > opt.clearance; };
  std::vector<Pose> poses;
  if (opt.style == TrajectoryStyle::Orbit) {
    const double rx = opt.radius_fraction * 0.5 * (hi.x() - lo.x());
    const double ry = opt.radius_fraction * 0.5 * (hi.y() - lo.y());
    // Steps alternate a, b, a, b ... with b = alt_step * a, summing to 2 pi.
    const int na = (n_frames + 1) / 2, nb = n_frames / 2;
    const double a = 2 * std::numbers::pi / (na + nb * opt.alt_step);
    double theta = phase;
    for (int i = 0; i < n_frames; ++i) {
      // Try the nominal radius first, then alternately shrink and grow it,
      // and only as a last resort nudge the angle.
      bool placed = false;
      for (int nudge = 0; nudge <= 8 && !placed; ++nudge) {
        const double ang = theta + (nudge % 2 == 0 ? 1 : -1) * 0.06 * ((nudge + 1) / 2);
        for (int r = 0; r <= 16 && !placed; ++r) {
          const double f = 1.0 + (r % 2 == 0 ? -1 : 1) * 0.05 * ((r + 1) / 2);
          const Vec3 pos(center.x() + f * rx * std::cos(ang), center.y() + f * ry * std::sin(ang), z);
          if (free_at(pos)) {
            const Vec3 to = center - pos;
            poses.push_back(look_pose(pos, std::atan2(to.y(), to.x()), opt.pitch));
            placed = true;
          }
        }
      }
      if (!placed) throw std::runtime_error("trajectory: no collision-free pose near frame " + std::to_string(i));
      theta += (i % 2 == 0) ? a : a * opt.alt_step;
    }
  } else {
    const int rows = std::max(1, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n_frames)))));
    const int cols = (n_frames + rows - 1) / rows;
    const double mx = 0.5 * (1 - opt.radius_fraction) * (hi.x() - lo.x());
    const double my = 0.5 * (1 - opt.radius_fraction) * (hi.y() - lo.y());
    for (int i = 0; i < n_frames; ++i) {
      const int r = i / cols, c0 = i % cols;
      const int c = (r % 2 == 0) ? c0 : cols - 1 - c0;
      const double fx = cols > 1 ? double(c) / (cols - 1) : 0.5;
      const double fy = rows > 1 ? double(r) / (rows - 1) : 0.5;
      Vec3 pos(lo.x() + mx + fx * (hi.x() - lo.x() - 2 * mx), lo.y() + my + fy * (hi.y() - lo.y() - 2 * my), z);
      bool placed = false;
      for (int tries = 0; tries < 50 && !placed; ++tries) {
        if (free_at(pos)) placed = true;
        else pos += 0.1 * (center - pos).normalized() + Vec3(0.05 * std::sin(tries), 0.05 * std::cos(tries), 0);
      }
      if (!placed) throw std::runtime_error("trajectory: no collision-free pose near frame " + std::to_string(i));
      const double yaw = (r % 2 == 0 ? 0.0 : std::numbers::pi) + phase * 0.1;
      poses.push_back(look_pose(pos, yaw, opt.pitch));
    }
  }
  return poses;
}

std::vector<ScanFrame> simulate_scans(const Scene& scene, const std::vector<Pose>& poses,
                                      const SensorModel& sensor) {
  std::vector<ScanFrame> frames;
  frames.reserve(poses.size());
  for (std::size_t i = 0; i < poses.size(); ++i) {
    ScanFrame f;
    f.index = static_cast<int>(i);
    f.timestamp = static_cast<double>(i);
    f.pose = poses[i];
    f.sensor = sensor;
    f.points = raycast_scan(scene, poses[i], sensor);
    frames.push_back(std::move(f));
  }
  return frames;
}

std::vector<ScanFrame> with_pose_noise(const std::vector<ScanFrame>& frames, const NoiseConfig& noise) {
  std::vector<ScanFrame> out = frames;
  for (auto& f : out) f.pose = perturb_pose(f.pose, noise, f.index);
  return out;
}

TriangleMesh trim_to_points(const TriangleMesh& mesh, const std::vector<Vec3>& points, double radius) {
  std::unordered_map<VoxelIndex, std::vector<int>, VoxelIndexHash> hash;
  for (std::size_t i = 0; i < points.size(); ++i) hash[world_to_index(points[i], radius)].push_back(static_cast<int>(i));
  const double r2 = radius * radius;
  TriangleMesh out;
  out.vertices = mesh.vertices;
  for (const auto& t : mesh.triangles) {
    const Vec3 c = (mesh.vertices[t[0]] + mesh.vertices[t[1]] + mesh.vertices[t[2]]) / 3.0;
    const VoxelIndex v = world_to_index(c, radius);
    bool near = false;
    for (int di = -1; di <= 1 && !near; ++di)
      for (int dj = -1; dj <= 1 && !near; ++dj)
        for (int dk = -1; dk <= 1 && !near; ++dk) {
          auto it = hash.find({v.i + di, v.j + dj, v.k + dk});
          if (it == hash.end()) continue;
          for (int id : it->second) {
            if ((points[static_cast<std::size_t>(id)] - c).squaredNorm() <= r2) {
              near = true;
              break;
            }
          }
        }
    if (near) out.triangles.push_back(t);
  }
  return out;
}

}  // namespace latentmap
