#include "latentmap/geometry/sensor.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace latentmap {

void SensorModel::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("sensor: " + m); };
  if (width < 2 || height < 2) fail("resolution must be at least 2x2");
  if (!(max_range > 0)) fail("max_range must be positive");
  const double pi = std::numbers::pi;
  if (type == Type::PinholeDepth) {
    if (!(hfov >= 0 && hfov < pi) || !(vfov >= 0 && vfov < pi)) fail("pinhole fov must lie in [0, pi)");
  } else {
    if (!(hfov >= 0 && hfov <= 2 * pi) || !(vfov >= 0 && vfov <= pi)) fail("lidar fov out of range");
  }
}

std::vector<Vec3> SensorModel::ray_directions() const {
  std::vector<Vec3> dirs;
  dirs.reserve(static_cast<std::size_t>(width) * static_cast<std::size_t>(height));
  for (int r = 0; r < height; ++r) {
    const double sv = 1.0 - 2.0 * (r + 0.5) / height;  // +1 at the top row
    for (int c = 0; c < width; ++c) {
      const double su = 1.0 - 2.0 * (c + 0.5) / width;  // +1 at the left column
      if (type == Type::PinholeDepth) {
        dirs.push_back(Vec3(1.0, su * std::tan(0.5 * hfov), sv * std::tan(0.5 * vfov)).normalized());
      } else {
        const double az = su * 0.5 * hfov;
        const double el = sv * 0.5 * vfov;
        dirs.emplace_back(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
      }
    }
  }
  return dirs;
}

std::string to_string(SensorModel::Type type) {
  return type == SensorModel::Type::PinholeDepth ? "pinhole" : "lidar";
}

SensorModel::Type sensor_type_from_string(const std::string& s) {
  if (s == "pinhole") return SensorModel::Type::PinholeDepth;
  if (s == "lidar") return SensorModel::Type::SphericalLidar;
  throw std::invalid_argument("unknown sensor type '" + s + "' (expected pinhole or lidar)");
}

std::set<VoxelIndex> frustum_voxels(const Pose& pose, const SensorModel& sensor, double max_range,
                                    const GridSpec& spec) {
  if (!(max_range > 0)) throw std::invalid_argument("frustum_voxels: max_range must be positive");
  const Vec3 o = pose.t;
  std::vector<Vec3> planes;  // inward normals through the sensor origin, world frame
  if (sensor.type == SensorModel::Type::PinholeDepth) {
    const double h = 0.5 * sensor.hfov, v = 0.5 * sensor.vfov;
    planes = {{std::sin(h), -std::cos(h), 0}, {std::sin(h), std::cos(h), 0},
              {std::sin(v), 0, -std::cos(v)}, {std::sin(v), 0, std::cos(v)}, {1, 0, 0}};
    for (auto& n : planes) n = pose.R * n;
  }

  const VoxelIndex lo = world_to_index(o - Vec3::Constant(max_range), spec.d_V);
  const VoxelIndex hi = world_to_index(o + Vec3::Constant(max_range), spec.d_V);
  std::set<VoxelIndex> out;
  for (int i = lo.i; i <= hi.i; ++i)
    for (int j = lo.j; j <= hi.j; ++j)
      for (int k = lo.k; k <= hi.k; ++k) {
        const VoxelIndex vi{i, j, k};
        const Vec3 bmin = Vec3(i, j, k) * spec.d_V - o;
        const Vec3 bmax = bmin + Vec3::Constant(spec.d_V);
        const Vec3 nearest = Vec3::Zero().cwiseMax(bmin).cwiseMin(bmax);
        if (nearest.norm() > max_range) continue;
        bool outside = false;
        for (const Vec3& n : planes) {
          double best = 0;
          for (int a = 0; a < 3; ++a) best += std::max(n[a] * bmin[a], n[a] * bmax[a]);
          if (best < 0) {
            outside = true;
            break;
          }
        }
        if (!outside) out.insert(vi);
      }
  return out;
}

}  // namespace latentmap
