#include "latentmap/geometry/grid.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace latentmap {

GridSpec GridSpec::desk() { return GridSpec{}; }

GridSpec GridSpec::paper_half_meter() {
  GridSpec s;
  s.d_V = 0.5;
  s.d_I = 0.7;
  s.d_q = default_d_q(s.d_V, s.d_I);
  s.encoder_grid_res = 24;
  s.latent_res = 6;
  s.latent_channels = 128;
  s.query_density = 100;
  return s;
}

GridSpec GridSpec::paper_one_meter() {
  GridSpec s = paper_half_meter();
  s.d_V = 1.0;
  s.d_I = 1.2;
  s.d_q = default_d_q(s.d_V, s.d_I);
  return s;
}

void GridSpec::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("grid: " + m); };
  if (!(d_V > 0) || !std::isfinite(d_V)) fail("d_V must be positive");
  if (!(d_I > d_V) || !std::isfinite(d_I)) fail("d_I must exceed d_V");
  if (!(d_q >= d_V && d_q <= d_I)) fail("d_q must lie in [d_V, d_I]");
  if (depth < 0 || depth > 8) fail("depth out of range");
  if (latent_res < 1) fail("latent_res must be positive");
  if (latent_channels < 1) fail("latent_channels must be positive");
  if (encoder_grid_res != latent_res * (1 << depth)) {
    fail("encoder_grid_res must equal latent_res * 2^depth (" +
         std::to_string(latent_res * (1 << depth)) + "), got " + std::to_string(encoder_grid_res));
  }
  if (!(query_density > 0)) fail("query_density must be positive");
}

std::string to_string(const VoxelIndex& v) {
  return "(" + std::to_string(v.i) + "," + std::to_string(v.j) + "," + std::to_string(v.k) + ")";
}

VoxelIndex world_to_index(const Vec3& p, double d_V) {
  return {static_cast<int>(std::floor(p.x() / d_V)), static_cast<int>(std::floor(p.y() / d_V)),
          static_cast<int>(std::floor(p.z() / d_V))};
}

Vec3 index_to_center(const VoxelIndex& v, double d_V) {
  return {(v.i + 0.5) * d_V, (v.j + 0.5) * d_V, (v.k + 0.5) * d_V};
}

Vec3 volume_min(const VoxelIndex& v, double d_V, double side) {
  return index_to_center(v, d_V) - Vec3::Constant(0.5 * side);
}

bool in_volume(const Vec3& p, const VoxelIndex& v, double d_V, double side) {
  const Vec3 c = index_to_center(v, d_V);
  for (int a = 0; a < 3; ++a) {
    const double lo = c[a] - 0.5 * side;
    const double hi = c[a] + 0.5 * side;
    if (!(p[a] >= lo && p[a] < hi)) return false;
  }
  return true;
}

Vec3 to_local(const Vec3& p, const VoxelIndex& v, const GridSpec& spec) {
  const Vec3 lo = volume_min(v, spec.d_V, spec.d_I);
  Vec3 out = (p - lo) / spec.d_I;
  return out.cwiseMax(0.0).cwiseMin(1.0);
}

Vec3 to_world(const Vec3& local, const VoxelIndex& v, const GridSpec& spec) {
  return volume_min(v, spec.d_V, spec.d_I) + local * spec.d_I;
}

VoxelClouds partition_scan(const PointCloud& world_cloud, const GridSpec& spec) {
  VoxelClouds out;
  std::vector<int> owners[3];
  for (const Vec3& p : world_cloud.points) {
    for (int a = 0; a < 3; ++a) {
      owners[a].clear();
      // Owners satisfy (p - d_I/2)/d_V - 1/2 < i <= (p + d_I/2)/d_V - 1/2; scan
      // one extra index either side and let the exact test decide.
      const int lo = static_cast<int>(std::floor((p[a] - 0.5 * spec.d_I) / spec.d_V - 0.5));
      const int hi = static_cast<int>(std::floor((p[a] + 0.5 * spec.d_I) / spec.d_V - 0.5)) + 1;
      for (int i = lo; i <= hi; ++i) {
        const double c = (i + 0.5) * spec.d_V;
        if (p[a] >= c - 0.5 * spec.d_I && p[a] < c + 0.5 * spec.d_I) owners[a].push_back(i);
      }
    }
    for (int i : owners[0])
      for (int j : owners[1])
        for (int k : owners[2]) {
          const VoxelIndex v{i, j, k};
          out[v].points.push_back(to_local(p, v, spec));
        }
  }
  return out;
}

}  // namespace latentmap
