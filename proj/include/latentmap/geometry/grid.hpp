#pragma once

#include <compare>
#include <cstddef>
#include <functional>
#include <map>
#include <string>

#include "latentmap/geometry/pose.hpp"

namespace latentmap {

/// Map geometry and the network shapes tied to it.
///
/// d_V is the voxel side, d_I the side of the cube of points gathered for
/// one voxel, d_q the side of the cube over which that voxel is decoded.
/// All three cubes share the voxel center.
struct GridSpec {
  double d_V = 0.5;
  double d_I = 0.7;
  double d_q = 0.6;
  int encoder_grid_res = 16;  // R
  int latent_res = 4;         // L
  int latent_channels = 32;   // C
  double query_density = 20;  // lattice points per meter per axis
  int depth = 2;              // R = L * 2^depth

  static double default_d_q(double d_V, double d_I) { return d_V + (d_I - d_V) * 0.5; }

  /// Laptop-sized default: 0.5 m voxels, R=16, L=4, C=32.
  static GridSpec desk();
  /// 0.5 m voxels at full network size (R=24, L=6, C=128, 100 queries/m).
  static GridSpec paper_half_meter();
  /// 1 m voxels, d_I = 1.2 m, full network size.
  static GridSpec paper_one_meter();

  /// Throws std::invalid_argument naming the first violated field.
  void validate() const;

  /// Width of the overlap margin in normalized input-volume coordinates:
  /// the voxel itself spans [w, 1 - w].
  double inner_margin() const { return (d_I - d_V) / (2.0 * d_I); }
};

struct VoxelIndex {
  int i = 0, j = 0, k = 0;

  int operator[](int axis) const { return axis == 0 ? i : axis == 1 ? j : k; }
  friend auto operator<=>(const VoxelIndex&, const VoxelIndex&) = default;
};

std::string to_string(const VoxelIndex& v);

struct VoxelIndexHash {
  std::size_t operator()(const VoxelIndex& v) const noexcept {
    std::size_t h = static_cast<std::size_t>(static_cast<unsigned>(v.i)) * 73856093u;
    h ^= static_cast<std::size_t>(static_cast<unsigned>(v.j)) * 19349663u;
    h ^= static_cast<std::size_t>(static_cast<unsigned>(v.k)) * 83492791u;
    return h;
  }
};

VoxelIndex world_to_index(const Vec3& p, double d_V);
Vec3 index_to_center(const VoxelIndex& v, double d_V);

/// Lower corner of the cube of side `side` centered on v.
Vec3 volume_min(const VoxelIndex& v, double d_V, double side);

/// Closed-lower / open-upper containment in the cube of side `side`
/// centered on v.
bool in_volume(const Vec3& p, const VoxelIndex& v, double d_V, double side);

/// World point -> coordinates normalized over v's input volume.
Vec3 to_local(const Vec3& p, const VoxelIndex& v, const GridSpec& spec);
Vec3 to_world(const Vec3& local, const VoxelIndex& v, const GridSpec& spec);

using VoxelClouds = std::map<VoxelIndex, PointCloud>;

/// Every point is copied into each voxel whose input volume contains it,
/// expressed in that voxel's normalized [0, 1]^3 frame. Point order within
/// each local cloud follows input order.
VoxelClouds partition_scan(const PointCloud& world_cloud, const GridSpec& spec);

}  // namespace latentmap
