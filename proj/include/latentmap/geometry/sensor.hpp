#pragma once

#include <set>
#include <string>
#include <vector>

#include "latentmap/geometry/grid.hpp"

namespace latentmap {

/// Sensor frame: x forward, y left, z up.
struct SensorModel {
  enum class Type { PinholeDepth, SphericalLidar };

  Type type = Type::PinholeDepth;
  int width = 64;
  int height = 48;
  double hfov = 1.5707963267948966;  // radians
  double vfov = 1.1780972450961724;  // radians
  double max_range = 3.0;            // meters

  void validate() const;

  /// Unit ray direction per pixel, row-major (row = elevation index).
  std::vector<Vec3> ray_directions() const;
};

std::string to_string(SensorModel::Type type);
SensorModel::Type sensor_type_from_string(const std::string& s);

/// One scan. Points are in the sensor frame.
struct ScanFrame {
  int index = 0;
  double timestamp = 0.0;
  Pose pose;
  PointCloud points;
  SensorModel sensor;
};

/// Voxels that may intersect the sensor's viewing volume truncated at
/// max_range. Conservative: a voxel is kept when its box lies within
/// max_range of the sensor and is not entirely outside any bounding plane
/// of the field of view. A lidar with a full horizontal sweep uses the
/// range ball alone.
std::set<VoxelIndex> frustum_voxels(const Pose& pose, const SensorModel& sensor,
                                    double max_range, const GridSpec& spec);

}  // namespace latentmap
