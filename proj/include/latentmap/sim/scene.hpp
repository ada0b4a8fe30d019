#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "latentmap/geometry/mesh.hpp"
#include "latentmap/geometry/sensor.hpp"

namespace latentmap {

/// Analytic solid. Sizes are in the primitive's local frame:
///   box      half extents (x, y, z)
///   sphere   radius in size.x
///   cylinder radius in size.x, half height in size.y, axis local z
///   plane    surface z = 0 with normal +z; size.x, size.y bound the mesh
///            only (the distance field is unbounded)
struct Primitive {
  enum class Type { Box, Sphere, Cylinder, Plane };

  Type type = Type::Box;
  Pose pose;  // local -> world
  Vec3 size = Vec3::Ones();

  double sdf(const Vec3& world) const;
  /// Tessellation on a grid no coarser than `max_edge` (spheres use a
  /// subdivided icosahedron instead).
  TriangleMesh mesh(double max_edge) const;
};

std::string to_string(Primitive::Type t);
Primitive::Type primitive_type_from_string(const std::string& s);

struct Scene {
  std::string name;
  std::vector<Primitive> primitives;
  double floor_z = 0.0;  // height of the walkable floor, used by metric cropping

  bool empty() const noexcept { return primitives.empty(); }
  /// Union distance: minimum over primitives; +inf for an empty scene.
  double sdf(const Vec3& p) const;
  /// Bounds of every bounded primitive.
  void bounds(Vec3& lo, Vec3& hi) const;

  /// Union of primitive meshes with faces buried inside other primitives
  /// removed (triangle centroid strictly inside another solid).
  TriangleMesh ground_truth_mesh(double max_edge = 0.05) const;
};

/// JSON scene description; see write_scene for the schema.
void write_scene(const std::filesystem::path& path, const Scene& scene);
Scene read_scene(const std::filesystem::path& path);

/// Room of the given interior size (floor at z = 0) with 3-10 random boxes,
/// spheres and cylinders.
Scene make_room_scene(std::uint64_t seed, const Vec3& room_size = Vec3(4.0, 3.5, 2.4));

/// Two-room layout with a partition wall and furniture including thin
/// structures (legs, shelves, poles).
Scene make_apartment_scene(std::uint64_t seed);

/// Depth camera used by the desk-scale experiments: 160 x 120 pixels,
/// 90 x 67.5 degree field of view, 3 m range.
SensorModel desk_sensor();

/// Sphere tracing, 1e-5 m tolerance, at most 256 steps per ray. Returns hit
/// points in the sensor frame; rays that miss or exceed max_range are
/// dropped.
PointCloud raycast_scan(const Scene& scene, const Pose& pose, const SensorModel& sensor);

struct NoiseConfig {
  double sigma_T = 0.0;   // x and y translation, meters
  double sigma_Tz = 0.0;  // meters
  double sigma_yaw = 0.0; // radians
  std::uint64_t seed = 0;

  void validate() const;
};

/// Adds N(0, sigma^2) offsets to the translation (and optionally yaw).
/// Deterministic in (noise.seed, frame_index).
Pose perturb_pose(const Pose& true_pose, const NoiseConfig& noise, int frame_index);

enum class TrajectoryStyle { Orbit, Lawnmower };
TrajectoryStyle trajectory_style_from_string(const std::string& s);

struct TrajectoryOptions {
  TrajectoryStyle style = TrajectoryStyle::Orbit;
  double height = 1.3;          // sensor height above floor_z
  double pitch = 0.25;          // radians, positive looks down
  double radius_fraction = 0.6; // orbit radius relative to the scene half extent
  double clearance = 0.2;       // minimum scene distance at the sensor origin
  /// Orbit angular steps alternate between `step` and `alt_step` times it.
  double alt_step = 1.0;
};

/// Collision-free poses. Orbit poses look toward the scene center.
std::vector<Pose> generate_trajectory(const Scene& scene, int n_frames, const TrajectoryOptions& opt,
                                      std::uint64_t seed);

/// Ray-casts every pose. Frames carry the true pose.
std::vector<ScanFrame> simulate_scans(const Scene& scene, const std::vector<Pose>& poses,
                                      const SensorModel& sensor);

/// Same frames with perturbed poses; points are untouched.
std::vector<ScanFrame> with_pose_noise(const std::vector<ScanFrame>& frames, const NoiseConfig& noise);

/// Drops triangles whose centroid is farther than `radius` from every point.
TriangleMesh trim_to_points(const TriangleMesh& mesh, const std::vector<Vec3>& points, double radius);

}  // namespace latentmap
