#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "latentmap/geometry/pose.hpp"

namespace latentmap {

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;

  bool empty() const noexcept { return triangles.empty(); }
  double area() const;
  /// Signed volume by the divergence theorem; meaningful for closed meshes.
  double volume() const;
  void append(const TriangleMesh& other);
};

double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c);

enum class PlyFormat { Ascii, BinaryLittleEndian };

/// Vertices as float x y z; faces as uchar-count int-index lists.
void write_ply(const std::filesystem::path& path, const TriangleMesh& mesh,
               PlyFormat format = PlyFormat::BinaryLittleEndian);
void write_ply(const std::filesystem::path& path, const PointCloud& cloud,
               PlyFormat format = PlyFormat::Ascii);

/// Reads ASCII or binary little-endian PLY. Vertex x/y/z may be float or
/// double; other vertex properties are skipped. Polygons with more than
/// three corners are fanned into triangles.
TriangleMesh read_ply_mesh(const std::filesystem::path& path);
PointCloud read_ply_points(const std::filesystem::path& path);

/// One pose per line, 12 numbers: row-major [R | t].
void write_trajectory(const std::filesystem::path& path, const std::vector<Pose>& poses);
std::vector<Pose> read_trajectory(const std::filesystem::path& path);

}  // namespace latentmap
