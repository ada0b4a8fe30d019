#pragma once

#include <stdexcept>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace latentmap {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Rigid transform p_world = R * p + t.
struct Pose {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  static Pose identity() { return {}; }
  static Pose from_translation(const Vec3& t) { return {Mat3::Identity(), t}; }
  /// Rotation about world z, then translation.
  static Pose from_yaw(double yaw, const Vec3& t);

  Vec3 apply(const Vec3& p) const { return R * p + t; }
  Pose inverse() const { return {R.transpose(), -(R.transpose() * t)}; }
  /// (this * other)(p) == this(other(p))
  Pose operator*(const Pose& other) const { return {R * other.R, R * other.t + t}; }

  /// Orthonormal with det +1 within `tol`, translation finite.
  bool valid(double tol = 1e-6) const;
};

class InvalidPose : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

void require_valid(const Pose& pose);

/// Nearest rotation in the Frobenius sense (polar decomposition via SVD).
Mat3 orthonormalize(const Mat3& m);

struct PointCloud {
  std::vector<Vec3> points;

  std::size_t size() const noexcept { return points.size(); }
  bool empty() const noexcept { return points.empty(); }
  bool finite() const;
};

PointCloud apply_pose(const PointCloud& cloud, const Pose& pose);

}  // namespace latentmap
