#include "latentmap/geometry/pose.hpp"

#include <cmath>

#include <Eigen/SVD>

namespace latentmap {

Pose Pose::from_yaw(double yaw, const Vec3& t) {
  Pose p;
  p.R = Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix();
  p.t = t;
  return p;
}

bool Pose::valid(double tol) const {
  if (!R.allFinite() || !t.allFinite()) return false;
  if ((R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() > tol) return false;
  return std::abs(R.determinant() - 1.0) <= tol;
}

void require_valid(const Pose& pose) {
  if (!pose.valid()) throw InvalidPose("pose rotation is not orthonormal with det +1");
}

Mat3 orthonormalize(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  const Mat3 v = svd.matrixV();
  if ((u * v.transpose()).determinant() < 0) u.col(2) *= -1.0;
  return u * v.transpose();
}

bool PointCloud::finite() const {
  for (const auto& p : points) {
    if (!p.allFinite()) return false;
  }
  return true;
}

PointCloud apply_pose(const PointCloud& cloud, const Pose& pose) {
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.push_back(pose.apply(p));
  return out;
}

}  // namespace latentmap
