#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "illumloc/common.hpp"

namespace illumloc {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat34 = Eigen::Matrix<double, 3, 4>;

// A point in the scene, in centimetres.
using ScenePoint = Vec3;
// A location in an image, in pixels. Integer coordinates are pixel centres.
using ImagePoint = Vec2;

class DegenerateProjection : public RuntimeFailure {
 public:
  using RuntimeFailure::RuntimeFailure;
};

inline constexpr double kProjectionEps = 1e-12;

// Rigid world-to-camera transform: x_cam = R * x_world + t.
// Camera frame follows the usual vision convention: x right, y down, z forward.
struct Pose {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  Vec3 center() const { return -R.transpose() * t; }

  static Pose from_center(const Mat3& R, const Vec3& center) { return {R, -R * center}; }

  bool is_valid(double tol = 1e-9) const {
    return ((R * R.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol) &&
           std::abs(R.determinant() - 1.0) <= tol && t.allFinite();
  }
};

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  Mat3 K() const {
    Mat3 k;
    k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return k;
  }

  void validate() const {
    if (!(fx > 0.0 && fy > 0.0)) throw ValidationError("intrinsics: focal lengths must be positive");
    if (width <= 0 || height <= 0) throw ValidationError("intrinsics: image size must be positive");
    if (!(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height)) {
      throw ValidationError("intrinsics: principal point outside the image");
    }
  }
};

// Full projection P = K [R | t].
struct ProjectionMatrix {
  Mat34 P = Mat34::Zero();

  static ProjectionMatrix from(const Intrinsics& intr, const Pose& pose) {
    Mat34 rt;
    rt.leftCols<3>() = pose.R;
    rt.col(3) = pose.t;
    return {intr.K() * rt};
  }
};

// Homogeneous 3-vector to image point. The scale lambda is h.z().
inline ImagePoint perspective_divide(const Vec3& h) {
  if (!(std::abs(h.z()) > kProjectionEps)) {
    throw DegenerateProjection("perspective divide by |z| <= 1e-12");
  }
  return {h.x() / h.z(), h.y() / h.z()};
}

inline ImagePoint project(const ProjectionMatrix& P, const ScenePoint& x) {
  return perspective_divide(P.P * x.homogeneous());
}

// Depth-like third coordinate of P * [x, 1]; positive in front of the camera
// when P = K [R | t] with K's last row (0, 0, 1).
inline double projective_depth(const ProjectionMatrix& P, const ScenePoint& x) {
  return P.P.row(2).dot(x.homogeneous());
}

inline double reprojection_error(const ProjectionMatrix& P, const ScenePoint& x,
                                 const ImagePoint& u) {
  return (project(P, x) - u).norm();
}

// Distance between camera centres, in scene units (cm).
inline double position_error(const Pose& est, const Pose& gt) {
  return (est.center() - gt.center()).norm();
}

// Geodesic angle of R_est * R_gt^T, in degrees.
inline double orientation_error(const Pose& est, const Pose& gt) {
  const Mat3 delta = est.R * gt.R.transpose();
  const double c = std::clamp((delta.trace() - 1.0) * 0.5, -1.0, 1.0);
  return std::acos(c) * kRadToDeg;
}

// Closest rotation in Frobenius norm (polar decomposition via SVD).
inline Mat3 nearest_rotation(const Mat3& M) {
  Eigen::JacobiSVD<Mat3> svd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 U = svd.matrixU();
  const Mat3 V = svd.matrixV();
  if ((U * V.transpose()).determinant() < 0.0) U.col(2) = -U.col(2);
  return U * V.transpose();
}

inline Mat3 rotation_about(const Vec3& axis, double angle_rad) {
  return Eigen::AngleAxisd(angle_rad, axis.normalized()).toRotationMatrix();
}

inline Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return s;
}

// Rotation whose camera looks along `forward` with image-down roughly along
// -world_up. Rows are the camera axes expressed in world coordinates.
inline Mat3 look_rotation(const Vec3& forward, const Vec3& world_up = Vec3::UnitZ()) {
  const Vec3 f = forward.normalized();
  Vec3 right = f.cross(world_up);
  if (right.norm() < 1e-12) right = f.cross(Vec3::UnitY());
  right.normalize();
  const Vec3 down = f.cross(right);
  Mat3 R;
  R.row(0) = right.transpose();
  R.row(1) = down.transpose();
  R.row(2) = f.transpose();
  return R;
}

}  // namespace illumloc
