#pragma once

/// \file
/// Pinhole camera. Camera space is right-handed with +x right, +y down and
/// +z forward; pixel (i, j) (column, row) has its center at (i + 0.5, j + 0.5).

#include <Eigen/Geometry>

#include <cmath>
#include <optional>
#include <string>

#include "neuvv/errors.hpp"

namespace neuvv {

struct Ray {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d dir = Eigen::Vector3d::UnitZ();
};

struct Camera {
  int width = 0;
  int height = 0;
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  Eigen::Affine3d pose = Eigen::Affine3d::Identity();  // camera-to-world

  /// Checks the intrinsics and that the pose is rigid within `tol`.
  void validate(double tol = 1e-9) const {
    validate_intrinsics();
    const double err = rotation_error();
    if (err > tol)
      throw InvalidArgument("camera: pose rotation is not orthonormal (|R^T R - I| = " + std::to_string(err) +
                            ", tolerance " + std::to_string(tol) + ")");
  }

  /// Size and focal checks only; instance-local cameras may carry scale.
  void validate_intrinsics() const {
    if (width <= 0 || height <= 0) throw InvalidArgument("camera: image size must be positive");
    if (!(fx > 0.0 && fy > 0.0)) throw InvalidArgument("camera: focal lengths must be positive");
  }

  double rotation_error() const {
    const Eigen::Matrix3d r = pose.linear();
    double err = (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    return std::max(err, std::abs(r.determinant() - 1.0));
  }

  /// Ray through continuous pixel coordinates (px, py). The direction is
  /// the pose's linear part applied to a unit camera-space vector, so it is
  /// unit length whenever the pose is rigid.
  Ray ray(double px, double py) const {
    const Eigen::Vector3d d = Eigen::Vector3d((px - cx) / fx, (py - cy) / fy, 1.0).normalized();
    return {pose.translation(), pose.linear() * d};
  }

  Ray pixel_ray(int i, int j) const { return ray(i + 0.5, j + 0.5); }

  Eigen::Vector3d position() const { return pose.translation(); }

  /// Camera seen through a world transform applied on the left.
  Camera transformed(const Eigen::Affine3d& t) const {
    Camera c = *this;
    c.pose = t * pose;
    return c;
  }

  /// Pixel coordinates of a world point in front of the camera.
  std::optional<Eigen::Vector2d> project(const Eigen::Vector3d& p) const {
    const Eigen::Vector3d q = pose.inverse() * p;
    if (q.z() <= 0.0) return std::nullopt;
    return Eigen::Vector2d(fx * q.x() / q.z() + cx, fy * q.y() / q.z() + cy);
  }

  /// Camera at `eye` looking at `target`, with `up` mapped to image-up.
  static Camera look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Eigen::Vector3d& up,
                        int width, int height, double fov_y_deg) {
    Camera c;
    c.width = width;
    c.height = height;
    c.fy = 0.5 * height / std::tan(0.5 * fov_y_deg * M_PI / 180.0);
    c.fx = c.fy;
    c.cx = 0.5 * width;
    c.cy = 0.5 * height;
    const Eigen::Vector3d z = (target - eye).normalized();
    Eigen::Vector3d x = z.cross(up);
    if (x.norm() < 1e-12) x = z.cross(Eigen::Vector3d::UnitX());
    x.normalize();
    const Eigen::Vector3d y = z.cross(x);
    Eigen::Matrix3d r;
    r.col(0) = x;
    r.col(1) = y;
    r.col(2) = z;
    c.pose = Eigen::Affine3d::Identity();
    c.pose.linear() = r;
    c.pose.translation() = eye;
    return c;
  }
};

}  // namespace neuvv
