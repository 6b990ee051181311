#pragma once

// lie.hpp - SE(3) types and exponential-map utilities.
//
// Twist convention: xi = [rho; phi] with the translational part first and
// the rotational part last. Poses store rotation and translation separately
// and map body coordinates into the parent (world) frame.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>

#include "ctslam/errors.hpp"

namespace ctslam {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Twist = Eigen::Matrix<double, 6, 1>;

/// Rigid transform T = (R, t); act(T, x) = R x + t.
struct Pose {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  static Pose Identity() { return Pose{}; }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = R;
    m.topRightCorner<3, 1>() = t;
    return m;
  }

  static Pose FromMatrix(const Mat4& m) {
    return Pose{m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>()};
  }
};

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(),  //
      v.z(), 0.0, -v.x(),   //
      -v.y(), v.x(), 0.0;
  return m;
}

inline Vec3 unskew(const Mat3& m) {
  return Vec3(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1)) * 0.5;
}

namespace detail {

// Angle below which exp/log switch to the 2nd-order Taylor branch.
inline constexpr double kSmallAngle = 1e-8;
// log_map rejects rotations this close to pi, where the axis is ambiguous.
inline constexpr double kPiMargin = 1e-6;

/// Rodrigues formula branch, valid away from theta = 0.
inline Mat3 so3_exp_exact(const Vec3& phi) {
  const double theta = phi.norm();
  const Mat3 K = skew(phi / theta);
  return Mat3::Identity() + std::sin(theta) * K +
         (1.0 - std::cos(theta)) * K * K;
}

/// 2nd-order Taylor branch for tiny angles.
inline Mat3 so3_exp_small(const Vec3& phi) {
  const Mat3 K = skew(phi);
  return Mat3::Identity() + K + 0.5 * K * K;
}

/// Left Jacobian of SO(3); exp translation is V(phi) * rho.
inline Mat3 so3_left_jacobian_exact(const Vec3& phi) {
  const double theta = phi.norm();
  const double theta2 = theta * theta;
  const Mat3 K = skew(phi);
  double a, b;
  if (theta < 1e-4) {
    // Series for the cancellation-prone coefficients.
    a = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0;
    b = 1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0;
  } else {
    a = (1.0 - std::cos(theta)) / theta2;
    b = (theta - std::sin(theta)) / (theta2 * theta);
  }
  return Mat3::Identity() + a * K + b * K * K;
}

inline Mat3 so3_left_jacobian_small(const Vec3& phi) {
  const Mat3 K = skew(phi);
  return Mat3::Identity() + 0.5 * K + K * K / 6.0;
}

inline Mat3 so3_left_jacobian_inv(const Vec3& phi) {
  const double theta = phi.norm();
  const double theta2 = theta * theta;
  const Mat3 K = skew(phi);
  double c;
  if (theta < 1e-2) {
    c = 1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0;
  } else {
    const double half = 0.5 * theta;
    c = 1.0 / theta2 - std::cos(half) / (2.0 * theta * std::sin(half));
  }
  return Mat3::Identity() - 0.5 * K + c * K * K;
}

}  // namespace detail

/// @brief SO(3) exponential.
inline Mat3 so3_exp(const Vec3& phi) {
  if (phi.norm() < detail::kSmallAngle) return detail::so3_exp_small(phi);
  return detail::so3_exp_exact(phi);
}

/// @brief SO(3) logarithm. Throws AngleNearPi within 1e-6 of pi.
inline Vec3 so3_log(const Mat3& R) {
  Eigen::Quaterniond q(R);
  q.normalize();
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  const Vec3 v = q.vec();
  const double vn = v.norm();
  const double theta = 2.0 * std::atan2(vn, q.w());
  if (theta > M_PI - detail::kPiMargin) {
    throw AngleNearPi("so3_log: rotation angle within 1e-6 of pi");
  }
  if (vn < detail::kSmallAngle) {
    // atan2(x, w)/x -> (1/w) (1 - x^2 / (3 w^2)) as x -> 0.
    const double w = q.w();
    return v * (2.0 / w) * (1.0 - vn * vn / (3.0 * w * w));
  }
  return (theta / vn) * v;
}

/// @brief SE(3) exponential: R = exp(phi^), t = V(phi) rho.
inline Pose exp_map(const Twist& xi) {
  const Vec3 rho = xi.head<3>();
  const Vec3 phi = xi.tail<3>();
  Pose T;
  if (phi.norm() < detail::kSmallAngle) {
    T.R = detail::so3_exp_small(phi);
    T.t = detail::so3_left_jacobian_small(phi) * rho;
  } else {
    T.R = detail::so3_exp_exact(phi);
    T.t = detail::so3_left_jacobian_exact(phi) * rho;
  }
  return T;
}

/// @brief SE(3) logarithm, inverse of exp_map. Throws AngleNearPi near pi.
inline Twist log_map(const Pose& T) {
  const Vec3 phi = so3_log(T.R);
  Twist xi;
  xi.tail<3>() = phi;
  xi.head<3>() = detail::so3_left_jacobian_inv(phi) * T.t;
  return xi;
}

inline Pose compose(const Pose& a, const Pose& b) {
  return Pose{a.R * b.R, a.R * b.t + a.t};
}

inline Pose inverse(const Pose& T) {
  return Pose{T.R.transpose(), -(T.R.transpose() * T.t)};
}

inline Vec3 act(const Pose& T, const Vec3& x) { return T.R * x + T.t; }

inline Pose operator*(const Pose& a, const Pose& b) { return compose(a, b); }
inline Vec3 operator*(const Pose& T, const Vec3& x) { return act(T, x); }

/// @brief Fractional power T^alpha = exp(alpha log T).
inline Pose pose_pow(const Pose& T, double alpha) {
  return exp_map(Twist(alpha * log_map(T)));
}

/// @brief Geodesic interpolation from a (u=0) to b (u=1).
inline Pose interpolate(const Pose& a, const Pose& b, double u) {
  return a * pose_pow(inverse(a) * b, u);
}

/// @brief Rotation angle of a pose, in radians.
inline double rotation_angle(const Pose& T) {
  const double c = std::clamp(0.5 * (T.R.trace() - 1.0), -1.0, 1.0);
  return std::acos(c);
}

}  // namespace ctslam
