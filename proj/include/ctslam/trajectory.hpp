#pragma once

// trajectory.hpp - Continuous-time pose trajectory as a cumulative cubic
// B-spline over SE(3) with non-uniform knots, plus the linear motion model
// used while tracking.
//
// For t in [tau_i, tau_i+1) the pose is
//   T(t) = Exp(xi_{i-1}) * prod_{j=1..3} Exp(Btil_j(t) * Omega_{i-1+j}),
//   Omega_p = Log(Exp(xi_{p-1})^-1 Exp(xi_p)),
// where Btil_j is the cumulative basis Btil_j = sum_{l=j..3} B_{l,4} over
// the local knot window. Control poses beyond either end are linear
// extrapolations of the two nearest real ones.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "ctslam/errors.hpp"
#include "ctslam/lie.hpp"

namespace ctslam {

using KnotVector = std::vector<double>;

/// @brief Cox-de Boor basis B_{l,k} over an explicit knot vector.
///
/// Spans are half-open except the final span of the vector, which is closed
/// so the basis covers the last knot. Terms with zero denominator drop out.
inline double basis(const KnotVector& knots, int l, int k, double t) {
  if (l < 0 || k < 1 || l + k > static_cast<int>(knots.size()) - 1) {
    throw IndexOutOfRange("basis: B_{l,k} needs knots[l..l+k]");
  }
  if (k == 1) {
    const bool final_span = (l + 2 == static_cast<int>(knots.size()));
    if (t >= knots[l] && (t < knots[l + 1] || (final_span && t <= knots[l + 1])))
      return 1.0;
    return 0.0;
  }
  double value = 0.0;
  const double dl = knots[l + k - 1] - knots[l];
  if (dl > 0.0) value += (t - knots[l]) / dl * basis(knots, l, k - 1, t);
  const double dr = knots[l + k] - knots[l + 1];
  if (dr > 0.0) value += (knots[l + k] - t) / dr * basis(knots, l + 1, k - 1, t);
  return value;
}

enum class BoundaryPolicy { kNone, kLinear };
enum class BoundarySide { kBegin, kEnd };

/// Control poses (as twists) with one knot per pose. Evaluation outside the
/// knot range extrapolates linearly on the sides whose policy allows it.
struct SplineTrajectory {
  std::vector<Twist> control_poses;
  std::vector<double> rep_times;
  BoundaryPolicy begin_policy = BoundaryPolicy::kLinear;
  BoundaryPolicy end_policy = BoundaryPolicy::kLinear;

  std::size_t size() const { return control_poses.size(); }

  void append(double time, const Twist& xi) {
    if (!rep_times.empty() && time <= rep_times.back()) {
      throw Error("SplineTrajectory::append: rep_times must strictly increase");
    }
    rep_times.push_back(time);
    control_poses.push_back(xi);
  }
};

namespace detail {

/// Knot time for any integer index; out-of-range indices continue the grid
/// with the edge spacing.
inline double extended_knot(const SplineTrajectory& traj, long j) {
  const long n = static_cast<long>(traj.size());
  if (j < 0) return traj.rep_times[0] + j * (traj.rep_times[1] - traj.rep_times[0]);
  if (j >= n)
    return traj.rep_times[n - 1] +
           (j - (n - 1)) * (traj.rep_times[n - 1] - traj.rep_times[n - 2]);
  return traj.rep_times[j];
}

/// Control pose for any integer index; out-of-range indices continue the
/// relative motion of the two nearest real poses.
inline Pose extended_control(const SplineTrajectory& traj, long j) {
  const long n = static_cast<long>(traj.size());
  if (j >= 0 && j < n) return exp_map(traj.control_poses[j]);
  if (j < 0) {
    const Pose first = exp_map(traj.control_poses[0]);
    const Pose step = inverse(exp_map(traj.control_poses[1])) * first;
    return first * pose_pow(step, static_cast<double>(-j));
  }
  const Pose last = exp_map(traj.control_poses[n - 1]);
  const Pose step = inverse(exp_map(traj.control_poses[n - 2])) * last;
  return last * pose_pow(step, static_cast<double>(j - (n - 1)));
}

/// Segment index i with extended_knot(i) <= t < extended_knot(i+1).
inline long locate_segment(const SplineTrajectory& traj, double t) {
  const long n = static_cast<long>(traj.size());
  const auto& tau = traj.rep_times;
  if (t < tau[0]) {
    const double dt = tau[1] - tau[0];
    return static_cast<long>(std::floor((t - tau[0]) / dt));
  }
  if (t >= tau[n - 1]) {
    const double dt = tau[n - 1] - tau[n - 2];
    return (n - 1) + static_cast<long>(std::floor((t - tau[n - 1]) / dt));
  }
  const auto it = std::upper_bound(tau.begin(), tau.end(), t);
  return static_cast<long>(it - tau.begin()) - 1;
}

}  // namespace detail

/// @brief Evaluate the spline pose at time t.
///
/// Needs at least two control poses. Times outside [tau_1, tau_{n-2}) use
/// extrapolated control poses and are rejected with OutOfDomain when the
/// corresponding side's policy is kNone.
inline Pose evaluate_spline(const SplineTrajectory& traj, double t) {
  const long n = static_cast<long>(traj.size());
  if (n < 2) throw TooFewControlPoses("evaluate_spline: need >= 2 control poses");
  if (traj.control_poses.size() != traj.rep_times.size()) {
    throw Error("evaluate_spline: control_poses/rep_times size mismatch");
  }

  const long i = detail::locate_segment(traj, t);
  if (i < 1 && traj.begin_policy == BoundaryPolicy::kNone) {
    throw OutOfDomain("evaluate_spline: t before begin of spline domain");
  }
  if (i > n - 3 && traj.end_policy == BoundaryPolicy::kNone) {
    throw OutOfDomain("evaluate_spline: t past end of spline domain");
  }

  // Local knot window [tau_{i-3} .. tau_{i+4}]; index l in the window is
  // global basis index i-3+l. The cumulative form needs B_{i-2..i,4}.
  KnotVector window(8);
  for (int w = 0; w < 8; ++w) window[w] = detail::extended_knot(traj, i - 3 + w);

  const double b1 = basis(window, 1, 4, t);
  const double b2 = basis(window, 2, 4, t);
  const double b3 = basis(window, 3, 4, t);
  const double btil[3] = {b1 + b2 + b3, b2 + b3, b3};

  Pose T = detail::extended_control(traj, i - 1);
  Pose prev = T;
  for (int j = 1; j <= 3; ++j) {
    const Pose next = detail::extended_control(traj, i - 1 + j);
    const Twist omega = log_map(inverse(prev) * next);
    T = T * exp_map(Twist(btil[j - 1] * omega));
    prev = next;
  }
  return T;
}

/// @brief Materialize `count` extrapolated knots on one side.
inline SplineTrajectory extrapolate_boundary(const SplineTrajectory& traj,
                                             BoundarySide side, int count) {
  if (traj.size() < 2) {
    throw TooFewControlPoses("extrapolate_boundary: need >= 2 control poses");
  }
  SplineTrajectory out = traj;
  const long n = static_cast<long>(traj.size());
  if (side == BoundarySide::kEnd) {
    for (int j = 1; j <= count; ++j) {
      out.control_poses.push_back(
          log_map(detail::extended_control(traj, n - 1 + j)));
      out.rep_times.push_back(detail::extended_knot(traj, n - 1 + j));
    }
  } else {
    for (int j = 1; j <= count; ++j) {
      out.control_poses.insert(out.control_poses.begin(),
                               log_map(detail::extended_control(traj, -j)));
      out.rep_times.insert(out.rep_times.begin(),
                           detail::extended_knot(traj, -j));
    }
  }
  return out;
}

/// Linear motion model used while tracking: a single pose parameter at time
/// `time`, pinned against a reference pose evaluated on the spline.
struct LinearMotion {
  Twist pose_param = Twist::Zero();  // xi at `time`
  double time = 0.0;
  double ref_time = 0.0;
  Pose ref_pose;
};

/// @brief Evaluate the linear model: T(t) = Exp(xi) (Exp(xi)^-1 T_ref)^alpha
/// with alpha = (time - t) / (time - ref_time).
inline Pose evaluate_linear(const LinearMotion& lm, double t) {
  if (lm.time == lm.ref_time) {
    throw Error("evaluate_linear: time and ref_time coincide");
  }
  const double alpha = (lm.time - t) / (lm.time - lm.ref_time);
  const Pose at_i = exp_map(lm.pose_param);
  return at_i * pose_pow(inverse(at_i) * lm.ref_pose, alpha);
}

}  // namespace ctslam
