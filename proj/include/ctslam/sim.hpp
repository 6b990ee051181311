#pragma once

// Synthetic data generation for an asynchronous multi-camera rig: analytic
// ground-truth trajectories, a random landmark cloud, staggered per-camera
// capture times, and configurable keypoint/descriptor noise.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "ctslam/camera.hpp"
#include "ctslam/errors.hpp"
#include "ctslam/lie.hpp"
#include "ctslam/metrics.hpp"
#include "ctslam/world.hpp"

namespace ctslam {

using GtTrajectory = std::function<Pose(double)>;

// Constant-twist motion: T(t) = T0 * Exp(t * rate).
inline GtTrajectory screw_trajectory(const Pose& T0, const Twist& rate) {
  return [T0, rate](double t) { return T0 * exp_map(Twist(t * rate)); };
}

// Level drive along +x at constant speed.
inline GtTrajectory straight_trajectory(double speed) {
  Twist rate = Twist::Zero();
  rate[0] = speed;
  return screw_trajectory(Pose::Identity(), rate);
}

// Forward drive with a sinusoidal lateral sweep; heading follows the path
// tangent so the body frame yaws back and forth.
inline GtTrajectory sine_swept_trajectory(double speed, double amplitude,
                                          double frequency) {
  return [=](double t) {
    const double w = 2.0 * M_PI * frequency;
    Pose T;
    T.t = Vec3(speed * t, amplitude * std::sin(w * t), 0.0);
    const double yaw = std::atan2(amplitude * w * std::cos(w * t), speed);
    T.R = Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix();
    return T;
  };
}

// Closed square circuit with rounded corners, traversed counterclockwise at
// constant speed. side is the outer edge length; corners are quarter arcs of
// the given radius. Heading follows the path tangent.
inline GtTrajectory square_loop_trajectory(double side, double speed,
                                           double corner_radius = 5.0) {
  if (corner_radius * 2.0 >= side) {
    throw InvalidInput("corner radius too large for square side");
  }
  const double straight = side - 2.0 * corner_radius;
  const double arc = 0.5 * M_PI * corner_radius;
  const double leg = straight + arc;
  const double perimeter = 4.0 * leg;

  return [=](double t) {
    double s = std::fmod(speed * t, perimeter);
    if (s < 0.0) s += perimeter;
    const int edge = std::min(3, static_cast<int>(s / leg));
    const double local = s - edge * leg;
    const double base_yaw = edge * 0.5 * M_PI;

    // Pose in the edge frame: straight run, then a quarter turn.
    Eigen::Vector2d p;
    double yaw;
    if (local <= straight) {
      p = {local, 0.0};
      yaw = 0.0;
    } else {
      const double phi = (local - straight) / corner_radius;
      p = {straight + corner_radius * std::sin(phi),
           corner_radius * (1.0 - std::cos(phi))};
      yaw = phi;
    }
    const Eigen::Rotation2Dd rot(base_yaw);
    // Edge start positions form the rounded square's straight segments.
    Eigen::Vector2d origin(corner_radius, 0.0);
    if (edge == 1) origin = {side, corner_radius};
    if (edge == 2) origin = {side - corner_radius, side};
    if (edge == 3) origin = {0.0, side - corner_radius};

    const Eigen::Vector2d xy = origin + rot * p;
    Pose T;
    T.t = Vec3(xy.x(), xy.y(), 0.0);
    T.R = Eigen::AngleAxisd(base_yaw + yaw, Vec3::UnitZ()).toRotationMatrix();
    return T;
  };
}

struct SimScenario {
  GtTrajectory trajectory;
  double t_start = 0.0;
  double duration = 10.0;
  RigCalibration rig;
  int n_landmarks = 500;
  double depth_min = 5.0;
  double depth_max = 30.0;
  double noise_px = 0.0;
  double outlier_fraction = 0.0;
  double bit_flip_p = 0.02;
  double gt_rate = 100.0;
  std::uint64_t seed = 0;
  // Extra seconds of landmark spread past the path end, so the view ahead
  // stays populated through the last frame.
  double anchor_pad = 0.0;
};

// Which landmark produced a keypoint, and whether it was emitted as an
// outlier. Parallel to SimData::frames keypoints.
struct SimKeypointTruth {
  int landmark = -1;
  bool outlier = false;
};

struct SimData {
  std::vector<CameraFrame> frames;
  std::vector<std::vector<SimKeypointTruth>> truth;
  std::vector<TimedPose> gt_samples;
  std::vector<Vec3> landmarks;
  std::vector<Descriptor> landmark_ids;
};

// Deterministic for a fixed scenario: one generator seeds every draw, and
// frames/landmarks are visited in a fixed order.
inline SimData generate(const SimScenario& scenario) {
  if (!scenario.trajectory) throw InvalidInput("scenario has no trajectory");
  if (scenario.rig.cameras.empty()) throw InvalidInput("scenario has no rig");

  std::mt19937_64 rng(scenario.seed);
  SimData data;

  // Landmark cloud scattered around the path.
  std::uniform_real_distribution<double> along(
      0.0, scenario.duration + scenario.anchor_pad);
  std::uniform_real_distribution<double> radius(scenario.depth_min,
                                                scenario.depth_max);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int j = 0; j < scenario.n_landmarks; ++j) {
    const Pose T = scenario.trajectory(scenario.t_start + along(rng));
    Vec3 dir(gauss(rng), gauss(rng), gauss(rng));
    if (dir.norm() < 1e-9) dir = Vec3::UnitX();
    dir.normalize();
    data.landmarks.push_back(T.t + radius(rng) * dir);
    Descriptor id;
    for (auto& w : id) w = rng();
    data.landmark_ids.push_back(id);
  }

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::bernoulli_distribution flip(scenario.bit_flip_p);

  const int sweeps =
      static_cast<int>(std::floor(scenario.duration / scenario.rig.sweep_period)) + 1;
  for (int i = 0; i < sweeps; ++i) {
    for (const CameraModel& cam : scenario.rig.cameras) {
      CameraFrame frame;
      frame.camera_id = cam.id;
      frame.t = scenario.t_start + i * scenario.rig.sweep_period + cam.fire_offset;
      const Pose T_wb = scenario.trajectory(frame.t);
      std::vector<SimKeypointTruth> truth;

      for (int j = 0; j < scenario.n_landmarks; ++j) {
        Eigen::Vector2d uv;
        try {
          uv = project(cam, data.landmarks[j], T_wb);
        } catch (const BehindCamera&) {
          continue;
        }
        if (!in_bounds(cam, uv)) continue;

        bool outlier = false;
        Descriptor desc = data.landmark_ids[j];
        if (scenario.outlier_fraction > 0.0 &&
            unit(rng) < scenario.outlier_fraction) {
          outlier = true;
          // A spurious detection: uniform in-image position at least 20 px
          // from the true spot, describing unrelated image content.
          Eigen::Vector2d moved;
          do {
            moved = {unit(rng) * (cam.width - 1), unit(rng) * (cam.height - 1)};
          } while ((moved - uv).norm() < 20.0);
          uv = moved;
          for (auto& w : desc) w = rng();
        } else if (scenario.noise_px > 0.0) {
          uv.x() += scenario.noise_px * gauss(rng);
          uv.y() += scenario.noise_px * gauss(rng);
          if (!in_bounds(cam, uv)) continue;
        }

        if (scenario.bit_flip_p > 0.0) {
          for (int b = 0; b < 256; ++b) {
            if (flip(rng)) desc[b / 64] ^= (std::uint64_t{1} << (b % 64));
          }
        }
        frame.keypoints.push_back({uv, 0});
        frame.descriptors.push_back(desc);
        truth.push_back({j, outlier});
      }
      data.frames.push_back(std::move(frame));
      data.truth.push_back(std::move(truth));
    }
  }

  const double step = 1.0 / scenario.gt_rate;
  for (double t = scenario.t_start;
       t <= scenario.t_start + scenario.duration + 1e-9; t += step) {
    data.gt_samples.push_back({t, scenario.trajectory(t)});
  }
  return data;
}

// Evenly staggered fire offsets over one sweep, matching a spinning capture
// head: camera k fires at k / n of the period.
inline void stagger_offsets(RigCalibration& rig, double spread = -1.0) {
  const double span = spread >= 0.0 ? spread : rig.sweep_period;
  const std::size_t n = rig.cameras.size();
  for (std::size_t k = 0; k < n; ++k) {
    rig.cameras[k].fire_offset = span * static_cast<double>(k) / static_cast<double>(n);
  }
}

// Camera-to-body rotation for a camera whose optical axis points along the
// body-frame heading yaw (body: x forward, y left, z up; camera: z forward,
// x right, y down).
inline Mat3 outward_facing(double yaw) {
  Mat3 R_bk;
  R_bk.col(0) = Vec3(std::sin(yaw), -std::cos(yaw), 0.0);
  R_bk.col(1) = Vec3(0.0, 0.0, -1.0);
  R_bk.col(2) = Vec3(std::cos(yaw), std::sin(yaw), 0.0);
  return R_bk;
}

inline CameraModel surround_camera(int id, double yaw, const Vec3& center_b) {
  CameraModel cam;
  cam.id = id;
  cam.fx = 350.0;
  cam.fy = 350.0;
  cam.cx = 480.0;
  cam.cy = 300.0;
  cam.width = 960;
  cam.height = 600;
  const Mat3 R_bk = outward_facing(yaw);
  cam.T_kb.R = R_bk.transpose();
  cam.T_kb.t = -(R_bk.transpose() * center_b);
  return cam;
}

// Forward stereo pair (ids 0, 1) plus an optional ring of outward-facing
// surround cameras (ids 2..), staggered fire offsets over one sweep. The
// ring cameras' 108-degree field of view overlaps between neighbours for
// any ring of five or more.
inline RigCalibration surround_rig(int n_surround = 0, double sweep = 0.1) {
  RigCalibration rig;
  rig.sweep_period = sweep;
  rig.cameras.push_back(surround_camera(0, 0.0, {0.5, 0.2, 0.0}));
  rig.cameras.push_back(surround_camera(1, 0.0, {0.5, -0.2, 0.0}));
  for (int k = 0; k < n_surround; ++k) {
    const double yaw = 2.0 * M_PI * k / n_surround;
    const Vec3 center(0.3 * std::cos(yaw), 0.3 * std::sin(yaw), 0.2);
    rig.cameras.push_back(surround_camera(2 + k, yaw, center));
  }
  rig.overlap_pairs = {{0, 1}};
  rig.init_pair = {0, 1};
  if (n_surround > 0) {
    for (int k = 0; k < n_surround; ++k) rig.surround_cameras.push_back(2 + k);
  } else {
    rig.surround_cameras = {0, 1};
  }
  // Stagger over 60% of the sweep so consecutive sweeps keep a clear gap.
  for (std::size_t k = 0; k < rig.cameras.size(); ++k) {
    rig.cameras[k].fire_offset = 0.6 * sweep * static_cast<double>(k) /
                                 static_cast<double>(rig.cameras.size());
  }
  return rig;
}

}  // namespace ctslam
