#pragma once

// Per-multi-frame pose estimation: constant-velocity prediction, descriptor
// matching against a reference key multi-frame, robust asynchronous
// multi-view PnP under a linear motion model, and key-frame selection.

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ctslam/camera.hpp"
#include "ctslam/errors.hpp"
#include "ctslam/lie.hpp"
#include "ctslam/matching.hpp"
#include "ctslam/nlls.hpp"
#include "ctslam/trajectory.hpp"
#include "ctslam/world.hpp"

namespace ctslam {

struct TrackingConfig {
  int ransac_sample = 7;
  int min_inliers = 12;
  double kmf_translation = 1.0;      // meters
  double kmf_rotation_deg = 1.0;     // degrees
  double kmf_reobs_ratio = 0.35;
  int kmf_reobs_min_cams = 2;
  int kmf_staleness = 20;            // multi-frames since the last key frame
  double inlier_threshold_px = 2.0;
  double match_ratio = 0.7;
  int ransac_max_iterations = 500;
  double ransac_confidence = 0.999;
  double huber_delta_px = 1.0;
  bool use_overlap_pairs = false;    // also match across listed overlap pairs
  bool force_sync = false;           // ablation: pretend all cameras fire at rep_time
  std::uint64_t seed = 0;
};

// One 2D-3D correspondence used by PnP: a current keypoint matched to a map
// point through the reference key multi-frame.
struct TrackedPoint {
  int point_id = -1;
  int camera_id = -1;
  int keypoint_index = -1;
  Vec3 position = Vec3::Zero();     // world frame
  Vec2 uv = Vec2::Zero();
  double t = 0.0;                   // capture time used in the residual
};

struct TrackResult {
  LinearMotion motion;
  std::vector<TrackedPoint> inliers;
  int ransac_iterations = 0;
};

// Constant-velocity extrapolation from the previous two multi-frame poses.
inline Twist predict_initial(const MultiFrame& prev2, const MultiFrame& prev1,
                             double t_new) {
  if (!prev2.motion || !prev1.motion) {
    throw MissingHistory("prediction needs two tracked multi-frames");
  }
  const double t1 = prev1.rep_time, t2 = prev2.rep_time;
  if (t1 == t2) {
    throw MissingHistory("prediction needs distinct timestamps");
  }
  const Pose T1 = exp_map(prev1.motion->pose_param);
  const Pose T2 = exp_map(prev2.motion->pose_param);
  const double beta = (t_new - t1) / (t1 - t2);
  return log_map(T1 * pose_pow(inverse(T2) * T1, beta));
}

namespace detail {

inline std::vector<Vec2> keypoint_positions(const CameraFrame& frame) {
  std::vector<Vec2> uv;
  uv.reserve(frame.keypoints.size());
  for (const Keypoint& kp : frame.keypoints) uv.push_back(kp.uv);
  return uv;
}

}  // namespace detail

// Matches the multi-frame's keypoints to map points via the reference key
// multi-frame. Pairs with at least 8 raw matches are filtered on the
// essential constraint; sparser pairs keep their raw matches. Each current
// keypoint is associated at most once (first pair wins).
inline std::vector<TrackedPoint> collect_map_correspondences(
    const MultiFrame& mf, const KeyMultiFrame& ref, const WorldMap& world,
    const RigCalibration& rig, const TrackingConfig& cfg) {
  std::vector<TrackedPoint> out;
  std::set<std::pair<int, int>> used;  // (camera_id, keypoint_index)
  std::uint64_t pair_seed = cfg.seed;

  for (const CameraFrame& query : mf.frames) {
    std::vector<int> ref_frames;
    for (std::size_t fr = 0; fr < ref.mf.frames.size(); ++fr) {
      const int ref_cam = ref.mf.frames[fr].camera_id;
      bool usable = ref_cam == query.camera_id;
      if (cfg.use_overlap_pairs) {
        for (const auto& [a, b] : rig.overlap_pairs) {
          usable = usable || (a == query.camera_id && b == ref_cam) ||
                   (b == query.camera_id && a == ref_cam);
        }
      }
      if (usable) ref_frames.push_back(static_cast<int>(fr));
    }

    for (int fr : ref_frames) {
      const CameraFrame& refer = ref.mf.frames[fr];
      std::vector<Match> matches =
          match_ratio(query.descriptors, refer.descriptors, cfg.match_ratio);
      ++pair_seed;
      if (static_cast<int>(matches.size()) >= 8) {
        EssentialFilterParams params;
        params.seed = pair_seed;
        try {
          matches = filter_essential(matches, detail::keypoint_positions(query),
                                     detail::keypoint_positions(refer),
                                     rig.camera(query.camera_id),
                                     rig.camera(refer.camera_id), params);
        } catch (const Error&) {
          // Degenerate pair geometry: fall back to the raw matches.
        }
      }
      for (const Match& m : matches) {
        const int pid = ref.links[fr][m.b];
        if (pid < 0 || !world.has_point(pid)) continue;
        if (!used.insert({query.camera_id, m.a}).second) continue;
        out.push_back({pid, query.camera_id, m.a,
                       world.point(pid).position, query.keypoints[m.a].uv,
                       cfg.force_sync ? mf.rep_time : query.t});
      }
    }
  }
  return out;
}

namespace detail {

// Residual stack u - pi(X, T(t_ik)) for a candidate linear motion, with the
// free twist being the pose at the multi-frame's representative time.
inline void add_pnp_terms(Problem& problem, int block,
                          const std::vector<TrackedPoint>& points,
                          const RigCalibration& rig, double rep_time,
                          double ref_time, const Pose& ref_pose,
                          const RobustLoss& loss) {
  for (const TrackedPoint& p : points) {
    const CameraModel& cam = rig.camera(p.camera_id);
    problem.add_residual(
        {block}, 2,
        [&cam, p, rep_time, ref_time, ref_pose](
            const std::vector<Eigen::VectorXd>& v) -> Eigen::VectorXd {
          LinearMotion lm{Twist(v[0]), rep_time, ref_time, ref_pose};
          Eigen::VectorXd r(2);
          try {
            const Pose T_wb = evaluate_linear(lm, p.t);
            r = p.uv - project(cam, p.position, T_wb);
          } catch (const Error&) {
            r << 1e4, 1e4;
          }
          return r;
        },
        Eigen::VectorXd(), loss);
  }
}

inline double reprojection_error_px(const TrackedPoint& p,
                                    const RigCalibration& rig,
                                    const LinearMotion& lm) {
  try {
    const Pose T_wb = evaluate_linear(lm, p.t);
    return (p.uv - project(rig.camera(p.camera_id), p.position, T_wb)).norm();
  } catch (const Error&) {
    return std::numeric_limits<double>::infinity();
  }
}

}  // namespace detail

// Robust asynchronous multi-view PnP. RANSAC over minimal samples, each
// refined by a small LM solve; the winning hypothesis (most inliers, ties by
// robust cost) is re-solved on all its inliers.
inline TrackResult track(const MultiFrame& mf, const KeyMultiFrame& ref,
                         const WorldMap& world, const RigCalibration& rig,
                         const SplineTrajectory& traj, const Twist& initial,
                         const TrackingConfig& cfg) {
  const std::vector<TrackedPoint> points =
      collect_map_correspondences(mf, ref, world, rig, cfg);
  const int n = static_cast<int>(points.size());
  if (n < cfg.ransac_sample) {
    throw TrackingFailure("tracking needs " +
                          std::to_string(cfg.ransac_sample) +
                          " correspondences, got " + std::to_string(n));
  }

  const Pose ref_pose = evaluate_spline(traj, ref.mf.rep_time);
  const double ref_time = ref.mf.rep_time;
  const RobustLoss huber = RobustLoss::Huber(cfg.huber_delta_px);

  const auto make_motion = [&](const Twist& xi) {
    return LinearMotion{xi, mf.rep_time, ref_time, ref_pose};
  };
  const auto solve_subset = [&](const std::vector<TrackedPoint>& subset,
                                const Twist& start, int max_iterations,
                                const RobustLoss& loss) {
    Problem problem;
    const int block = problem.add_twist_block(start);
    detail::add_pnp_terms(problem, block, subset, rig, mf.rep_time, ref_time,
                          ref_pose, loss);
    SolveOptions opts;
    opts.max_iterations = max_iterations;
    solve_lm(problem, opts);
    return problem.twist_value(block);
  };

  std::mt19937_64 rng(cfg.seed);
  std::vector<int> best_inliers;
  double best_cost = std::numeric_limits<double>::infinity();
  int iter = 0;
  int max_iters = cfg.ransac_max_iterations;

  for (; iter < max_iters; ++iter) {
    std::vector<int> sample;
    while (static_cast<int>(sample.size()) < cfg.ransac_sample) {
      const int idx = static_cast<int>(rng() % n);
      if (std::find(sample.begin(), sample.end(), idx) == sample.end()) {
        sample.push_back(idx);
      }
    }
    std::vector<TrackedPoint> subset;
    for (int idx : sample) subset.push_back(points[idx]);

    Twist hypothesis;
    try {
      hypothesis = solve_subset(subset, initial, 10, RobustLoss::None());
    } catch (const Error&) {
      continue;
    }

    const LinearMotion lm = make_motion(hypothesis);
    std::vector<int> inliers;
    double cost = 0.0;
    for (int i = 0; i < n; ++i) {
      const double e = detail::reprojection_error_px(points[i], rig, lm);
      if (e < cfg.inlier_threshold_px) inliers.push_back(i);
      cost += huber.rho(std::isfinite(e) ? e * e : 1e8);
    }
    if (inliers.size() > best_inliers.size() ||
        (inliers.size() == best_inliers.size() && cost < best_cost)) {
      best_inliers = std::move(inliers);
      best_cost = cost;
    }

    // Confidence-based early exit on the best inlier ratio so far.
    const double ratio = static_cast<double>(best_inliers.size()) / n;
    const double p_sample = std::pow(ratio, cfg.ransac_sample);
    if (p_sample >= 1.0) {
      max_iters = iter + 1;
    } else if (p_sample > 0.0) {
      const double needed =
          std::log(1.0 - cfg.ransac_confidence) / std::log(1.0 - p_sample);
      if (needed < static_cast<double>(max_iters)) {
        max_iters = std::max(iter + 1, static_cast<int>(std::ceil(needed)));
      }
    }
  }

  if (static_cast<int>(best_inliers.size()) < cfg.min_inliers) {
    throw TrackingFailure("only " + std::to_string(best_inliers.size()) +
                          " PnP inliers, need " +
                          std::to_string(cfg.min_inliers));
  }

  // Final robust refinement on the winning inlier set, then recount.
  std::vector<TrackedPoint> support;
  for (int i : best_inliers) support.push_back(points[i]);
  Twist refined;
  try {
    refined = solve_subset(support, initial, 50, huber);
  } catch (const Error& e) {
    throw TrackingFailure(std::string("inlier refinement failed: ") + e.what());
  }

  TrackResult result;
  result.motion = make_motion(refined);
  result.ransac_iterations = iter;
  for (const TrackedPoint& p : points) {
    if (detail::reprojection_error_px(p, rig, result.motion) <
        cfg.inlier_threshold_px) {
      result.inliers.push_back(p);
    }
  }
  if (static_cast<int>(result.inliers.size()) < cfg.min_inliers) {
    throw TrackingFailure("only " + std::to_string(result.inliers.size()) +
                          " PnP inliers after refinement, need " +
                          std::to_string(cfg.min_inliers));
  }
  return result;
}

struct KmfDecision {
  bool insert = false;
  std::string reason;
};

// Hybrid key-frame selection: relative motion against the reference, map
// reobservability, then staleness. The reason names the first clause that
// fired.
inline KmfDecision select_kmf(const MultiFrame& mf, const KeyMultiFrame& ref,
                              const SplineTrajectory& traj,
                              const std::vector<TrackedPoint>& inliers,
                              const WorldMap& world, int staleness,
                              const TrackingConfig& cfg) {
  if (!mf.motion) throw MissingHistory("select_kmf needs a tracked multi-frame");
  const Pose T_i = exp_map(mf.motion->pose_param);
  const Pose T_ref = evaluate_spline(traj, ref.mf.rep_time);
  const Pose rel = inverse(T_ref) * T_i;

  if (rel.t.norm() > cfg.kmf_translation) {
    return {true, "translation"};
  }
  if (rotation_angle(rel) > cfg.kmf_rotation_deg * M_PI / 180.0) {
    return {true, "rotation"};
  }

  std::vector<MapMatch> links;
  links.reserve(inliers.size());
  for (const TrackedPoint& p : inliers) {
    links.push_back({p.point_id, p.camera_id, p.keypoint_index, 0});
  }
  const std::vector<int> reference_points =
      world.points_in_kmf(ref.mf.id);
  if (reobservation_ratio(reference_points, links, cfg.kmf_reobs_min_cams) <
      cfg.kmf_reobs_ratio) {
    return {true, "reobservation"};
  }
  if (staleness >= cfg.kmf_staleness) {
    return {true, "staleness"};
  }
  return {false, ""};
}

}  // namespace ctslam
