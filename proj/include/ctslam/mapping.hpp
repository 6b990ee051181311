#pragma once

// mapping.hpp - Windowed spline bundle adjustment, map point creation and
// culling.
//
// The control poses live on the key multi-frames; the working spline is
// rebuilt from them on demand and written back after a successful solve.
// Bundle adjustment refines the last `window` control poses jointly with
// every map point observed in that window. Observations from older KMFs
// still constrain those points through frozen pose blocks, and observations
// past the last knot reach the virtual boundary controls, which stay
// eliminated functions of the real ones.

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ctslam/camera.hpp"
#include "ctslam/errors.hpp"
#include "ctslam/lie.hpp"
#include "ctslam/matching.hpp"
#include "ctslam/nlls.hpp"
#include "ctslam/trajectory.hpp"
#include "ctslam/world.hpp"

namespace ctslam {

struct MappingConfig {
  int window = 11;                      // jointly refined key multi-frames
  double cull_reproj_px = 1.5;          // creation and culling threshold
  int cross_kmf_depth = 4;              // previous KMFs matched for new points
  double ba_guard_translation = 6.0;    // meters; larger moves are discarded
  double ba_guard_rotation_deg = 20.0;
  double match_ratio = 0.7;
  double huber_delta_px = 1.0;
  int ba_max_iterations = 25;
  bool force_sync = false;              // ablation: observations at rep_time
  std::uint64_t seed = 0;
};

/// @brief Rebuild the spline owned jointly by the key multi-frames: control
/// pose k belongs to the k-th KMF in id order.
inline SplineTrajectory trajectory_from_kmfs(const WorldMap& world) {
  SplineTrajectory traj;
  for (const auto& [id, kmf] : world.kmfs()) {
    traj.append(kmf.mf.rep_time, kmf.control_pose);
  }
  return traj;
}

namespace detail {

using Mat66 = Eigen::Matrix<double, 6, 6>;

// One camera image inside the adjustment: its capture time, the real control
// rows that influence the spline there, and value-keyed caches for the pose
// and the pose-by-control derivatives shared by all of its observations.
struct BaImage {
  double t = 0.0;
  const CameraModel* cam = nullptr;
  std::vector<int> rows;
  std::vector<double> pose_key, jac_key;
  Pose pose;
  std::vector<Mat66> D;
};

// Real control rows feeding the spline at time t. Out-of-range cumulative
// indices resolve to the two edge controls that generate the virtual ones,
// so their derivative chains flow through the boundary extrapolation.
inline std::vector<int> control_rows(const SplineTrajectory& traj, double t) {
  const long n = static_cast<long>(traj.size());
  const long i = locate_segment(traj, t);
  std::set<int> rows;
  for (long j = i - 1; j <= i + 2; ++j) {
    if (j < 0) {
      rows.insert(0);
      rows.insert(1);
    } else if (j >= n) {
      rows.insert(static_cast<int>(n - 2));
      rows.insert(static_cast<int>(n - 1));
    } else {
      rows.insert(static_cast<int>(j));
    }
  }
  return {rows.begin(), rows.end()};
}

// Shared evaluation state for all residual terms of one adjustment.
struct BaState {
  SplineTrajectory scratch;
  std::vector<BaImage> images;

  static std::vector<double> key_of(const std::vector<Eigen::VectorXd>& v,
                                    std::size_t n_controls) {
    std::vector<double> key;
    key.reserve(6 * n_controls);
    for (std::size_t k = 0; k < n_controls; ++k) {
      for (int m = 0; m < 6; ++m) key.push_back(v[k][m]);
    }
    return key;
  }

  const Pose& pose_at(int img, const std::vector<Eigen::VectorXd>& v) {
    BaImage& im = images[img];
    std::vector<double> key = key_of(v, im.rows.size());
    if (key == im.pose_key) return im.pose;
    for (std::size_t k = 0; k < im.rows.size(); ++k) {
      scratch.control_poses[im.rows[k]] = Twist(v[k]);
    }
    im.pose = evaluate_spline(scratch, im.t);
    im.pose_key = std::move(key);
    return im.pose;
  }

  // Central-difference d Log(T(delta (+) xi_c) T0^-1) / d delta per control
  // row, computed once per image and reused by every observation in it.
  const std::vector<Mat66>& ctrl_jacobians(
      int img, const std::vector<Eigen::VectorXd>& v) {
    const Pose T0 = pose_at(img, v);
    BaImage& im = images[img];
    std::vector<double> key = key_of(v, im.rows.size());
    if (key == im.jac_key) return im.D;

    const double h = 1e-6;
    im.D.assign(im.rows.size(), Mat66::Zero());
    for (std::size_t c = 0; c < im.rows.size(); ++c) {
      const Twist base(v[c]);
      for (int m = 0; m < 6; ++m) {
        Twist delta = Twist::Zero();
        delta[m] = h;
        scratch.control_poses[im.rows[c]] =
            log_map(exp_map(delta) * exp_map(base));
        const Twist hi = log_map(evaluate_spline(scratch, im.t) * inverse(T0));
        delta[m] = -h;
        scratch.control_poses[im.rows[c]] =
            log_map(exp_map(delta) * exp_map(base));
        const Twist lo = log_map(evaluate_spline(scratch, im.t) * inverse(T0));
        im.D[c].col(m) = (hi - lo) / (2.0 * h);
      }
      scratch.control_poses[im.rows[c]] = base;
    }
    im.jac_key = std::move(key);
    return im.D;
  }
};

struct BaSetup {
  std::vector<int> kmf_ids;          // id order; index == control row
  std::set<int> free_ids;            // KMFs whose controls stay free
  std::vector<int> ctrl_block;       // problem block per control row
  std::map<int, int> point_block;    // map point id -> problem block
  std::shared_ptr<BaState> state;
  int n_observations = 0;
};

/// Populate `problem` with one robustified reprojection term per observation
/// of every map point seen in the `point_source_ids` KMFs. Control blocks
/// outside `free_ids` are frozen; the caller solves and writes back.
inline BaSetup build_ba_problem(Problem& problem, const WorldMap& world,
                                const RigCalibration& rig,
                                const MappingConfig& cfg,
                                const std::set<int>& free_ids,
                                const std::set<int>& point_source_ids) {
  BaSetup setup;
  setup.state = std::make_shared<BaState>();
  setup.state->scratch = trajectory_from_kmfs(world);
  setup.free_ids = free_ids;

  for (const auto& [id, kmf] : world.kmfs()) setup.kmf_ids.push_back(id);
  const int n_kmfs = static_cast<int>(setup.kmf_ids.size());

  for (int k = 0; k < n_kmfs; ++k) {
    const int id = setup.kmf_ids[k];
    setup.ctrl_block.push_back(
        problem.add_twist_block(world.kmf(id).control_pose));
    problem.set_frozen(setup.ctrl_block.back(), free_ids.count(id) == 0);
  }

  std::set<int> point_ids;
  for (int id : point_source_ids) {
    for (int pid : world.points_in_kmf(id)) {
      point_ids.insert(pid);
    }
  }
  for (int pid : point_ids) {
    setup.point_block[pid] =
        problem.add_point_block(world.point(pid).position);
  }

  std::map<std::pair<int, int>, int> image_of;  // (kmf id, camera id)
  const RobustLoss loss = RobustLoss::Huber(cfg.huber_delta_px);
  const std::shared_ptr<BaState>& state = setup.state;

  for (int pid : point_ids) {
    for (const ObsRef& obs : world.point(pid).observations) {
      const KeyMultiFrame& kmf = world.kmf(obs.kmf_id);
      const int f = frame_index(kmf.mf, obs.camera_id);
      if (f < 0) throw Error("bundle_adjust: observation of missing frame");
      const CameraFrame& frame = kmf.mf.frames[f];

      const auto key = std::make_pair(obs.kmf_id, obs.camera_id);
      auto it = image_of.find(key);
      if (it == image_of.end()) {
        BaImage im;
        im.t = cfg.force_sync ? kmf.mf.rep_time : frame.t;
        im.cam = &rig.camera(obs.camera_id);
        im.rows = control_rows(state->scratch, im.t);
        it = image_of.emplace(key, static_cast<int>(state->images.size()))
                 .first;
        state->images.push_back(std::move(im));
      }
      const int img = it->second;
      const BaImage& im = state->images[img];

      std::vector<int> blocks;
      for (int row : im.rows) blocks.push_back(setup.ctrl_block[row]);
      blocks.push_back(setup.point_block.at(pid));
      const Vec2 uv = frame.keypoints.at(obs.keypoint_index).uv;

      auto evaluator = [state, img,
                        uv](const std::vector<Eigen::VectorXd>& v)
          -> Eigen::VectorXd {
        Eigen::VectorXd r(2);
        try {
          const Pose& T_wb = state->pose_at(img, v);
          r = uv - project(*state->images[img].cam, Vec3(v.back()), T_wb);
        } catch (const Error&) {
          r << 1e4, 1e4;  // flat far-field residual, matching a zero jacobian
        }
        return r;
      };

      auto jacobian = [state, img](const std::vector<Eigen::VectorXd>& v,
                                   int local) -> Eigen::MatrixXd {
        const BaImage& image = state->images[img];
        const int n_ctrl = static_cast<int>(image.rows.size());
        const bool is_point = local == n_ctrl;
        try {
          const Pose T_wb = state->pose_at(img, v);
          const Vec3 X(v.back());
          const Vec3 Xc = image.cam->T_kb * (inverse(T_wb) * X);
          if (Xc.z() <= 1e-6) throw BehindCamera("jacobian past frustum");

          const double iz = 1.0 / Xc.z();
          Eigen::Matrix<double, 2, 3> dpi;
          dpi << image.cam->fx * iz, 0.0, -image.cam->fx * Xc.x() * iz * iz,
              0.0, image.cam->fy * iz, -image.cam->fy * Xc.y() * iz * iz;
          const Mat3 R_kw = image.cam->T_kb.R * T_wb.R.transpose();
          if (is_point) return Eigen::MatrixXd(-dpi * R_kw);

          // Left perturbation of T_wb: d(X in camera)/d eps = R_kw [-I | [X]x].
          Eigen::Matrix<double, 3, 6> dXc;
          dXc.leftCols<3>() = -R_kw;
          dXc.rightCols<3>() = R_kw * skew(X);
          const std::vector<Mat66>& D = state->ctrl_jacobians(img, v);
          return Eigen::MatrixXd(-dpi * dXc * D[local]);
        } catch (const Error&) {
          return Eigen::MatrixXd::Zero(2, is_point ? 3 : 6);
        }
      };

      problem.add_residual(std::move(blocks), 2, std::move(evaluator),
                           Eigen::VectorXd(), loss, -1, std::move(jacobian));
      ++setup.n_observations;
    }
  }
  return setup;
}

}  // namespace detail

struct BaSummary {
  SolveSummary solve;
  int window_size = 0;
  int n_points = 0;
  int n_observations = 0;
};

namespace detail {

// Shared solve/guard/write-back path for the trailing-window and welding
// variants of bundle adjustment.
inline BaSummary solve_ba(WorldMap& world, const RigCalibration& rig,
                          const MappingConfig& cfg,
                          const std::set<int>& free_ids,
                          const std::set<int>& point_source_ids) {
  BaSummary summary;
  summary.window_size = static_cast<int>(free_ids.size());
  if (world.kmfs().size() < 2 || free_ids.empty()) {
    summary.solve.converged = true;
    summary.solve.message = "too few key multi-frames";
    return summary;
  }

  Problem problem;
  const BaSetup setup =
      build_ba_problem(problem, world, rig, cfg, free_ids, point_source_ids);
  summary.n_points = static_cast<int>(setup.point_block.size());
  summary.n_observations = setup.n_observations;

  SolveOptions opts;
  opts.max_iterations = cfg.ba_max_iterations;
  try {
    summary.solve = solve_lm(problem, opts);
  } catch (const Error& e) {
    throw MappingFailure(std::string("bundle adjustment: ") + e.what());
  }

  const double max_rot = cfg.ba_guard_rotation_deg * M_PI / 180.0;
  const int n_kmfs = static_cast<int>(setup.kmf_ids.size());
  for (int k = 0; k < n_kmfs; ++k) {
    if (setup.free_ids.count(setup.kmf_ids[k]) == 0) continue;
    const Pose before = exp_map(world.kmf(setup.kmf_ids[k]).control_pose);
    const Pose after = exp_map(problem.twist_value(setup.ctrl_block[k]));
    const Pose rel = inverse(before) * after;
    if (rel.t.norm() > cfg.ba_guard_translation ||
        rotation_angle(rel) > max_rot) {
      throw MappingFailure("bundle adjustment: control pose " +
                           std::to_string(setup.kmf_ids[k]) +
                           " moved past the excursion guard");
    }
  }

  for (int k = 0; k < n_kmfs; ++k) {
    if (setup.free_ids.count(setup.kmf_ids[k]) == 0) continue;
    world.kmf(setup.kmf_ids[k]).control_pose =
        problem.twist_value(setup.ctrl_block[k]);
  }
  for (const auto& [pid, block] : setup.point_block) {
    world.point(pid).position = problem.point_value(block);
  }
  return summary;
}

}  // namespace detail

/// @brief Windowed bundle adjustment over the latest key multi-frames.
///
/// Jointly refines the last `cfg.window` control poses and every map point
/// they observe, writing results back into the world on success. Throws
/// MappingFailure and leaves the world untouched when the solver fails
/// numerically or any window pose moves past the excursion guard.
inline BaSummary bundle_adjust(WorldMap& world, const RigCalibration& rig,
                               const MappingConfig& cfg = MappingConfig{}) {
  if (cfg.window < 4) {
    throw InvalidInput("bundle_adjust: window below the cubic spline minimum");
  }
  std::vector<int> ids;
  for (const auto& [id, kmf] : world.kmfs()) ids.push_back(id);
  std::set<int> window;
  const int begin = std::max(0, static_cast<int>(ids.size()) - cfg.window);
  for (std::size_t k = begin; k < ids.size(); ++k) window.insert(ids[k]);
  return detail::solve_ba(world, rig, cfg, window, window);
}

/// @brief Welding bundle adjustment after a loop correction: refines the
/// control poses in `free_ids` and every map point the KMFs in
/// `point_source_ids` observe, with all other control poses frozen.
inline BaSummary bundle_adjust_windows(WorldMap& world,
                                       const RigCalibration& rig,
                                       const std::set<int>& free_ids,
                                       const std::set<int>& point_source_ids,
                                       const MappingConfig& cfg =
                                           MappingConfig{}) {
  return detail::solve_ba(world, rig, cfg, free_ids, point_source_ids);
}

/// @brief Triangulate new map points for a freshly adjusted key multi-frame.
///
/// Matches run on the calibrated overlap pairs inside the KMF and on
/// same-camera pairs against up to `cross_kmf_depth` previous KMFs, with the
/// essential-matrix filter applied where at least 8 raw matches exist.
/// Candidates triangulate with poses at each image's own capture time and
/// must reproject within the cull threshold in both views; keypoints that
/// already carry a map point link never spawn duplicates.
inline std::vector<int> create_map_points(WorldMap& world, int new_kmf_id,
                                          const RigCalibration& rig,
                                          const MappingConfig& cfg =
                                              MappingConfig{}) {
  std::vector<int> created;
  if (world.kmfs().size() < 2) return created;
  const SplineTrajectory traj = trajectory_from_kmfs(world);
  KeyMultiFrame& nk = world.kmf(new_kmf_id);

  struct FramePair {
    int kmf_a, frame_a, kmf_b, frame_b;
  };
  std::vector<FramePair> pairs;

  std::set<std::pair<int, int>> intra;
  intra.insert({std::min(rig.init_pair.first, rig.init_pair.second),
                std::max(rig.init_pair.first, rig.init_pair.second)});
  for (const auto& [a, b] : rig.overlap_pairs) {
    intra.insert({std::min(a, b), std::max(a, b)});
  }
  for (const auto& [a, b] : intra) {
    if (a == b) continue;
    const int fa = frame_index(nk.mf, a), fb = frame_index(nk.mf, b);
    if (fa >= 0 && fb >= 0) pairs.push_back({new_kmf_id, fa, new_kmf_id, fb});
  }

  std::vector<int> previous;
  for (auto it = world.kmfs().rbegin(); it != world.kmfs().rend(); ++it) {
    if (it->first >= new_kmf_id) continue;
    previous.push_back(it->first);
    if (static_cast<int>(previous.size()) >= cfg.cross_kmf_depth) break;
  }
  for (int prev_id : previous) {
    const KeyMultiFrame& prev = world.kmf(prev_id);
    for (std::size_t fa = 0; fa < nk.mf.frames.size(); ++fa) {
      const int fb = frame_index(prev.mf, nk.mf.frames[fa].camera_id);
      if (fb >= 0) {
        pairs.push_back({new_kmf_id, static_cast<int>(fa), prev_id, fb});
      }
    }
  }

  const auto frame_time = [&](const KeyMultiFrame& kmf, int f) {
    return cfg.force_sync ? kmf.mf.rep_time : kmf.mf.frames[f].t;
  };
  std::uint64_t pair_seed = cfg.seed;

  for (const FramePair& fp : pairs) {
    KeyMultiFrame& ka = world.kmf(fp.kmf_a);
    KeyMultiFrame& kb = world.kmf(fp.kmf_b);
    const CameraFrame& frame_a = ka.mf.frames[fp.frame_a];
    const CameraFrame& frame_b = kb.mf.frames[fp.frame_b];
    const CameraModel& cam_a = rig.camera(frame_a.camera_id);
    const CameraModel& cam_b = rig.camera(frame_b.camera_id);

    std::vector<Match> matches =
        match_ratio(frame_a.descriptors, frame_b.descriptors, cfg.match_ratio);
    ++pair_seed;
    if (static_cast<int>(matches.size()) >= 8) {
      EssentialFilterParams params;
      params.seed = pair_seed;
      try {
        std::vector<Vec2> uv_a, uv_b;
        for (const Keypoint& kp : frame_a.keypoints) uv_a.push_back(kp.uv);
        for (const Keypoint& kp : frame_b.keypoints) uv_b.push_back(kp.uv);
        matches = filter_essential(matches, uv_a, uv_b, cam_a, cam_b, params);
      } catch (const Error&) {
        // Degenerate pair geometry: fall back to the raw matches.
      }
    }
    if (matches.empty()) continue;

    Pose T_a, T_b;
    try {
      T_a = evaluate_spline(traj, frame_time(ka, fp.frame_a));
      T_b = evaluate_spline(traj, frame_time(kb, fp.frame_b));
    } catch (const Error&) {
      continue;
    }

    for (const Match& m : matches) {
      if (ka.links[fp.frame_a][m.a] >= 0 || kb.links[fp.frame_b][m.b] >= 0) {
        continue;
      }
      const Vec2 uv_a = frame_a.keypoints[m.a].uv;
      const Vec2 uv_b = frame_b.keypoints[m.b].uv;
      Vec3 X;
      try {
        X = triangulate({&cam_a, T_a, uv_a}, {&cam_b, T_b, uv_b});
        if ((uv_a - project(cam_a, X, T_a)).norm() > cfg.cull_reproj_px ||
            (uv_b - project(cam_b, X, T_b)).norm() > cfg.cull_reproj_px) {
          continue;
        }
      } catch (const Error&) {
        continue;  // cheirality, parallel rays or off-frustum reprojection
      }

      const Descriptor desc = medoid_descriptor(
          {frame_a.descriptors[m.a], frame_b.descriptors[m.b]});
      const int pid = world.add_point(X, desc);
      world.link(pid, fp.kmf_a, frame_a.camera_id, m.a);
      world.link(pid, fp.kmf_b, frame_b.camera_id, m.b);
      created.push_back(pid);
    }
  }
  return created;
}

/// @brief Drop map points that sit behind any observing camera or whose mean
/// reprojection error exceeds the threshold. Returns the removed ids.
inline std::vector<int> cull_map_points(WorldMap& world,
                                        const RigCalibration& rig,
                                        const MappingConfig& cfg =
                                            MappingConfig{}) {
  std::vector<int> removed;
  if (world.kmfs().size() < 2) return removed;
  const SplineTrajectory traj = trajectory_from_kmfs(world);

  std::map<std::pair<int, int>, Pose> pose_of;  // (kmf id, camera id)
  const auto image_pose = [&](const KeyMultiFrame& kmf, int camera_id,
                              double t) -> const Pose& {
    auto it = pose_of.find({kmf.mf.id, camera_id});
    if (it == pose_of.end()) {
      it = pose_of.emplace(std::make_pair(kmf.mf.id, camera_id),
                           evaluate_spline(traj, t))
               .first;
    }
    return it->second;
  };

  std::vector<int> ids;
  for (const auto& [pid, point] : world.points()) ids.push_back(pid);

  for (int pid : ids) {
    const MapPoint& point = world.point(pid);
    if (point.observations.empty()) continue;
    bool behind = false;
    double error_sum = 0.0;
    for (const ObsRef& obs : point.observations) {
      const KeyMultiFrame& kmf = world.kmf(obs.kmf_id);
      const int f = frame_index(kmf.mf, obs.camera_id);
      if (f < 0) throw Error("cull_map_points: observation of missing frame");
      const CameraFrame& frame = kmf.mf.frames[f];
      const double t = cfg.force_sync ? kmf.mf.rep_time : frame.t;
      try {
        const Pose& T_wb = image_pose(kmf, obs.camera_id, t);
        error_sum += (frame.keypoints.at(obs.keypoint_index).uv -
                      project(rig.camera(obs.camera_id), point.position, T_wb))
                         .norm();
      } catch (const BehindCamera&) {
        behind = true;
        break;
      }
    }
    const double mean =
        error_sum / static_cast<double>(point.observations.size());
    if (behind || mean > cfg.cull_reproj_px) {
      world.remove_point(pid);
      removed.push_back(pid);
    }
  }
  return removed;
}

}  // namespace ctslam
