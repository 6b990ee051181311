#pragma once

// Orchestration: bootstrap from the first multi-frame, the per-multi-frame
// track -> select -> adjust -> close cycle, sequential and threaded
// schedules, JSON configuration, and run artifacts (trajectory, metrics,
// event log).

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ctslam/camera.hpp"
#include "ctslam/errors.hpp"
#include "ctslam/loop.hpp"
#include "ctslam/mapping.hpp"
#include "ctslam/matching.hpp"
#include "ctslam/metrics.hpp"
#include "ctslam/sim.hpp"
#include "ctslam/tracking.hpp"
#include "ctslam/trajectory.hpp"
#include "ctslam/world.hpp"

namespace ctslam {

enum class Mode { kSlam, kVo };
enum class Schedule { kSequential, kThreaded };

inline Mode mode_from_string(const std::string& s) {
  if (s == "slam") return Mode::kSlam;
  if (s == "vo") return Mode::kVo;
  throw InvalidInput("mode must be slam or vo, got \"" + s + "\"");
}

inline Schedule schedule_from_string(const std::string& s) {
  if (s == "sequential") return Schedule::kSequential;
  if (s == "threaded") return Schedule::kThreaded;
  throw InvalidInput("schedule must be sequential or threaded, got \"" + s +
                     "\"");
}

struct PipelinePaths {
  std::string calibration;
  std::string observations;
  std::string ground_truth;  // optional; enables metrics output
  std::string estimate;      // evaluate subcommand input
  std::string out_dir = ".";
};

struct PipelineConfig {
  TrackingConfig tracking;
  MappingConfig mapping;
  LoopConfig loop;
  Mode mode = Mode::kSlam;  // vo: loop closing off
  Schedule schedule = Schedule::kSequential;
  std::uint64_t seed = 0;
  double group_window = 0.1;   // seconds; multi-frame grouping span
  int init_min_points = 50;    // triangulated points required to bootstrap
  int max_stage_failures = 5;  // successive tracking or adjustment failures
  double sample_rate_hz = 10.0;
  PipelinePaths paths;
};

namespace detail {

template <typename T>
void read_field(const nlohmann::json& j, const char* name, T& value) {
  if (j.contains(name)) j.at(name).get_to(value);
}

inline void read_tracking(const nlohmann::json& j, TrackingConfig& c) {
  read_field(j, "ransac_sample", c.ransac_sample);
  read_field(j, "min_inliers", c.min_inliers);
  read_field(j, "kmf_translation", c.kmf_translation);
  read_field(j, "kmf_rotation_deg", c.kmf_rotation_deg);
  read_field(j, "kmf_reobs_ratio", c.kmf_reobs_ratio);
  read_field(j, "kmf_reobs_min_cams", c.kmf_reobs_min_cams);
  read_field(j, "kmf_staleness", c.kmf_staleness);
  read_field(j, "inlier_threshold_px", c.inlier_threshold_px);
  read_field(j, "match_ratio", c.match_ratio);
  read_field(j, "ransac_max_iterations", c.ransac_max_iterations);
  read_field(j, "ransac_confidence", c.ransac_confidence);
  read_field(j, "huber_delta_px", c.huber_delta_px);
  read_field(j, "use_overlap_pairs", c.use_overlap_pairs);
  read_field(j, "force_sync", c.force_sync);
  read_field(j, "seed", c.seed);
}

inline void read_mapping(const nlohmann::json& j, MappingConfig& c) {
  read_field(j, "window", c.window);
  read_field(j, "cull_reproj_px", c.cull_reproj_px);
  read_field(j, "cross_kmf_depth", c.cross_kmf_depth);
  read_field(j, "ba_guard_translation", c.ba_guard_translation);
  read_field(j, "ba_guard_rotation_deg", c.ba_guard_rotation_deg);
  read_field(j, "match_ratio", c.match_ratio);
  read_field(j, "huber_delta_px", c.huber_delta_px);
  read_field(j, "ba_max_iterations", c.ba_max_iterations);
  read_field(j, "force_sync", c.force_sync);
  read_field(j, "seed", c.seed);
}

inline void read_loop(const nlohmann::json& j, LoopConfig& c) {
  read_field(j, "cooldown", c.cooldown);
  read_field(j, "min_travel", c.min_travel);
  read_field(j, "min_time", c.min_time);
  read_field(j, "min_kmf_gap", c.min_kmf_gap);
  read_field(j, "similarity_floor", c.similarity_floor);
  read_field(j, "top_fraction", c.top_fraction);
  read_field(j, "min_matched_pairs", c.min_matched_pairs);
  read_field(j, "min_essential_inliers", c.min_essential_inliers);
  read_field(j, "min_associations", c.min_associations);
  read_field(j, "min_pose_inliers", c.min_pose_inliers);
  read_field(j, "reproj_threshold_px", c.reproj_threshold_px);
  read_field(j, "match_ratio", c.match_ratio);
  read_field(j, "ransac_iterations", c.ransac_iterations);
  read_field(j, "refine_iterations", c.refine_iterations);
  read_field(j, "huber_delta_px", c.huber_delta_px);
  read_field(j, "pgo_huber_delta", c.pgo_huber_delta);
  read_field(j, "pgo_max_iterations", c.pgo_max_iterations);
  read_field(j, "welding_window", c.welding_window);
  read_field(j, "fuse_distance", c.fuse_distance);
  read_field(j, "seed", c.seed);
}

}  // namespace detail

/// @brief Build a PipelineConfig from its JSON mirror. Absent fields keep
/// their defaults; the top-level seed also seeds every module unless the
/// module sets its own.
inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j);

namespace detail {

inline PipelineConfig config_from_json_unchecked(const nlohmann::json& j) {
  PipelineConfig cfg;
  detail::read_field(j, "seed", cfg.seed);
  cfg.tracking.seed = cfg.seed;
  cfg.mapping.seed = cfg.seed;
  cfg.loop.seed = cfg.seed;

  std::string mode = "slam", schedule = "sequential";
  detail::read_field(j, "mode", mode);
  detail::read_field(j, "schedule", schedule);
  cfg.mode = mode_from_string(mode);
  cfg.schedule = schedule_from_string(schedule);

  detail::read_field(j, "group_window", cfg.group_window);
  detail::read_field(j, "init_min_points", cfg.init_min_points);
  detail::read_field(j, "max_stage_failures", cfg.max_stage_failures);
  detail::read_field(j, "sample_rate_hz", cfg.sample_rate_hz);

  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    detail::read_field(p, "calibration", cfg.paths.calibration);
    detail::read_field(p, "observations", cfg.paths.observations);
    detail::read_field(p, "ground_truth", cfg.paths.ground_truth);
    detail::read_field(p, "estimate", cfg.paths.estimate);
    detail::read_field(p, "out_dir", cfg.paths.out_dir);
  }
  if (j.contains("tracking")) detail::read_tracking(j.at("tracking"), cfg.tracking);
  if (j.contains("mapping")) detail::read_mapping(j.at("mapping"), cfg.mapping);
  if (j.contains("loop")) detail::read_loop(j.at("loop"), cfg.loop);

  if (cfg.group_window <= 0.0) throw InvalidInput("group_window must be > 0");
  if (cfg.sample_rate_hz <= 0.0) throw InvalidInput("sample_rate_hz must be > 0");
  return cfg;
}

}  // namespace detail

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  try {
    return detail::config_from_json_unchecked(j);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("config: ") + e.what());
  }
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot read " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInput(std::string("config: ") + e.what());
  }
  return pipeline_config_from_json(j);
}

/// @brief Build a simulator scenario from the "simulate" section of the
/// config JSON. The rig is supplied by the caller. `init_yaw` rotates the
/// whole path in place; closed circuits need a non-axis-aligned heading so
/// no spline knot sits at a rotation angle of exactly pi, where the rotation
/// log is undefined.
inline SimScenario sim_scenario_from_json(const nlohmann::json& j,
                                          RigCalibration rig) {
  SimScenario s;
  s.rig = std::move(rig);

  std::string kind = "straight";
  double speed = 5.0, amplitude = 2.0, frequency = 0.1;
  double side = 100.0, corner_radius = 5.0, init_yaw = 0.0;
  detail::read_field(j, "trajectory", kind);
  detail::read_field(j, "speed", speed);
  detail::read_field(j, "amplitude", amplitude);
  detail::read_field(j, "frequency", frequency);
  detail::read_field(j, "side", side);
  detail::read_field(j, "corner_radius", corner_radius);
  detail::read_field(j, "init_yaw", init_yaw);

  GtTrajectory base;
  if (kind == "straight") {
    base = straight_trajectory(speed);
  } else if (kind == "sine") {
    base = sine_swept_trajectory(speed, amplitude, frequency);
  } else if (kind == "square") {
    base = square_loop_trajectory(side, speed, corner_radius);
  } else if (kind == "screw") {
    Twist rate = Twist::Zero();
    if (j.contains("rate")) {
      const auto r = j.at("rate").get<std::vector<double>>();
      if (r.size() != 6) throw InvalidInput("screw rate needs 6 entries");
      for (int d = 0; d < 6; ++d) rate[d] = r[d];
    }
    base = screw_trajectory(Pose::Identity(), rate);
  } else {
    throw InvalidInput("unknown trajectory kind \"" + kind + "\"");
  }
  if (init_yaw != 0.0) {
    Pose tilt = Pose::Identity();
    tilt.R = Eigen::AngleAxisd(init_yaw, Vec3::UnitZ()).toRotationMatrix();
    GtTrajectory inner = std::move(base);
    base = [tilt, inner](double t) { return tilt * inner(t); };
  }
  s.trajectory = std::move(base);

  detail::read_field(j, "t_start", s.t_start);
  detail::read_field(j, "duration", s.duration);
  detail::read_field(j, "n_landmarks", s.n_landmarks);
  detail::read_field(j, "depth_min", s.depth_min);
  detail::read_field(j, "depth_max", s.depth_max);
  detail::read_field(j, "noise_px", s.noise_px);
  detail::read_field(j, "outlier_fraction", s.outlier_fraction);
  detail::read_field(j, "bit_flip_p", s.bit_flip_p);
  detail::read_field(j, "gt_rate", s.gt_rate);
  detail::read_field(j, "seed", s.seed);
  detail::read_field(j, "anchor_pad", s.anchor_pad);
  return s;
}

/// @brief Thread-safe newline-delimited JSON event log:
/// {"t": …, "stage": …, "event": …, "payload": …} per line. `t` is the
/// stream timestamp of the work item, not wall clock, so logs of a
/// deterministic run are reproducible.
class RunLogger {
 public:
  RunLogger() = default;  // disabled: events are dropped

  explicit RunLogger(const std::string& path)
      : out_(std::make_unique<std::ofstream>(path)) {
    if (!*out_) throw InvalidInput("cannot write " + path);
  }

  void log(double t, const std::string& stage, const std::string& event,
           nlohmann::json payload = nlohmann::json::object()) {
    if (!out_) return;
    nlohmann::ordered_json line;
    line["t"] = t;
    line["stage"] = stage;
    line["event"] = event;
    line["payload"] = std::move(payload);
    const std::lock_guard<std::mutex> hold(mu_);
    *out_ << line.dump() << "\n";
  }

  void flush() {
    if (!out_) return;
    const std::lock_guard<std::mutex> hold(mu_);
    out_->flush();
  }

 private:
  std::unique_ptr<std::ofstream> out_;
  std::mutex mu_;
};

/// @brief Bootstrap the world from the first multi-frame.
///
/// The representative time becomes the init pair's firing time (mean of the
/// two capture times, not the multi-frame median), the first control pose is
/// the world origin, and the map is seeded with points triangulated from the
/// init pair, treating the body as static across the pair's shutter stagger.
/// Throws InitFailure when an init-pair image is missing or fewer than
/// `min_points` candidates survive triangulation.
///
/// Returns the id of the seeded key multi-frame.
inline int initialize(WorldMap& world, MultiFrame mf,
                      const RigCalibration& rig, const TrackingConfig& tcfg,
                      const MappingConfig& mcfg, int min_points) {
  if (!world.kmfs().empty()) throw InvalidInput("initialize: world not empty");
  const int f_a = frame_index(mf, rig.init_pair.first);
  const int f_b = frame_index(mf, rig.init_pair.second);
  if (f_a < 0 || f_b < 0) {
    throw InitFailure("first multi-frame is missing an init-pair image");
  }
  const CameraFrame& frame_a = mf.frames[f_a];
  const CameraFrame& frame_b = mf.frames[f_b];
  const CameraModel& cam_a = rig.camera(rig.init_pair.first);
  const CameraModel& cam_b = rig.camera(rig.init_pair.second);

  mf.rep_time = 0.5 * (frame_a.t + frame_b.t);

  std::vector<Match> matches =
      match_ratio(frame_a.descriptors, frame_b.descriptors, tcfg.match_ratio);
  if (static_cast<int>(matches.size()) >= 8) {
    EssentialFilterParams params;
    params.seed = tcfg.seed;
    try {
      matches = filter_essential(matches, detail::keypoint_positions(frame_a),
                                 detail::keypoint_positions(frame_b), cam_a,
                                 cam_b, params);
    } catch (const Error&) {
      // Degenerate pair geometry: fall back to the raw matches.
    }
  }

  struct Candidate {
    Vec3 X;
    Descriptor desc;
    int a, b;
  };
  std::vector<Candidate> kept;
  const Pose origin = Pose::Identity();
  for (const Match& m : matches) {
    const Vec2 uv_a = frame_a.keypoints[m.a].uv;
    const Vec2 uv_b = frame_b.keypoints[m.b].uv;
    try {
      const Vec3 X = triangulate({&cam_a, origin, uv_a}, {&cam_b, origin, uv_b});
      if ((uv_a - project(cam_a, X, origin)).norm() > mcfg.cull_reproj_px ||
          (uv_b - project(cam_b, X, origin)).norm() > mcfg.cull_reproj_px) {
        continue;
      }
      kept.push_back({X,
                      medoid_descriptor({frame_a.descriptors[m.a],
                                         frame_b.descriptors[m.b]}),
                      m.a, m.b});
    } catch (const Error&) {
      continue;  // cheirality, parallel rays or off-frustum reprojection
    }
  }
  if (static_cast<int>(kept.size()) < min_points) {
    throw InitFailure("triangulated " + std::to_string(kept.size()) +
                      " init points, need " + std::to_string(min_points));
  }

  KeyMultiFrame kmf;
  kmf.mf = std::move(mf);
  kmf.control_pose = Twist::Zero();
  kmf.init_links();
  const int id = kmf.mf.id;
  world.add_kmf(std::move(kmf));
  for (const Candidate& c : kept) {
    const int pid = world.add_point(c.X, c.desc);
    world.link(pid, id, rig.init_pair.first, c.a);
    world.link(pid, id, rig.init_pair.second, c.b);
  }
  verify_links(world);
  return id;
}

enum class RunStatus { kCompleted, kAborted };

struct RunReport {
  RunStatus status = RunStatus::kCompleted;
  std::string abort_reason;  // tracking | mapping | init
  int multiframes = 0;
  int kmfs = 0;
  int corrections = 0;
  int tracking_failures = 0;
  std::optional<MetricsReport> metrics;
  std::string trajectory_path;
  std::string metrics_path;
  std::string log_path;
};

namespace detail {

// Single-consumer work queue for the threaded schedule's KMF hand-off.
class KmfQueue {
 public:
  void push(int id) {
    {
      const std::lock_guard<std::mutex> hold(mu_);
      q_.push_back(id);
    }
    cv_.notify_one();
  }

  void close() {
    {
      const std::lock_guard<std::mutex> hold(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  std::optional<int> pop() {
    std::unique_lock<std::mutex> hold(mu_);
    cv_.wait(hold, [&] { return closed_ || !q_.empty(); });
    if (q_.empty()) return std::nullopt;
    const int id = q_.front();
    q_.pop_front();
    return id;
  }

 private:
  std::deque<int> q_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool closed_ = false;
};

// The three stages over shared world state. Tracking runs on the caller's
// thread; in the threaded schedule mapping and loop closing consume KMF ids
// from queues, with a single reader-writer lock making every stage's writes
// exclusive while reads may overlap.
class Engine {
 public:
  Engine(const PipelineConfig& cfg, const RigCalibration& rig,
         RunLogger& logger)
      : cfg_(cfg), rig_(rig), log_(logger) {}

  // Tracking stage for one multi-frame. Returns the id of a freshly inserted
  // key multi-frame, or -1.
  int process_multiframe(MultiFrame mf) {
    if (aborted()) return -1;
    ++multiframes_;
    if (!initialized_) return bootstrap(std::move(mf));

    TrackResult result;
    KmfDecision decision;
    {
      const std::shared_lock<std::shared_mutex> hold(world_mu_);
      const KeyMultiFrame& ref = world_.kmf(ref_id_);
      try {
        Twist initial;
        if (prev1_.motion && prev2_.motion) {
          initial = predict_initial(prev2_, prev1_, mf.rep_time);
        } else {
          initial = log_map(evaluate_spline(traj_, mf.rep_time));
        }
        result = track(mf, ref, world_, rig_, traj_, initial, cfg_.tracking);
        mf.motion = result.motion;
        decision = select_kmf(mf, ref, traj_, result.inliers, world_,
                              staleness_ + 1, cfg_.tracking);
      } catch (const Error& e) {
        ++tracking_failures_;
        ++total_tracking_failures_;
        log_.log(mf.rep_time, "tracking", "failure",
                 {{"multiframe", mf.id}, {"error", e.what()}});
        if (tracking_failures_ >= cfg_.max_stage_failures) {
          abort_run("tracking", e.what());
        }
        return -1;
      }
    }
    tracking_failures_ = 0;
    ++staleness_;
    log_.log(mf.rep_time, "tracking", "tracked",
             {{"multiframe", mf.id},
              {"inliers", static_cast<int>(result.inliers.size())},
              {"ransac_iterations", result.ransac_iterations}});
    prev2_ = std::move(prev1_);
    prev1_ = mf;
    if (!decision.insert) return -1;

    const std::unique_lock<std::shared_mutex> hold(world_mu_);
    KeyMultiFrame kmf;
    kmf.mf = std::move(mf);
    kmf.control_pose = result.motion.pose_param;
    kmf.init_links();
    const int id = kmf.mf.id;
    world_.add_kmf(std::move(kmf));
    for (const TrackedPoint& p : result.inliers) {
      if (world_.has_point(p.point_id)) {
        world_.link(p.point_id, id, p.camera_id, p.keypoint_index);
      }
    }
    rebuild_traj();
    ref_id_ = id;
    staleness_ = 0;
    ++kmfs_;
    log_.log(prev1_.rep_time, "tracking", "kmf",
             {{"kmf", id}, {"reason", decision.reason}});
    return id;
  }

  // Mapping stage: windowed bundle adjustment, then point creation/culling.
  void mapping_stage(int kmf_id) {
    if (aborted()) return;
    const std::unique_lock<std::shared_mutex> hold(world_mu_);
    const double t = world_.kmf(kmf_id).mf.rep_time;
    if (world_.kmfs().size() >= 2) {
      try {
        const BaSummary ba = bundle_adjust(world_, rig_, cfg_.mapping);
        ba_failures_ = 0;
        log_.log(t, "mapping", "adjusted",
                 {{"kmf", kmf_id},
                  {"iterations", ba.solve.iterations},
                  {"initial_cost", ba.solve.initial_cost},
                  {"final_cost", ba.solve.final_cost},
                  {"points", ba.n_points},
                  {"observations", ba.n_observations}});
      } catch (const Error& e) {
        ++ba_failures_;
        log_.log(t, "mapping", "failure",
                 {{"kmf", kmf_id}, {"error", e.what()}});
        if (ba_failures_ >= cfg_.max_stage_failures) {
          abort_run("mapping", e.what());
          return;
        }
      }
    }
    try {
      const auto created = create_map_points(world_, kmf_id, rig_, cfg_.mapping);
      const auto culled = cull_map_points(world_, rig_, cfg_.mapping);
      log_.log(t, "mapping", "extended",
               {{"kmf", kmf_id},
                {"created", static_cast<int>(created.size())},
                {"culled", static_cast<int>(culled.size())}});
    } catch (const Error& e) {
      log_.log(t, "mapping", "extend_failure",
               {{"kmf", kmf_id}, {"error", e.what()}});
    }
    rebuild_traj();
    verify_links(world_);
  }

  // Loop-closing stage: place scoring, detection, correction.
  void loop_stage(int kmf_id) {
    if (aborted() || cfg_.mode != Mode::kSlam) return;
    std::optional<LoopConstraint> constraint;
    double t = 0.0;
    {
      const std::shared_lock<std::shared_mutex> hold(world_mu_);
      t = world_.kmf(kmf_id).mf.rep_time;
      scorer_.add(kmf_id, world_.kmf(kmf_id));
      constraint = detect_loop(world_, rig_, kmf_id, scorer_, loop_state_,
                               cfg_.loop);
    }
    if (!constraint) return;
    log_.log(t, "loop", "detected",
             {{"query", constraint->query_id},
              {"candidate", constraint->candidate_id},
              {"scenario", constraint->scenario},
              {"pairs", static_cast<int>(constraint->pairs.size())},
              {"inliers", constraint->total_inliers}});
    const std::unique_lock<std::shared_mutex> hold(world_mu_);
    try {
      const CorrectionSummary s = correct_loop(world_, rig_, *constraint,
                                               loop_state_, cfg_.loop,
                                               cfg_.mapping);
      rebuild_traj();
      ++corrections_;
      log_.log(t, "loop", "corrected",
               {{"query", constraint->query_id},
                {"candidate", constraint->candidate_id},
                {"fused_points", s.fused_points},
                {"query_shift", s.query_shift},
                {"pgo_final_cost", s.pgo.final_cost}});
      verify_links(world_);
    } catch (const Error& e) {
      log_.log(t, "loop", "rejected",
               {{"query", constraint->query_id}, {"error", e.what()}});
    }
  }

  bool aborted() const { return aborted_.load(); }

  void abort_run(const std::string& stage, const std::string& detail) {
    bool expected = false;
    if (aborted_.compare_exchange_strong(expected, true)) {
      abort_reason_ = stage;
      log_.log(0.0, "pipeline", "aborted",
               {{"stage", stage}, {"error", detail}});
    }
  }

  const std::string& abort_reason() const { return abort_reason_; }
  const WorldMap& world() const { return world_; }
  const SplineTrajectory& trajectory() const { return traj_; }
  int multiframes() const { return multiframes_; }
  int kmfs() const { return kmfs_; }
  int corrections() const { return corrections_; }
  int total_tracking_failures() const { return total_tracking_failures_; }
  bool initialized() const { return initialized_; }

 private:
  // Spline evaluation needs two controls; until the second KMF lands, pad a
  // duplicate knot so the bootstrap segment reads as a constant pose.
  void rebuild_traj() {
    traj_ = trajectory_from_kmfs(world_);
    if (traj_.size() == 1) {
      traj_.append(traj_.rep_times.front() + cfg_.group_window,
                   traj_.control_poses.front());
    }
  }

  int bootstrap(MultiFrame mf) {
    const std::unique_lock<std::shared_mutex> hold(world_mu_);
    const double t = mf.rep_time;
    try {
      const int id = initialize(world_, std::move(mf), rig_, cfg_.tracking,
                                cfg_.mapping, cfg_.init_min_points);
      rebuild_traj();
      initialized_ = true;
      ref_id_ = id;
      ++kmfs_;
      log_.log(world_.kmf(id).mf.rep_time, "tracking", "initialized",
               {{"kmf", id},
                {"points", static_cast<int>(world_.points().size())}});
      return id;
    } catch (const Error& e) {
      log_.log(t, "tracking", "init_failure", {{"error", e.what()}});
      abort_run("init", e.what());
      return -1;
    }
  }

  const PipelineConfig& cfg_;
  const RigCalibration& rig_;
  RunLogger& log_;

  std::shared_mutex world_mu_;
  WorldMap world_;
  SplineTrajectory traj_;
  BucketBowScorer scorer_;
  LoopState loop_state_;

  bool initialized_ = false;
  int ref_id_ = -1;
  int staleness_ = 0;
  MultiFrame prev1_, prev2_;
  int tracking_failures_ = 0;
  int ba_failures_ = 0;

  std::atomic<bool> aborted_{false};
  std::string abort_reason_;
  int multiframes_ = 0;
  int kmfs_ = 0;
  int corrections_ = 0;
  int total_tracking_failures_ = 0;
};

}  // namespace detail

/// @brief Sample the spline at a fixed rate across [t0, t1].
inline std::vector<TimedPose> sample_trajectory(const SplineTrajectory& traj,
                                                double rate_hz, double t0,
                                                double t1) {
  std::vector<TimedPose> out;
  if (traj.size() < 2 || t1 < t0) return out;
  const double step = 1.0 / rate_hz;
  for (double t = t0; t <= t1 + 1e-9; t += step) {
    const double tc = std::min(t, t1);
    out.push_back({tc, evaluate_spline(traj, tc)});
  }
  return out;
}

/// @brief Evaluate an estimate against the reference, tolerating degenerate
/// estimates: fewer than two samples scores as infinite error over the whole
/// reference span, so an aborted run is penalized rather than crashing the
/// report.
inline MetricsReport evaluate_or_pad(const std::vector<TimedPose>& est,
                                     const SampledTrajectory& gt) {
  if (est.size() >= 2) {
    return evaluate_trajectories(SampledTrajectory(est), gt);
  }
  MetricsReport report;
  const double inf = std::numeric_limits<double>::infinity();
  for (double t = gt.t_begin(); t <= gt.t_end() + 1e-9; t += 0.1) {
    report.ate_samples.push_back({t, inf});
  }
  for (double t = gt.t_begin(); t + 1.0 <= gt.t_end() + 1e-9; t += 1.0) {
    report.rpe_samples.push_back({t, inf, inf});
  }
  return report;
}

/// @brief Run the full engine over pre-loaded inputs. Artifacts go to
/// `cfg.paths.out_dir`: trajectory.tum, run_log.ndjson, and metrics.csv when
/// a ground-truth trajectory is supplied.
inline RunReport run(const PipelineConfig& cfg, const RigCalibration& rig,
                     const std::vector<CameraFrame>& frames,
                     const SampledTrajectory* gt = nullptr) {
  (void)rig.camera(rig.init_pair.first);  // throws when absent
  (void)rig.camera(rig.init_pair.second);
  namespace fs = std::filesystem;
  fs::create_directories(cfg.paths.out_dir);
  const std::string traj_path =
      (fs::path(cfg.paths.out_dir) / "trajectory.tum").string();
  const std::string log_path =
      (fs::path(cfg.paths.out_dir) / "run_log.ndjson").string();
  const std::string metrics_path =
      (fs::path(cfg.paths.out_dir) / "metrics.csv").string();

  RunLogger logger(log_path);
  logger.log(0.0, "pipeline", "start",
             {{"mode", cfg.mode == Mode::kSlam ? "slam" : "vo"},
              {"schedule",
               cfg.schedule == Schedule::kSequential ? "sequential"
                                                     : "threaded"},
              {"seed", cfg.seed},
              {"frames", static_cast<int>(frames.size())}});

  const std::vector<MultiFrame> mfs =
      group_multiframes(frames, cfg.group_window);

  detail::Engine engine(cfg, rig, logger);
  if (cfg.schedule == Schedule::kSequential) {
    for (const MultiFrame& mf : mfs) {
      const int id = engine.process_multiframe(mf);
      if (id >= 0) {
        engine.mapping_stage(id);
        engine.loop_stage(id);
      }
      if (engine.aborted()) break;
    }
  } else {
    detail::KmfQueue map_q, loop_q;
    std::thread mapper([&] {
      while (const auto id = map_q.pop()) {
        engine.mapping_stage(*id);
        loop_q.push(*id);
      }
      loop_q.close();
    });
    std::thread looper([&] {
      while (const auto id = loop_q.pop()) engine.loop_stage(*id);
    });
    for (const MultiFrame& mf : mfs) {
      const int id = engine.process_multiframe(mf);
      if (id >= 0) map_q.push(id);
      if (engine.aborted()) break;
    }
    map_q.close();
    mapper.join();
    looper.join();
  }

  RunReport report;
  report.status =
      engine.aborted() ? RunStatus::kAborted : RunStatus::kCompleted;
  report.abort_reason = engine.abort_reason();
  report.multiframes = engine.multiframes();
  report.kmfs = engine.kmfs();
  report.corrections = engine.corrections();
  report.tracking_failures = engine.total_tracking_failures();
  report.trajectory_path = traj_path;
  report.log_path = log_path;

  std::vector<TimedPose> samples;
  if (!engine.world().kmfs().empty()) {
    const auto& kmfs = engine.world().kmfs();
    samples = sample_trajectory(engine.trajectory(), cfg.sample_rate_hz,
                                kmfs.begin()->second.mf.rep_time,
                                kmfs.rbegin()->second.mf.rep_time);
  }
  save_tum(traj_path, samples);

  if (gt != nullptr && !gt->empty()) {
    MetricsReport metrics = evaluate_or_pad(samples, *gt);
    write_metrics_csv(metrics_path, metrics);
    report.metrics = std::move(metrics);
    report.metrics_path = metrics_path;
  }

  logger.log(0.0, "pipeline",
             report.status == RunStatus::kCompleted ? "completed" : "aborted",
             {{"multiframes", report.multiframes},
              {"kmfs", report.kmfs},
              {"corrections", report.corrections}});
  logger.flush();
  return report;
}

/// @brief Load inputs from `cfg.paths` and run.
inline RunReport run(const PipelineConfig& cfg) {
  const RigCalibration rig = load_calibration(cfg.paths.calibration);
  const std::vector<CameraFrame> frames =
      load_observation_stream(cfg.paths.observations);
  if (cfg.paths.ground_truth.empty()) {
    return run(cfg, rig, frames);
  }
  const SampledTrajectory gt = load_tum(cfg.paths.ground_truth);
  return run(cfg, rig, frames, &gt);
}

}  // namespace ctslam
