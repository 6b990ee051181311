#pragma once
// Loop detection and continuous-time loop correction. Detection walks a
// cascade of gates: traveled distance, appearance similarity against a
// bag-of-buckets scorer, and a multi-camera geometric verification that
// enumerates ring-rotation scenarios. Correction runs a pose graph
// optimization over the spline control poses, drags map points along by the
// median of their per-observation pose corrections, fuses re-triangulated
// duplicates, and welds the seam with a frozen-candidate bundle adjustment.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ctslam/camera.hpp"
#include "ctslam/errors.hpp"
#include "ctslam/lie.hpp"
#include "ctslam/mapping.hpp"
#include "ctslam/matching.hpp"
#include "ctslam/metrics.hpp"
#include "ctslam/nlls.hpp"
#include "ctslam/trajectory.hpp"
#include "ctslam/world.hpp"

namespace ctslam {

struct LoopConfig {
  int cooldown = 30;               // KMFs between accepted corrections
  double min_travel = 30.0;        // meters traveled since the candidate
  double min_time = 5.0;           // seconds elapsed since the candidate
  int min_kmf_gap = 30;            // KMFs between candidate and query
  double similarity_floor = 0.01;  // absolute appearance-score floor
  double top_fraction = 0.9;       // of the best candidate score
  int min_matched_pairs = 2;       // verified camera pairs per scenario
  int min_essential_inliers = 20;  // per camera pair
  int min_associations = 20;       // linked 3D-3D pairs per camera pair
  int min_pose_inliers = 20;       // reprojection inliers per camera pair
  double reproj_threshold_px = 2.0;
  double match_ratio = 0.7;
  int ransac_iterations = 200;     // rigid-alignment hypotheses per pair
  int refine_iterations = 20;      // LM steps on the per-pair pose
  double huber_delta_px = 1.0;     // per-pair reprojection refinement
  double pgo_huber_delta = 0.2;    // twist-norm loss in the pose graph
  int pgo_max_iterations = 30;
  int welding_window = 11;         // KMFs per welding window
  double fuse_distance = 1.0;      // meters; duplicate fusing gate
  std::uint64_t seed = 0;
};

/// @brief Appearance model scoring key multi-frame similarity in [0, 1].
///
/// Implementations accumulate KMFs as they are created and answer pairwise
/// queries later; both sides of a query must have been added.
class PlaceScorer {
 public:
  virtual ~PlaceScorer() = default;
  virtual void add(int kmf_id, const KeyMultiFrame& kmf) = 0;
  virtual double score(int kmf_a, int kmf_b) const = 0;
};

/// @brief TF-IDF bag over random-projection buckets of binary descriptors.
///
/// Each descriptor hashes to a small bucket code whose bits are parities of
/// the descriptor masked by fixed random projections. A KMF's bag pools the
/// codes from all of its images; similarity is the cosine of the TF-IDF
/// weighted histograms. Self-contained stand-in for a trained vocabulary:
/// identical descriptors collide, unrelated ones spread uniformly.
class BucketBowScorer final : public PlaceScorer {
 public:
  explicit BucketBowScorer(int bits = 12) : bits_(bits) {
    std::mt19937_64 rng(0x2545f4914f6cdd1dULL);  // fixed projection basis
    masks_.resize(bits_);
    for (auto& mask : masks_) {
      for (auto& word : mask) word = rng();
    }
  }

  void add(int kmf_id, const KeyMultiFrame& kmf) override {
    if (bags_.count(kmf_id) > 0) {
      throw InvalidInput("place scorer: KMF added twice");
    }
    std::map<int, int>& bag = bags_[kmf_id];
    for (const auto& frame : kmf.mf.frames) {
      for (const auto& d : frame.descriptors) ++bag[bucket(d)];
    }
    for (const auto& [b, n] : bag) ++doc_count_[b];
    ++n_docs_;
  }

  double score(int kmf_a, int kmf_b) const override {
    const auto& a = bag_of(kmf_a);
    const auto& b = bag_of(kmf_b);
    double dot = 0.0, norm_a = 0.0, norm_b = 0.0;
    for (const auto& [bucket_id, count] : a) {
      const double w = count * idf(bucket_id);
      norm_a += w * w;
      const auto it = b.find(bucket_id);
      if (it != b.end()) dot += w * it->second * idf(bucket_id);
    }
    for (const auto& [bucket_id, count] : b) {
      const double w = count * idf(bucket_id);
      norm_b += w * w;
    }
    if (norm_a <= 0.0 || norm_b <= 0.0) return 0.0;
    return dot / std::sqrt(norm_a * norm_b);
  }

 private:
  int bucket(const Descriptor& d) const {
    int code = 0;
    for (int k = 0; k < bits_; ++k) {
      int parity = 0;
      for (std::size_t w = 0; w < d.size(); ++w) {
        parity ^= std::popcount(d[w] & masks_[k][w]) & 1;
      }
      code |= parity << k;
    }
    return code;
  }

  const std::map<int, int>& bag_of(int kmf_id) const {
    const auto it = bags_.find(kmf_id);
    if (it == bags_.end()) {
      throw IndexOutOfRange("place scorer: KMF was never added");
    }
    return it->second;
  }

  double idf(int bucket_id) const {
    const auto it = doc_count_.find(bucket_id);
    const int df = it == doc_count_.end() ? 0 : it->second;
    return std::log((1.0 + n_docs_) / (1.0 + df)) + 1.0;
  }

  int bits_;
  std::vector<Descriptor> masks_;
  std::map<int, std::map<int, int>> bags_;
  std::map<int, int> doc_count_;
  int n_docs_ = 0;
};

namespace detail {

// Number of KMFs with id in (from_id, to_id].
inline int kmf_gap(const WorldMap& world, int from_id, int to_id) {
  int gap = 0;
  for (auto it = world.kmfs().upper_bound(from_id);
       it != world.kmfs().end() && it->first <= to_id; ++it) {
    ++gap;
  }
  return gap;
}

}  // namespace detail

/// @brief Distance, time, and index gates between a query and a candidate.
///
/// Path length integrates the estimated trajectory between the two
/// representative times, so loitering on the spot never qualifies.
inline bool odometry_check(const WorldMap& world, const SplineTrajectory& traj,
                           int query_id, int candidate_id,
                           const LoopConfig& cfg) {
  const double t0 = world.kmf(candidate_id).mf.rep_time;
  const double t1 = world.kmf(query_id).mf.rep_time;
  const int gap = detail::kmf_gap(world, candidate_id, query_id);
  if (gap < cfg.min_kmf_gap) return false;
  if (!(t1 - t0 > cfg.min_time)) return false;

  const int steps = std::max(gap, 1) * 20;
  double traveled = 0.0;
  Vec3 prev = evaluate_spline(traj, t0).t;
  for (int s = 1; s <= steps; ++s) {
    const Vec3 p = evaluate_spline(traj, t0 + (t1 - t0) * s / steps).t;
    traveled += (p - prev).norm();
    prev = p;
  }
  return traveled > cfg.min_travel;
}

/// @brief Appearance gate: keep candidates above max(floor, m, 0.9 t).
///
/// m is the minimum score between the query and its local-window neighbors
/// and t the top candidate score: a true loop must look at least as similar
/// as the least-similar neighbor and nearly as good as the best candidate.
/// Survivors come back strongest first.
inline std::vector<int> similarity_check(int query_id,
                                         const std::vector<int>& neighbor_ids,
                                         const std::vector<int>& candidate_ids,
                                         const PlaceScorer& scorer,
                                         const LoopConfig& cfg) {
  double m = 0.0;
  bool first = true;
  for (int id : neighbor_ids) {
    const double s = scorer.score(query_id, id);
    m = first ? s : std::min(m, s);
    first = false;
  }
  std::vector<std::pair<double, int>> scored;
  double top = 0.0;
  for (int id : candidate_ids) {
    const double s = scorer.score(query_id, id);
    top = std::max(top, s);
    scored.emplace_back(s, id);
  }
  const double bar =
      std::max({cfg.similarity_floor, m, cfg.top_fraction * top});
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<int> survivors;
  for (const auto& [s, id] : scored) {
    if (s > bar) survivors.push_back(id);
  }
  return survivors;
}

// One verified camera pair. T_ql maps body coordinates at the candidate
// frame time t_l to body coordinates at the query frame time t_q.
struct LoopPair {
  int camera_l = -1;
  int camera_q = -1;
  Pose T_ql;
  double t_l = 0.0;
  double t_q = 0.0;
  int inliers = 0;
};

struct LoopConstraint {
  int query_id = -1;
  int candidate_id = -1;
  int scenario = -1;  // ring rotation: candidate j sees query (j+s) mod M
  std::vector<LoopPair> pairs;
  int total_inliers = 0;
};

namespace detail {

struct PairAssociation {
  Vec3 X_l = Vec3::Zero();
  Vec3 X_q = Vec3::Zero();
  Vec2 uv_l = Vec2::Zero();
  Vec2 uv_q = Vec2::Zero();
};

// Max of the two reprojection errors of one associated pair under a relative
// pose hypothesis; infinite when either projection falls behind a camera.
inline double pair_reproj_error(const CameraModel& cam_q,
                                const CameraModel& cam_l, const Pose& T_rel,
                                const Pose& T_l_inv, const Pose& T_q_inv,
                                const PairAssociation& a) {
  try {
    const Vec3 in_q = T_rel * (T_l_inv * a.X_l);
    const Vec3 in_l = inverse(T_rel) * (T_q_inv * a.X_q);
    const double e_q = (project(cam_q, in_q, Pose{}) - a.uv_q).norm();
    const double e_l = (project(cam_l, in_l, Pose{}) - a.uv_l).norm();
    return std::max(e_q, e_l);
  } catch (const Error&) {
    return std::numeric_limits<double>::infinity();
  }
}

// Reprojection LM on a single relative-pose block over the inlier set.
inline Pose refine_pair_pose(const CameraModel& cam_q, const CameraModel& cam_l,
                             const Pose& T_l_inv, const Pose& T_q_inv,
                             const std::vector<PairAssociation>& inliers,
                             const Pose& initial, const LoopConfig& cfg) {
  Problem problem;
  const int block = problem.add_twist_block(log_map(initial));
  const RobustLoss loss = RobustLoss::Huber(cfg.huber_delta_px);
  for (const auto& a : inliers) {
    const Vec3 X_l = T_l_inv * a.X_l;
    const Vec3 X_q = T_q_inv * a.X_q;
    const Vec2 uv_q = a.uv_q;
    const Vec2 uv_l = a.uv_l;
    problem.add_residual(
        {block}, 2,
        [&cam_q, X_l, uv_q](const std::vector<Eigen::VectorXd>& v)
            -> Eigen::VectorXd {
          try {
            const Pose T_rel = exp_map(Twist(v[0]));
            return Vec2(uv_q - project(cam_q, T_rel * X_l, Pose{}));
          } catch (const Error&) {
            return Vec2(1e4, 1e4);
          }
        },
        Eigen::Vector2d::Ones(), loss);
    problem.add_residual(
        {block}, 2,
        [&cam_l, X_q, uv_l](const std::vector<Eigen::VectorXd>& v)
            -> Eigen::VectorXd {
          try {
            const Pose T_rel = exp_map(Twist(v[0]));
            return Vec2(uv_l - project(cam_l, inverse(T_rel) * X_q, Pose{}));
          } catch (const Error&) {
            return Vec2(1e4, 1e4);
          }
        },
        Eigen::Vector2d::Ones(), loss);
  }
  SolveOptions options;
  options.max_iterations = cfg.refine_iterations;
  try {
    solve_lm(problem, options);
  } catch (const Error&) {
    return initial;
  }
  return exp_map(problem.twist_value(block));
}

// Full verification of one candidate/query camera pair: descriptor matching,
// essential filtering, linked 3D-3D association, RANSAC rigid alignment on
// map-point pairs, reprojection refinement, and a final inlier recount.
inline std::optional<LoopPair> try_match_pair(
    const WorldMap& world, const RigCalibration& rig,
    const SplineTrajectory& traj, const KeyMultiFrame& query,
    const KeyMultiFrame& cand, int cam_q_id, int cam_l_id,
    const LoopConfig& cfg, std::uint64_t seed) {
  const int fq = frame_index(query.mf, cam_q_id);
  const int fl = frame_index(cand.mf, cam_l_id);
  if (fq < 0 || fl < 0) return std::nullopt;
  const CameraFrame& frame_q = query.mf.frames[fq];
  const CameraFrame& frame_l = cand.mf.frames[fl];

  std::vector<Match> matches =
      match_ratio(frame_q.descriptors, frame_l.descriptors, cfg.match_ratio);
  if (static_cast<int>(matches.size()) < cfg.min_essential_inliers) {
    return std::nullopt;
  }
  const CameraModel& cam_q = rig.camera(cam_q_id);
  const CameraModel& cam_l = rig.camera(cam_l_id);
  std::vector<Vec2> kp_q, kp_l;
  for (const auto& k : frame_q.keypoints) kp_q.push_back(k.uv);
  for (const auto& k : frame_l.keypoints) kp_l.push_back(k.uv);
  EssentialFilterParams essential;
  essential.seed = seed;
  try {
    matches = filter_essential(matches, kp_q, kp_l, cam_q, cam_l, essential);
  } catch (const Error&) {
    return std::nullopt;
  }
  if (static_cast<int>(matches.size()) < cfg.min_essential_inliers) {
    return std::nullopt;
  }

  std::vector<PairAssociation> assoc;
  for (const Match& m : matches) {
    const int pid_q = query.links[fq][m.a];
    const int pid_l = cand.links[fl][m.b];
    if (pid_q < 0 || pid_l < 0) continue;
    PairAssociation a;
    a.X_q = world.point(pid_q).position;
    a.X_l = world.point(pid_l).position;
    a.uv_q = frame_q.keypoints[m.a].uv;
    a.uv_l = frame_l.keypoints[m.b].uv;
    assoc.push_back(a);
  }
  if (static_cast<int>(assoc.size()) < cfg.min_associations) {
    return std::nullopt;
  }

  const double t_q = frame_q.t;
  const double t_l = frame_l.t;
  const Pose T_q_inv = inverse(evaluate_spline(traj, t_q));
  const Pose T_l = evaluate_spline(traj, t_l);
  const Pose T_l_inv = inverse(T_l);

  // Minimal 3-point rigid alignments of the associated map points; the drift
  // transform maps candidate-side points onto their query-side duplicates.
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0,
                                          static_cast<int>(assoc.size()) - 1);
  int best_count = -1;
  Pose best;
  for (int it = 0; it < cfg.ransac_iterations; ++it) {
    const int i0 = pick(rng), i1 = pick(rng), i2 = pick(rng);
    if (i0 == i1 || i0 == i2 || i1 == i2) continue;
    Pose T_drift;
    try {
      T_drift = fit_se3({assoc[i0].X_l, assoc[i1].X_l, assoc[i2].X_l},
                        {assoc[i0].X_q, assoc[i1].X_q, assoc[i2].X_q});
    } catch (const Error&) {
      continue;
    }
    const Pose T_rel = T_q_inv * (T_drift * T_l);
    int count = 0;
    for (const auto& a : assoc) {
      if (pair_reproj_error(cam_q, cam_l, T_rel, T_l_inv, T_q_inv, a) <
          cfg.reproj_threshold_px) {
        ++count;
      }
    }
    if (count > best_count) {
      best_count = count;
      best = T_rel;
    }
  }
  if (best_count < 3) return std::nullopt;

  std::vector<PairAssociation> inliers;
  for (const auto& a : assoc) {
    if (pair_reproj_error(cam_q, cam_l, best, T_l_inv, T_q_inv, a) <
        cfg.reproj_threshold_px) {
      inliers.push_back(a);
    }
  }
  const Pose refined =
      refine_pair_pose(cam_q, cam_l, T_l_inv, T_q_inv, inliers, best, cfg);
  int count = 0;
  for (const auto& a : assoc) {
    if (pair_reproj_error(cam_q, cam_l, refined, T_l_inv, T_q_inv, a) <
        cfg.reproj_threshold_px) {
      ++count;
    }
  }
  if (count < cfg.min_pose_inliers) return std::nullopt;

  LoopPair out;
  out.camera_l = cam_l_id;
  out.camera_q = cam_q_id;
  out.T_ql = refined;
  out.t_l = t_l;
  out.t_q = t_q;
  out.inliers = count;
  return out;
}

}  // namespace detail

/// @brief Multi-camera geometric verification of a loop candidate.
///
/// With M surround cameras on the ring there are M relative-heading
/// scenarios; scenario s pairs the candidate's ring camera j with the
/// query's ring camera (j+s) mod M. The scenario verifying the most camera
/// pairs wins, ties broken by total inlier count; at least min_matched_pairs
/// pairs must survive or NoScenario is thrown. Assumes the ring cameras
/// share the ground plane, so revisits differ by yaw only.
inline LoopConstraint geometric_check(const WorldMap& world,
                                      const RigCalibration& rig, int query_id,
                                      int candidate_id, const LoopConfig& cfg) {
  const int M = static_cast<int>(rig.surround_cameras.size());
  if (M == 0) throw NoScenario("geometric check without surround cameras");
  const SplineTrajectory traj = trajectory_from_kmfs(world);
  const KeyMultiFrame& query = world.kmf(query_id);
  const KeyMultiFrame& cand = world.kmf(candidate_id);

  LoopConstraint best;
  best.query_id = query_id;
  best.candidate_id = candidate_id;
  std::uint64_t pair_seed = cfg.seed;
  for (int s = 0; s < M; ++s) {
    std::vector<LoopPair> pairs;
    int total = 0;
    for (int j = 0; j < M; ++j) {
      const int cam_l = rig.surround_cameras[j];
      const int cam_q = rig.surround_cameras[(j + s) % M];
      const auto pair = detail::try_match_pair(world, rig, traj, query, cand,
                                               cam_q, cam_l, cfg, pair_seed++);
      if (pair) {
        total += pair->inliers;
        pairs.push_back(*pair);
      }
    }
    if (static_cast<int>(pairs.size()) < cfg.min_matched_pairs) continue;
    if (pairs.size() > best.pairs.size() ||
        (pairs.size() == best.pairs.size() && total > best.total_inliers)) {
      best.scenario = s;
      best.pairs = std::move(pairs);
      best.total_inliers = total;
    }
  }
  if (best.scenario < 0) {
    throw NoScenario("no ring rotation scenario passed verification");
  }
  return best;
}

enum class EdgeKind { kNeighbor, kPastLoop, kNewLoop };

// Relative constraint between trajectory times: T_ba maps body coordinates
// at t_a to body coordinates at t_b.
struct PoseGraphEdge {
  EdgeKind kind = EdgeKind::kNeighbor;
  double t_a = 0.0;
  double t_b = 0.0;
  Pose T_ba;
  double weight = 1.0;
};

// Unary regularizer holding the pose at time t near its pre-PGO value.
struct PoseGraphAnchor {
  double t = 0.0;
  Pose target;
  double weight = 1.0;
};

struct PoseGraph {
  std::vector<PoseGraphEdge> edges;
  std::vector<PoseGraphAnchor> anchors;
};

// Node times of an accepted loop edge; the relative pose is re-derived from
// the current trajectory whenever the edge enters a later pose graph.
struct PastLoopEdge {
  double t_a = 0.0;
  double t_b = 0.0;
};

struct LoopState {
  std::vector<PastLoopEdge> past_edges;
  int last_correction_id = -1;  // query KMF id of the last accepted loop
};

inline Twist edge_residual(const PoseGraphEdge& e,
                           const SplineTrajectory& traj) {
  return log_map(e.T_ba * inverse(evaluate_spline(traj, e.t_a)) *
                 evaluate_spline(traj, e.t_b));
}

/// @brief Assemble the correction pose graph for one accepted constraint.
///
/// Neighbor edges chain consecutive KMF representative times and past loop
/// edges re-enter with relative poses evaluated on the current trajectory,
/// so both start at zero residual and act as rigidity. The new loop edges
/// carry the measured relative poses. Every KMF gets a unary anchor at its
/// current pose; all weights are 1.
inline PoseGraph build_pose_graph(const WorldMap& world,
                                  const SplineTrajectory& traj,
                                  const LoopConstraint& constraint,
                                  const LoopState& state) {
  PoseGraph graph;
  const auto relative = [&traj](double t_a, double t_b) {
    return inverse(evaluate_spline(traj, t_b)) * evaluate_spline(traj, t_a);
  };
  double prev = 0.0;
  bool first = true;
  for (const auto& [id, kmf] : world.kmfs()) {
    const double t = kmf.mf.rep_time;
    graph.anchors.push_back({t, evaluate_spline(traj, t), 1.0});
    if (!first) {
      graph.edges.push_back(
          {EdgeKind::kNeighbor, prev, t, relative(prev, t), 1.0});
    }
    prev = t;
    first = false;
  }
  for (const auto& e : state.past_edges) {
    graph.edges.push_back(
        {EdgeKind::kPastLoop, e.t_a, e.t_b, relative(e.t_a, e.t_b), 1.0});
  }
  for (const auto& p : constraint.pairs) {
    graph.edges.push_back({EdgeKind::kNewLoop, p.t_l, p.t_q, p.T_ql, 1.0});
  }
  return graph;
}

namespace detail {

struct PgoState {
  SplineTrajectory scratch;
};

// Each pose graph term owns exactly the control rows its times touch, so
// terms may share the scratch spline: writing one term's blocks never
// invalidates another's evaluation.
inline void write_pgo_rows(SplineTrajectory& scratch,
                           const std::vector<int>& rows,
                           const std::vector<Eigen::VectorXd>& v) {
  for (std::size_t k = 0; k < rows.size(); ++k) {
    scratch.control_poses[rows[k]] = Twist(v[k]);
  }
}

}  // namespace detail

/// @brief LM pose graph optimization over the spline control poses.
///
/// Control poses of KMFs in `frozen_ids` stay fixed; the rest absorb the
/// edge and anchor residuals under a Huber twist-norm loss. Writes the
/// optimized control poses back into the world's KMFs.
inline SolveSummary optimize_pose_graph(WorldMap& world, const PoseGraph& graph,
                                        const std::set<int>& frozen_ids,
                                        const LoopConfig& cfg) {
  std::vector<int> ids;
  for (const auto& [id, kmf] : world.kmfs()) ids.push_back(id);
  if (ids.size() < 2) {
    throw InvalidInput("pose graph needs at least two KMFs");
  }

  Problem problem;
  auto state = std::make_shared<detail::PgoState>();
  state->scratch = trajectory_from_kmfs(world);
  std::vector<int> block_of(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    block_of[i] = problem.add_twist_block(state->scratch.control_poses[i]);
    if (frozen_ids.count(ids[i]) > 0) problem.set_frozen(block_of[i], true);
  }

  const RobustLoss loss = RobustLoss::Huber(cfg.pgo_huber_delta);
  const auto rows_for = [&](std::initializer_list<double> times) {
    std::set<int> rows;
    for (double t : times) {
      for (int r : detail::control_rows(state->scratch, t)) rows.insert(r);
    }
    return std::vector<int>(rows.begin(), rows.end());
  };
  const auto add_term = [&](const std::vector<int>& rows,
                            Problem::Evaluator evaluator, double weight) {
    std::vector<int> blocks;
    for (int r : rows) blocks.push_back(block_of[r]);
    problem.add_residual(std::move(blocks), 6, std::move(evaluator),
                         Eigen::VectorXd::Constant(6, weight), loss);
  };

  for (const auto& e : graph.edges) {
    const std::vector<int> rows = rows_for({e.t_a, e.t_b});
    const Pose T_ba = e.T_ba;
    const double t_a = e.t_a, t_b = e.t_b;
    add_term(
        rows,
        [state, rows, T_ba, t_a, t_b](const std::vector<Eigen::VectorXd>& v)
            -> Eigen::VectorXd {
          detail::write_pgo_rows(state->scratch, rows, v);
          try {
            const Pose T_at = evaluate_spline(state->scratch, t_a);
            const Pose T_bt = evaluate_spline(state->scratch, t_b);
            return log_map(T_ba * inverse(T_at) * T_bt);
          } catch (const Error&) {
            return Eigen::VectorXd::Constant(6, 1e3);
          }
        },
        e.weight);
  }
  for (const auto& a : graph.anchors) {
    const std::vector<int> rows = rows_for({a.t});
    const Pose target_inv = inverse(a.target);
    const double t = a.t;
    add_term(rows,
             [state, rows, target_inv,
              t](const std::vector<Eigen::VectorXd>& v) -> Eigen::VectorXd {
               detail::write_pgo_rows(state->scratch, rows, v);
               try {
                 return log_map(target_inv * evaluate_spline(state->scratch, t));
               } catch (const Error&) {
                 return Eigen::VectorXd::Constant(6, 1e3);
               }
             },
             a.weight);
  }

  SolveOptions options;
  options.max_iterations = cfg.pgo_max_iterations;
  const SolveSummary summary = solve_lm(problem, options);

  std::size_t i = 0;
  for (auto& [id, kmf] : world.kmfs()) {
    kmf.control_pose = problem.twist_value(block_of[i++]);
  }
  return summary;
}

/// @brief Per-observation corrected positions of one map point.
///
/// Each observation proposes moving the point by the local trajectory
/// correction at its frame time; the median over proposals is robust to a
/// few observations from badly corrected spans.
inline std::vector<Vec3> corrected_candidates(const MapPoint& point,
                                              const WorldMap& world,
                                              const SplineTrajectory& before,
                                              const SplineTrajectory& after) {
  std::vector<Vec3> candidates;
  for (const auto& obs : point.observations) {
    const KeyMultiFrame& kmf = world.kmf(obs.kmf_id);
    const int f = frame_index(kmf.mf, obs.camera_id);
    if (f < 0) continue;
    const double t = kmf.mf.frames[f].t;
    const Pose correction =
        evaluate_spline(after, t) * inverse(evaluate_spline(before, t));
    candidates.push_back(correction * point.position);
  }
  return candidates;
}

inline Vec3 median_position(std::vector<Vec3> candidates) {
  if (candidates.empty()) {
    throw InvalidInput("median of zero corrected positions");
  }
  Vec3 out;
  for (int c = 0; c < 3; ++c) {
    std::vector<double> vals;
    vals.reserve(candidates.size());
    for (const auto& p : candidates) vals.push_back(p[c]);
    std::sort(vals.begin(), vals.end());
    const std::size_t n = vals.size();
    out[c] = n % 2 == 1 ? vals[n / 2]
                        : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
  }
  return out;
}

namespace detail {

// n consecutive ids centered on ids[center], clamped to the valid range.
inline std::vector<int> window_around(const std::vector<int>& ids, int center,
                                      int n) {
  const int count = std::min<int>(n, static_cast<int>(ids.size()));
  int lo = center - (count - 1) / 2;
  lo = std::max(0, std::min(lo, static_cast<int>(ids.size()) - count));
  return std::vector<int>(ids.begin() + lo, ids.begin() + lo + count);
}

// n consecutive ids ending at ids[end], clamped at the front.
inline std::vector<int> window_ending(const std::vector<int>& ids, int end,
                                      int n) {
  const int count = std::min(n, end + 1);
  return std::vector<int>(ids.begin() + (end - count + 1),
                          ids.begin() + end + 1);
}

// Fuse re-triangulated duplicates between the two welding windows. Image
// pairs follow the accepted scenario's camera mapping; a match whose two
// keypoints link to distinct nearby map points merges them into the older
// id, moving all observations across.
inline int fuse_duplicate_points(WorldMap& world, const RigCalibration& rig,
                                 const std::vector<int>& cand_window,
                                 const std::vector<int>& query_window,
                                 int scenario, const LoopConfig& cfg) {
  const int M = static_cast<int>(rig.surround_cameras.size());
  int fused = 0;
  for (int cid : cand_window) {
    for (int qid : query_window) {
      for (int j = 0; j < M; ++j) {
        const int cam_l = rig.surround_cameras[j];
        const int cam_q = rig.surround_cameras[(j + scenario) % M];
        const int fl = frame_index(world.kmf(cid).mf, cam_l);
        const int fq = frame_index(world.kmf(qid).mf, cam_q);
        if (fl < 0 || fq < 0) continue;
        const auto matches =
            match_ratio(world.kmf(qid).mf.frames[fq].descriptors,
                        world.kmf(cid).mf.frames[fl].descriptors,
                        cfg.match_ratio);
        for (const Match& m : matches) {
          // links mutate while fusing, so look them up fresh per match
          const int pid_q = world.kmf(qid).links[fq][m.a];
          const int pid_l = world.kmf(cid).links[fl][m.b];
          if (pid_q < 0 || pid_l < 0 || pid_q == pid_l) continue;
          const Vec3 d =
              world.point(pid_q).position - world.point(pid_l).position;
          if (d.norm() > cfg.fuse_distance) continue;
          const int keep = std::min(pid_q, pid_l);
          const int drop = std::max(pid_q, pid_l);
          const auto observations = world.point(drop).observations;
          for (const auto& o : observations) {
            world.unlink(drop, o.kmf_id, o.camera_id, o.keypoint_index);
            world.link(keep, o.kmf_id, o.camera_id, o.keypoint_index);
          }
          world.remove_point(drop);
          ++fused;
        }
      }
    }
  }
  return fused;
}

}  // namespace detail

struct CorrectionSummary {
  SolveSummary pgo;
  BaSummary welding;
  int fused_points = 0;
  double query_shift = 0.0;  // meters moved at the query representative time
};

/// @brief Apply a verified loop constraint to the trajectory and map.
///
/// Pose graph optimization over all control poses (candidate welding window
/// frozen) spreads the loop error along the spline; map points follow by the
/// median of their per-observation pose corrections; duplicates between the
/// welding windows fuse into their older ids; a bundle adjustment over both
/// windows with the candidate side frozen welds the seam. All changes commit
/// atomically: any failure throws CorrectionFailure with the world untouched.
inline CorrectionSummary correct_loop(WorldMap& world,
                                      const RigCalibration& rig,
                                      const LoopConstraint& constraint,
                                      LoopState& state, const LoopConfig& cfg,
                                      const MappingConfig& map_cfg =
                                          MappingConfig{}) {
  std::vector<int> ids;
  for (const auto& [id, kmf] : world.kmfs()) ids.push_back(id);
  const auto index_of = [&ids](int id) {
    const auto it = std::find(ids.begin(), ids.end(), id);
    if (it == ids.end()) {
      throw InvalidInput("loop constraint references an unknown KMF");
    }
    return static_cast<int>(it - ids.begin());
  };
  const int q_idx = index_of(constraint.query_id);
  const int l_idx = index_of(constraint.candidate_id);
  if (constraint.pairs.empty()) {
    throw InvalidInput("loop constraint carries no camera pairs");
  }

  WorldMap scratch = world;
  const SplineTrajectory before = trajectory_from_kmfs(scratch);
  const std::vector<int> cand_window =
      detail::window_around(ids, l_idx, cfg.welding_window);
  const std::vector<int> query_window =
      detail::window_ending(ids, q_idx, cfg.welding_window);
  const std::set<int> frozen(cand_window.begin(), cand_window.end());

  const PoseGraph graph = build_pose_graph(scratch, before, constraint, state);
  CorrectionSummary out;
  try {
    out.pgo = optimize_pose_graph(scratch, graph, frozen, cfg);
  } catch (const Error& e) {
    throw CorrectionFailure(std::string("pose graph optimization failed: ") +
                            e.what());
  }
  const SplineTrajectory after = trajectory_from_kmfs(scratch);

  for (auto& [pid, point] : scratch.points()) {
    const auto candidates = corrected_candidates(point, scratch, before, after);
    if (!candidates.empty()) point.position = median_position(candidates);
  }

  out.fused_points = detail::fuse_duplicate_points(
      scratch, rig, cand_window, query_window, constraint.scenario, cfg);

  std::set<int> free_ids(query_window.begin(), query_window.end());
  for (int id : cand_window) free_ids.erase(id);
  std::set<int> source_ids(query_window.begin(), query_window.end());
  source_ids.insert(cand_window.begin(), cand_window.end());
  try {
    out.welding = bundle_adjust_windows(scratch, rig, free_ids, source_ids,
                                        map_cfg);
  } catch (const Error& e) {
    throw CorrectionFailure(std::string("welding adjustment failed: ") +
                            e.what());
  }

  const double t_query = world.kmf(constraint.query_id).mf.rep_time;
  const SplineTrajectory welded = trajectory_from_kmfs(scratch);
  out.query_shift = (evaluate_spline(welded, t_query).t -
                     evaluate_spline(before, t_query).t)
                        .norm();

  world = std::move(scratch);
  for (const auto& p : constraint.pairs) {
    state.past_edges.push_back({p.t_l, p.t_q});
  }
  state.last_correction_id = constraint.query_id;
  return out;
}

/// @brief Full detection cascade for one query key multi-frame.
///
/// Skips everything inside the post-correction cooldown. Candidates are all
/// KMFs older than the query that pass the odometry gates; the similarity
/// gate compares them against the query's local-window neighbors; survivors
/// run geometric verification strongest first and the first verified
/// constraint wins.
inline std::optional<LoopConstraint> detect_loop(const WorldMap& world,
                                                 const RigCalibration& rig,
                                                 int query_id,
                                                 const PlaceScorer& scorer,
                                                 const LoopState& state,
                                                 const LoopConfig& cfg) {
  if (!world.has_kmf(query_id)) {
    throw IndexOutOfRange("detect_loop: unknown query KMF");
  }
  if (world.kmfs().size() < 2) return std::nullopt;
  if (state.last_correction_id >= 0 &&
      detail::kmf_gap(world, state.last_correction_id, query_id) <
          cfg.cooldown) {
    return std::nullopt;
  }

  std::vector<int> ids;
  for (const auto& [id, kmf] : world.kmfs()) ids.push_back(id);
  const auto it = std::find(ids.begin(), ids.end(), query_id);
  const int q_idx = static_cast<int>(it - ids.begin());

  std::vector<int> neighbors =
      detail::window_ending(ids, q_idx, cfg.welding_window);
  neighbors.erase(std::remove(neighbors.begin(), neighbors.end(), query_id),
                  neighbors.end());
  const std::set<int> neighbor_set(neighbors.begin(), neighbors.end());

  const SplineTrajectory traj = trajectory_from_kmfs(world);
  std::vector<int> candidates;
  for (int i = 0; i < q_idx; ++i) {
    if (neighbor_set.count(ids[i]) > 0) continue;
    if (odometry_check(world, traj, query_id, ids[i], cfg)) {
      candidates.push_back(ids[i]);
    }
  }
  if (candidates.empty()) return std::nullopt;

  const std::vector<int> survivors =
      similarity_check(query_id, neighbors, candidates, scorer, cfg);
  for (int candidate : survivors) {
    try {
      return geometric_check(world, rig, query_id, candidate, cfg);
    } catch (const NoScenario&) {
    }
  }
  return std::nullopt;
}

}  // namespace ctslam
