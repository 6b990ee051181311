#pragma once

// Trajectory evaluation: TUM-format I/O, closed-form SE(3) alignment,
// absolute and relative error metrics, and AUC aggregation.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "ctslam/errors.hpp"
#include "ctslam/lie.hpp"

namespace ctslam {

struct TimedPose {
  double t = 0.0;
  Pose pose = Pose::Identity();
};

// A trajectory stored as timed samples, interpolated geodesically between
// neighbours when queried.
class SampledTrajectory {
 public:
  SampledTrajectory() = default;
  explicit SampledTrajectory(std::vector<TimedPose> samples)
      : samples_(std::move(samples)) {
    std::stable_sort(
        samples_.begin(), samples_.end(),
        [](const TimedPose& a, const TimedPose& b) { return a.t < b.t; });
  }

  const std::vector<TimedPose>& samples() const { return samples_; }
  bool empty() const { return samples_.empty(); }
  double t_begin() const { return samples_.front().t; }
  double t_end() const { return samples_.back().t; }

  Pose sample(double t) const {
    if (samples_.empty()) throw InvalidInput("empty trajectory");
    if (t < t_begin() - 1e-9 || t > t_end() + 1e-9) {
      throw OutOfDomain("time " + std::to_string(t) +
                        " outside trajectory range");
    }
    t = std::clamp(t, t_begin(), t_end());
    const auto it = std::lower_bound(
        samples_.begin(), samples_.end(), t,
        [](const TimedPose& s, double v) { return s.t < v; });
    if (it == samples_.begin()) return it->pose;
    if (it == samples_.end()) return samples_.back().pose;
    const TimedPose& lo = *(it - 1);
    const TimedPose& hi = *it;
    if (hi.t <= lo.t) return lo.pose;
    const double alpha = (t - lo.t) / (hi.t - lo.t);
    return interpolate(lo.pose, hi.pose, alpha);
  }

 private:
  std::vector<TimedPose> samples_;
};

// TUM format: "timestamp tx ty tz qx qy qz qw", Hamilton quaternion,
// world-from-body, one sample per line.
inline void save_tum(const std::string& path,
                     const std::vector<TimedPose>& samples) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path);
  out << std::setprecision(17);
  for (const TimedPose& s : samples) {
    const Eigen::Quaterniond q(s.pose.R);
    out << s.t << " " << s.pose.t.x() << " " << s.pose.t.y() << " "
        << s.pose.t.z() << " " << q.x() << " " << q.y() << " " << q.z() << " "
        << q.w() << "\n";
  }
}

inline SampledTrajectory load_tum(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot read " + path);
  std::vector<TimedPose> samples;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    TimedPose s;
    double qx, qy, qz, qw;
    if (!(ss >> s.t >> s.pose.t.x() >> s.pose.t.y() >> s.pose.t.z() >> qx >>
          qy >> qz >> qw)) {
      throw InvalidInput(path + ": malformed trajectory line " +
                         std::to_string(lineno));
    }
    Eigen::Quaterniond q(qw, qx, qy, qz);
    if (q.norm() < 1e-12) {
      throw InvalidInput(path + ": zero quaternion on line " +
                         std::to_string(lineno));
    }
    s.pose.R = q.normalized().toRotationMatrix();
    samples.push_back(s);
  }
  return SampledTrajectory(std::move(samples));
}

// Least-squares rigid fit: returns the T minimizing sum |dst_i - T * src_i|^2.
inline Pose fit_se3(const std::vector<Vec3>& src, const std::vector<Vec3>& dst) {
  if (src.size() != dst.size() || src.empty()) {
    throw InvalidInput("rigid fit needs matched non-empty point sets");
  }
  Vec3 mean_src = Vec3::Zero(), mean_dst = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    mean_src += src[i];
    mean_dst += dst[i];
  }
  mean_src /= static_cast<double>(src.size());
  mean_dst /= static_cast<double>(dst.size());

  Mat3 H = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    H += (src[i] - mean_src) * (dst[i] - mean_dst).transpose();
  }
  Eigen::JacobiSVD<Mat3> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 D = Mat3::Identity();
  D(2, 2) = ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0)
                ? -1.0
                : 1.0;
  Pose T;
  T.R = svd.matrixV() * D * svd.matrixU().transpose();
  T.t = mean_dst - T.R * mean_src;
  return T;
}

namespace detail {

inline std::pair<double, double> overlap_range(const SampledTrajectory& a,
                                               const SampledTrajectory& b) {
  if (a.empty() || b.empty()) {
    throw NoOverlap("empty trajectory");
  }
  const double t0 = std::max(a.t_begin(), b.t_begin());
  const double t1 = std::min(a.t_end(), b.t_end());
  if (t1 < t0) {
    throw NoOverlap("trajectories do not overlap in time");
  }
  return {t0, t1};
}

}  // namespace detail

struct AteSample {
  double t = 0.0;
  double error_m = 0.0;
};

// Samples both trajectories over their common time range, rigidly aligns the
// estimate to the reference, and reports per-sample position errors.
inline std::vector<AteSample> ate(const SampledTrajectory& est,
                                  const SampledTrajectory& gt,
                                  double rate = 10.0) {
  const auto [t0, t1] = detail::overlap_range(est, gt);
  std::vector<double> times;
  const double step = 1.0 / rate;
  for (double t = t0; t <= t1 + 1e-9; t += step) {
    times.push_back(std::min(t, t1));
  }
  std::vector<Vec3> p_est, p_gt;
  p_est.reserve(times.size());
  p_gt.reserve(times.size());
  for (double t : times) {
    p_est.push_back(est.sample(t).t);
    p_gt.push_back(gt.sample(t).t);
  }
  const Pose T = fit_se3(p_est, p_gt);
  std::vector<AteSample> out;
  out.reserve(times.size());
  for (std::size_t i = 0; i < times.size(); ++i) {
    out.push_back({times[i], (p_gt[i] - (T * p_est[i])).norm()});
  }
  return out;
}

struct RpeSample {
  double t = 0.0;
  double trans_cmpm = 0.0;
  double rot_radpm = 0.0;
};

// Relative pose error over fixed intervals, normalized by the reference path
// length covered by each interval. Intervals with under 1 cm of reference
// motion are skipped.
inline std::vector<RpeSample> rpe(const SampledTrajectory& est,
                                  const SampledTrajectory& gt,
                                  double interval = 1.0) {
  const auto [t0, t1] = detail::overlap_range(est, gt);
  std::vector<RpeSample> out;
  for (double t = t0; t + interval <= t1 + 1e-9; t += interval) {
    const double ta = t;
    const double tb = std::min(t + interval, t1);

    double path = 0.0;
    const int steps = 100;
    Vec3 prev = gt.sample(ta).t;
    for (int k = 1; k <= steps; ++k) {
      const Vec3 cur = gt.sample(ta + (tb - ta) * k / steps).t;
      path += (cur - prev).norm();
      prev = cur;
    }
    if (path < 0.01) continue;

    const Pose d_gt = inverse(gt.sample(ta)) * gt.sample(tb);
    const Pose d_est = inverse(est.sample(ta)) * est.sample(tb);
    const Pose err = inverse(d_gt) * d_est;
    out.push_back({ta, err.t.norm() / path * 100.0,
                   rotation_angle(err) / path});
  }
  return out;
}

// Area under the empirical cumulative error curve on [0, threshold], as a
// percentage. The cumulative curve is a step function, so the integral is
// computed exactly: each sample contributes (threshold - s)+ / threshold.
// Infinite samples (failure padding) contribute zero.
inline double auc(const std::vector<double>& samples, double threshold) {
  if (threshold <= 0.0) throw InvalidInput("auc threshold must be positive");
  if (samples.empty()) return 0.0;
  std::vector<double> sorted = samples;
  std::sort(sorted.begin(), sorted.end());
  double area = 0.0;
  for (double s : sorted) {
    if (s < threshold) area += (threshold - std::max(s, 0.0)) / threshold;
  }
  return 100.0 * area / static_cast<double>(sorted.size());
}

constexpr double kAucThresholdRpeTrans = 20.0;    // cm/m
constexpr double kAucThresholdRpeRot = 5e-4;      // rad/m
constexpr double kAucThresholdAte = 1000.0;       // m

struct MetricsReport {
  std::vector<AteSample> ate_samples;
  std::vector<RpeSample> rpe_samples;
  bool success = false;
  double auc_ate = 0.0;
  double auc_rpe_trans = 0.0;
  double auc_rpe_rot = 0.0;
};

// Evaluates an estimate against the reference. When pad_to_reference is set,
// reference sample times not covered by the estimate are reported as +inf so
// aborted runs are penalized over the full reference span.
inline MetricsReport evaluate_trajectories(const SampledTrajectory& est,
                                           const SampledTrajectory& gt,
                                           bool pad_to_reference = true) {
  MetricsReport report;
  report.ate_samples = ate(est, gt);
  report.rpe_samples = rpe(est, gt);

  if (pad_to_reference) {
    const double inf = std::numeric_limits<double>::infinity();
    for (double t = gt.t_begin(); t <= gt.t_end() + 1e-9; t += 0.1) {
      if (t < est.t_begin() - 1e-9 || t > est.t_end() + 1e-9) {
        report.ate_samples.push_back({t, inf});
      }
    }
    for (double t = gt.t_begin(); t + 1.0 <= gt.t_end() + 1e-9; t += 1.0) {
      if (t < est.t_begin() - 1e-9 || t + 1.0 > est.t_end() + 1e-9) {
        report.rpe_samples.push_back({t, inf, inf});
      }
    }
    std::stable_sort(report.ate_samples.begin(), report.ate_samples.end(),
                     [](const AteSample& a, const AteSample& b) {
                       return a.t < b.t;
                     });
    std::stable_sort(report.rpe_samples.begin(), report.rpe_samples.end(),
                     [](const RpeSample& a, const RpeSample& b) {
                       return a.t < b.t;
                     });
  }

  std::vector<double> ate_vals, rpe_t, rpe_r;
  for (const auto& s : report.ate_samples) ate_vals.push_back(s.error_m);
  for (const auto& s : report.rpe_samples) {
    rpe_t.push_back(s.trans_cmpm);
    rpe_r.push_back(s.rot_radpm);
  }
  report.auc_ate = auc(ate_vals, kAucThresholdAte);
  report.auc_rpe_trans = auc(rpe_t, kAucThresholdRpeTrans);
  report.auc_rpe_rot = auc(rpe_r, kAucThresholdRpeRot);
  return report;
}

inline void write_metrics_csv(const std::string& path,
                              const MetricsReport& report) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path);
  out << std::setprecision(17);
  out << "t,ate_m,rpe_t_cmpm,rpe_r_radpm\n";
  std::size_t next_rpe = 0;
  for (const AteSample& s : report.ate_samples) {
    out << s.t << "," << s.error_m << ",";
    while (next_rpe < report.rpe_samples.size() &&
           report.rpe_samples[next_rpe].t < s.t - 1e-6) {
      ++next_rpe;
    }
    if (next_rpe < report.rpe_samples.size() &&
        std::abs(report.rpe_samples[next_rpe].t - s.t) <= 1e-6) {
      out << report.rpe_samples[next_rpe].trans_cmpm << ","
          << report.rpe_samples[next_rpe].rot_radpm;
      ++next_rpe;
    } else {
      out << ",";
    }
    out << "\n";
  }
}

}  // namespace ctslam
