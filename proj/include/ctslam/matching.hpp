#pragma once

// matching.hpp - Binary descriptor matching between images.
//
// Descriptors are 256-bit strings compared under Hamming distance. Candidate
// matches pass Lowe's ratio test in both directions plus a mutual-best check;
// geometric verification fits an essential matrix with the normalized
// eight-point algorithm inside RANSAC.

#include <Eigen/Dense>

#include <array>
#include <bit>
#include <cstdint>
#include <random>
#include <vector>

#include "ctslam/camera.hpp"
#include "ctslam/errors.hpp"

namespace ctslam {

using Descriptor = std::array<std::uint64_t, 4>;

inline int hamming(const Descriptor& a, const Descriptor& b) {
  int d = 0;
  for (int i = 0; i < 4; ++i) d += std::popcount(a[i] ^ b[i]);
  return d;
}

struct Match {
  int a = -1;
  int b = -1;
  int distance = 0;
};

/// @brief Ratio-test matching with a mutual-best filter.
///
/// A pair (a, b) survives iff b is a's nearest neighbour and a is b's,
/// and the ratio test d1 < ratio * d2 holds on both sides (trivially, when
/// the other set has a single element). Equidistant nearest neighbours fail
/// the test, so the result is symmetric in the two inputs.
inline std::vector<Match> match_ratio(const std::vector<Descriptor>& da,
                                      const std::vector<Descriptor>& db,
                                      double ratio = 0.7) {
  const int na = static_cast<int>(da.size());
  const int nb = static_cast<int>(db.size());
  std::vector<Match> out;
  if (na == 0 || nb == 0) return out;

  constexpr int kInf = 1 << 20;
  std::vector<int> best_b(na, -1), d1(na, kInf), d2(na, kInf);
  std::vector<int> best_a(nb, -1), e1(nb, kInf), e2(nb, kInf);
  for (int i = 0; i < na; ++i) {
    for (int j = 0; j < nb; ++j) {
      const int d = hamming(da[i], db[j]);
      if (d < d1[i]) {
        d2[i] = d1[i];
        d1[i] = d;
        best_b[i] = j;
      } else if (d < d2[i]) {
        d2[i] = d;
      }
      if (d < e1[j]) {
        e2[j] = e1[j];
        e1[j] = d;
        best_a[j] = i;
      } else if (d < e2[j]) {
        e2[j] = d;
      }
    }
  }

  for (int i = 0; i < na; ++i) {
    const int j = best_b[i];
    if (j < 0 || best_a[j] != i) continue;
    const bool pass_a = (nb == 1) || (d1[i] < ratio * d2[i]);
    const bool pass_b = (na == 1) || (e1[j] < ratio * e2[j]);
    if (pass_a && pass_b) out.push_back({i, j, d1[i]});
  }
  return out;
}

struct EssentialFilterParams {
  int iterations = 200;       // RANSAC iteration cap
  double threshold_px = 1.0;  // epipolar point-line distance, pixels
  double confidence = 0.999;  // adaptive early-exit confidence
  std::uint64_t seed = 0;
};

namespace detail {

inline Eigen::Matrix3d eight_point(
    const std::vector<Eigen::Vector2d>& xa,
    const std::vector<Eigen::Vector2d>& xb,
    const std::vector<int>& idx) {
  // Hartley conditioning per side.
  const auto condition = [&](const std::vector<Eigen::Vector2d>& pts,
                             Eigen::Matrix3d& T) {
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    for (int i : idx) mean += pts[i];
    mean /= static_cast<double>(idx.size());
    double rms = 0.0;
    for (int i : idx) rms += (pts[i] - mean).squaredNorm();
    rms = std::sqrt(rms / static_cast<double>(idx.size()));
    const double s = rms > 1e-12 ? std::sqrt(2.0) / rms : 1.0;
    T = Eigen::Matrix3d::Identity();
    T(0, 0) = T(1, 1) = s;
    T(0, 2) = -s * mean.x();
    T(1, 2) = -s * mean.y();
  };
  Eigen::Matrix3d Ta, Tb;
  condition(xa, Ta);
  condition(xb, Tb);

  Eigen::Matrix<double, Eigen::Dynamic, 9> A(idx.size(), 9);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const Eigen::Vector3d pa = Ta * xa[idx[r]].homogeneous();
    const Eigen::Vector3d pb = Tb * xb[idx[r]].homogeneous();
    A.row(r) << pb.x() * pa.x(), pb.x() * pa.y(), pb.x(),  //
        pb.y() * pa.x(), pb.y() * pa.y(), pb.y(),          //
        pa.x(), pa.y(), 1.0;
  }
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const Eigen::Matrix<double, 9, 1> f = svd.matrixV().col(8);
  Eigen::Matrix3d E;
  E << f(0), f(1), f(2), f(3), f(4), f(5), f(6), f(7), f(8);
  E = Tb.transpose() * E * Ta;

  // Project onto the essential manifold: singular values (s, s, 0).
  Eigen::JacobiSVD<Eigen::Matrix3d> esvd(
      E, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d sv = esvd.singularValues();
  const double s = 0.5 * (sv[0] + sv[1]);
  return esvd.matrixU() * Eigen::Vector3d(s, s, 0.0).asDiagonal() *
         esvd.matrixV().transpose();
}

/// Larger of the two epipolar point-line distances, converted to pixels.
inline double epipolar_distance_px(const Eigen::Matrix3d& E,
                                   const Eigen::Vector2d& pa,
                                   const Eigen::Vector2d& pb, double focal_a,
                                   double focal_b) {
  const Eigen::Vector3d xa = pa.homogeneous();
  const Eigen::Vector3d xb = pb.homogeneous();
  const Eigen::Vector3d lb = E * xa;        // line in image b
  const Eigen::Vector3d la = E.transpose() * xb;
  const double num = std::abs(xb.dot(lb));
  const double db = num / std::max(lb.head<2>().norm(), 1e-15) * focal_b;
  const double da = num / std::max(la.head<2>().norm(), 1e-15) * focal_a;
  return std::max(da, db);
}

}  // namespace detail

/// @brief RANSAC essential-matrix verification of candidate matches.
///
/// Points are normalized with each camera's intrinsics; models come from the
/// conditioned eight-point algorithm; inliers lie within threshold_px of the
/// epipolar line in both images. Needs at least 8 matches.
inline std::vector<Match> filter_essential(const std::vector<Match>& matches,
                                           const std::vector<Vec2>& kps_a,
                                           const std::vector<Vec2>& kps_b,
                                           const CameraModel& cam_a,
                                           const CameraModel& cam_b,
                                           const EssentialFilterParams& params =
                                               EssentialFilterParams{}) {
  const int n = static_cast<int>(matches.size());
  if (n < 8) throw TooFewMatches("filter_essential: need >= 8 matches");

  std::vector<Eigen::Vector2d> xa(n), xb(n);
  for (int i = 0; i < n; ++i) {
    const Vec2& pa = kps_a[matches[i].a];
    const Vec2& pb = kps_b[matches[i].b];
    xa[i] = Eigen::Vector2d((pa.x() - cam_a.cx) / cam_a.fx,
                            (pa.y() - cam_a.cy) / cam_a.fy);
    xb[i] = Eigen::Vector2d((pb.x() - cam_b.cx) / cam_b.fx,
                            (pb.y() - cam_b.cy) / cam_b.fy);
  }
  const double fa = 0.5 * (cam_a.fx + cam_a.fy);
  const double fb = 0.5 * (cam_b.fx + cam_b.fy);

  std::mt19937_64 rng(params.seed);
  std::uniform_int_distribution<int> pick(0, n - 1);

  std::vector<int> best_inliers;
  double best_mean = 0.0;
  int max_iters = params.iterations;
  for (int iter = 0; iter < max_iters; ++iter) {
    std::vector<int> sample;
    while (static_cast<int>(sample.size()) < 8) {
      const int c = pick(rng);
      bool dup = false;
      for (int s : sample) dup |= (s == c);
      if (!dup) sample.push_back(c);
    }
    const Eigen::Matrix3d E = detail::eight_point(xa, xb, sample);

    std::vector<int> inliers;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      const double d = detail::epipolar_distance_px(E, xa[i], xb[i], fa, fb);
      if (d < params.threshold_px) {
        inliers.push_back(i);
        sum += d;
      }
    }
    const double mean =
        inliers.empty() ? 0.0 : sum / static_cast<double>(inliers.size());
    if (inliers.size() > best_inliers.size() ||
        (inliers.size() == best_inliers.size() && !inliers.empty() &&
         mean < best_mean)) {
      best_inliers = inliers;
      best_mean = mean;

      const double w =
          static_cast<double>(best_inliers.size()) / static_cast<double>(n);
      const double p_sample = std::pow(w, 8);
      if (p_sample >= 1.0) {
        max_iters = iter + 1;
      } else if (p_sample > 0.0) {
        const double needed = std::log(1.0 - params.confidence) /
                              std::log(1.0 - p_sample);
        if (needed < static_cast<double>(max_iters)) {
          max_iters = std::max(iter + 1, static_cast<int>(std::ceil(needed)));
        }
      }
    }
  }

  std::vector<Match> out;
  out.reserve(best_inliers.size());
  for (int i : best_inliers) out.push_back(matches[i]);
  return out;
}

}  // namespace ctslam
