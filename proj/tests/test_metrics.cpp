#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Geometry>
#include <filesystem>
#include <fstream>
#include <random>

#include "ctslam/metrics.hpp"
#include "oracles.hpp"

using namespace ctslam;

namespace {

std::vector<TimedPose> random_trajectory(std::mt19937_64& rng, int n,
                                         double dt = 0.1) {
  std::vector<TimedPose> samples;
  Pose T = Pose::Identity();
  for (int i = 0; i < n; ++i) {
    samples.push_back({i * dt, T});
    T = T * exp_map(Twist(0.1 * oracle::random_twist(rng, 0.3, 1.0)));
  }
  return samples;
}

std::vector<TimedPose> transformed(const std::vector<TimedPose>& in,
                                   const Pose& G, double dt_shift = 0.0) {
  std::vector<TimedPose> out;
  for (const auto& s : in) out.push_back({s.t + dt_shift, G * s.pose});
  return out;
}

// Independent rigid-fit oracle.
Pose umeyama_fit(const std::vector<Vec3>& src, const std::vector<Vec3>& dst) {
  Eigen::MatrixXd S(3, src.size()), D(3, dst.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    S.col(i) = src[i];
    D.col(i) = dst[i];
  }
  const Eigen::Matrix4d M = Eigen::umeyama(S, D, false);
  return Pose::FromMatrix(M);
}

}  // namespace

TEST_CASE("tum files roundtrip", "[metrics]") {
  std::mt19937_64 rng(41);
  const auto samples = random_trajectory(rng, 25);
  const std::string path =
      (std::filesystem::temp_directory_path() / "traj_roundtrip.tum").string();
  save_tum(path, samples);
  const SampledTrajectory loaded = load_tum(path);

  REQUIRE(loaded.samples().size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    REQUIRE(loaded.samples()[i].t == samples[i].t);
    REQUIRE((loaded.samples()[i].pose.matrix() - samples[i].pose.matrix())
                .cwiseAbs()
                .maxCoeff() < 1e-12);
  }
  std::filesystem::remove(path);
}

TEST_CASE("tum loader rejects malformed lines", "[metrics]") {
  const std::string path =
      (std::filesystem::temp_directory_path() / "traj_bad.tum").string();
  {
    std::ofstream out(path);
    out << "# comment\n";
    out << "0.0 1 2 3 0 0 0 1\n";
    out << "0.1 1 2\n";
  }
  REQUIRE_THROWS_AS(load_tum(path), InvalidInput);
  std::filesystem::remove(path);
}

TEST_CASE("sampled trajectory interpolates geodesically", "[metrics]") {
  std::mt19937_64 rng(43);
  const Pose A = exp_map(oracle::random_twist(rng, 1.0, 2.0));
  const Pose B = A * exp_map(oracle::random_twist(rng, 0.8, 1.0));
  const SampledTrajectory traj({{1.0, A}, {2.0, B}});

  REQUIRE((traj.sample(1.0).matrix() - A.matrix()).cwiseAbs().maxCoeff() <
          1e-12);
  const Pose mid = traj.sample(1.5);
  const Pose expected = interpolate(A, B, 0.5);
  REQUIRE((mid.matrix() - expected.matrix()).cwiseAbs().maxCoeff() < 1e-12);
  REQUIRE_THROWS_AS(traj.sample(0.5), OutOfDomain);
  REQUIRE_THROWS_AS(traj.sample(2.5), OutOfDomain);
}

TEST_CASE("rigid fit matches the umeyama oracle", "[metrics]") {
  std::mt19937_64 rng(47);
  for (int trial = 0; trial < 20; ++trial) {
    const Pose G = exp_map(oracle::random_twist(rng, 2.5, 5.0));
    std::vector<Vec3> src, dst;
    for (int i = 0; i < 15; ++i) {
      const Vec3 p = 10.0 * Vec3(oracle::random_unit(rng));
      src.push_back(p);
      dst.push_back(G * p);
    }
    const Pose T = fit_se3(src, dst);
    REQUIRE((T.matrix() - G.matrix()).cwiseAbs().maxCoeff() < 1e-9);
    const Pose O = umeyama_fit(src, dst);
    REQUIRE((T.matrix() - O.matrix()).cwiseAbs().maxCoeff() < 1e-9);
  }

  SECTION("noisy fit still matches the oracle") {
    std::vector<Vec3> src, dst;
    for (int i = 0; i < 30; ++i) {
      const Vec3 p = 5.0 * Vec3(oracle::random_unit(rng));
      src.push_back(p);
      dst.push_back(p + 0.05 * Vec3(oracle::random_unit(rng)));
    }
    const Pose T = fit_se3(src, dst);
    const Pose O = umeyama_fit(src, dst);
    REQUIRE((T.matrix() - O.matrix()).cwiseAbs().maxCoeff() < 1e-9);
  }

  REQUIRE_THROWS_AS(fit_se3({}, {}), InvalidInput);
}

TEST_CASE("ate is zero for identical and rigidly moved estimates",
          "[metrics]") {
  std::mt19937_64 rng(53);
  const SampledTrajectory gt(random_trajectory(rng, 40));

  for (const auto& s : ate(gt, gt)) {
    REQUIRE(s.error_m < 1e-12);
  }

  Pose G = Pose::Identity();
  G.t = Vec3(5.0, 0.0, 0.0);
  const SampledTrajectory shifted(transformed(gt.samples(), G));
  for (const auto& s : ate(shifted, gt)) {
    REQUIRE(s.error_m < 1e-10);
  }

  const Pose G2 = exp_map(oracle::random_twist(rng, 2.0, 8.0));
  const SampledTrajectory moved(transformed(gt.samples(), G2));
  for (const auto& s : ate(moved, gt)) {
    REQUIRE(s.error_m < 1e-9);
  }
}

TEST_CASE("ate reports the aligned residual of a planted bump", "[metrics]") {
  // Straight ground truth; the estimate bumps one sample by 1 m laterally.
  std::vector<TimedPose> gt, est;
  for (int i = 0; i < 3; ++i) {
    Pose T = Pose::Identity();
    T.t = Vec3(1.0 * i, 0.0, 0.0);
    gt.push_back({0.1 * i, T});
    Pose E = T;
    if (i == 1) E.t.y() += 1.0;
    est.push_back({0.1 * i, E});
  }
  const auto samples = ate(SampledTrajectory(est), SampledTrajectory(gt));
  REQUIRE(samples.size() == 3);

  // Oracle: align the three positions independently and take residuals.
  std::vector<Vec3> p_est, p_gt;
  for (int i = 0; i < 3; ++i) {
    p_est.push_back(est[i].pose.t);
    p_gt.push_back(gt[i].pose.t);
  }
  const Pose T = umeyama_fit(p_est, p_gt);
  for (int i = 0; i < 3; ++i) {
    REQUIRE(samples[i].error_m ==
            Catch::Approx((p_gt[i] - T * p_est[i]).norm()).margin(1e-12));
  }
  // The bumped sample dominates.
  REQUIRE(samples[1].error_m > samples[0].error_m);
  REQUIRE(samples[1].error_m > samples[2].error_m);
  REQUIRE(samples[1].error_m == Catch::Approx(2.0 / 3.0).margin(1e-9));
}

TEST_CASE("rpe is zero for identical and globally rotated estimates",
          "[metrics]") {
  std::mt19937_64 rng(59);
  std::vector<TimedPose> gt;
  for (int i = 0; i <= 100; ++i) {
    Pose T = Pose::Identity();
    T.t = Vec3(0.5 * i, 0.1 * std::sin(0.3 * i), 0.0);
    gt.push_back({0.1 * i, T});
  }
  const SampledTrajectory gt_traj(gt);

  for (const auto& s : rpe(gt_traj, gt_traj)) {
    REQUIRE(s.trans_cmpm < 1e-12);
    REQUIRE(s.rot_radpm < 1e-12);
  }

  const Pose G = exp_map(oracle::random_twist(rng, 2.0, 10.0));
  const SampledTrajectory moved(transformed(gt, G));
  for (const auto& s : rpe(moved, gt_traj)) {
    REQUIRE(s.trans_cmpm < 1e-9);
    REQUIRE(s.rot_radpm < 1e-9);
  }
}

TEST_CASE("rpe reads 1 cm/m for a 1 percent scale error", "[metrics]") {
  // Straight 10 m/s drive; estimated positions stretched by 1.01.
  std::vector<TimedPose> gt, est;
  for (int i = 0; i <= 100; ++i) {
    Pose T = Pose::Identity();
    T.t = Vec3(1.0 * i, 0.0, 0.0);
    gt.push_back({0.1 * i, T});
    Pose E = T;
    E.t *= 1.01;
    est.push_back({0.1 * i, E});
  }
  const auto samples = rpe(SampledTrajectory(est), SampledTrajectory(gt));
  REQUIRE(samples.size() == 10);
  for (const auto& s : samples) {
    REQUIRE(s.trans_cmpm == Catch::Approx(1.0).margin(1e-9));
    REQUIRE(s.rot_radpm < 1e-12);
  }
}

TEST_CASE("rpe skips intervals with no reference motion", "[metrics]") {
  std::vector<TimedPose> still;
  for (int i = 0; i <= 30; ++i) {
    still.push_back({0.1 * i, Pose::Identity()});
  }
  const SampledTrajectory traj(still);
  REQUIRE(rpe(traj, traj).empty());
}

TEST_CASE("metrics throw without temporal overlap", "[metrics]") {
  std::mt19937_64 rng(61);
  const auto base = random_trajectory(rng, 20);
  const SampledTrajectory a(base);
  const SampledTrajectory b(transformed(base, Pose::Identity(), 100.0));
  REQUIRE_THROWS_AS(ate(a, b), NoOverlap);
  REQUIRE_THROWS_AS(rpe(a, b), NoOverlap);
}

TEST_CASE("metrics are invariant to a common time shift", "[metrics]") {
  std::mt19937_64 rng(67);
  const auto gt = random_trajectory(rng, 60);
  auto est = gt;
  for (auto& s : est) {
    s.pose = s.pose * exp_map(Twist(0.002 * oracle::random_twist(rng, 0.5, 1.0)));
  }
  const auto a0 = ate(SampledTrajectory(est), SampledTrajectory(gt));
  const auto r0 = rpe(SampledTrajectory(est), SampledTrajectory(gt));
  const auto a1 = ate(SampledTrajectory(transformed(est, Pose::Identity(), 7.5)),
                      SampledTrajectory(transformed(gt, Pose::Identity(), 7.5)));
  const auto r1 = rpe(SampledTrajectory(transformed(est, Pose::Identity(), 7.5)),
                      SampledTrajectory(transformed(gt, Pose::Identity(), 7.5)));
  REQUIRE(a0.size() == a1.size());
  for (std::size_t i = 0; i < a0.size(); ++i) {
    REQUIRE(a0[i].error_m == Catch::Approx(a1[i].error_m).margin(1e-9));
  }
  REQUIRE(r0.size() == r1.size());
  for (std::size_t i = 0; i < r0.size(); ++i) {
    REQUIRE(r0[i].trans_cmpm == Catch::Approx(r1[i].trans_cmpm).margin(1e-9));
    REQUIRE(r0[i].rot_radpm == Catch::Approx(r1[i].rot_radpm).margin(1e-9));
  }
}

TEST_CASE("auc integrates the empirical step curve exactly", "[metrics]") {
  const double inf = std::numeric_limits<double>::infinity();

  for (double threshold : {0.1, 20.0, 1000.0}) {
    REQUIRE(auc({0.0, 0.0, 0.0}, threshold) == 100.0);
    REQUIRE(auc({inf, inf}, threshold) == 0.0);
    REQUIRE(auc({0.0, 0.0, inf, inf}, threshold) == 50.0);
  }
  REQUIRE(auc({10.0}, 20.0) == 50.0);
  REQUIRE(auc({20.0}, 20.0) == 0.0);
  REQUIRE(auc({5.0, 15.0}, 20.0) == Catch::Approx(50.0));
  REQUIRE(auc({}, 20.0) == 0.0);
  REQUIRE_THROWS_AS(auc({1.0}, 0.0), InvalidInput);

  SECTION("monotone in threshold, antitone in samples") {
    std::mt19937_64 rng(71);
    std::uniform_real_distribution<double> val(0.0, 30.0);
    std::vector<double> samples;
    for (int i = 0; i < 50; ++i) samples.push_back(val(rng));
    double prev = -1.0;
    for (double threshold : {1.0, 5.0, 10.0, 20.0, 40.0}) {
      const double a = auc(samples, threshold);
      REQUIRE(a >= prev);
      prev = a;
    }
    auto worse = samples;
    worse[7] += 10.0;
    REQUIRE(auc(worse, 20.0) <= auc(samples, 20.0));
  }
}

TEST_CASE("evaluation pads uncovered reference time with infinity",
          "[metrics]") {
  std::vector<TimedPose> gt, est;
  for (int i = 0; i <= 100; ++i) {
    Pose T = Pose::Identity();
    T.t = Vec3(1.0 * i, 0.0, 0.0);
    gt.push_back({0.1 * i, T});
    if (i <= 50) est.push_back({0.1 * i, T});
  }
  const MetricsReport report =
      evaluate_trajectories(SampledTrajectory(est), SampledTrajectory(gt));

  int finite = 0, infinite = 0;
  for (const auto& s : report.ate_samples) {
    if (std::isinf(s.error_m)) {
      ++infinite;
      REQUIRE(s.t > 5.0);
    } else {
      ++finite;
    }
  }
  REQUIRE(finite == 51);
  REQUIRE(infinite == 50);
  REQUIRE(report.auc_ate == Catch::Approx(100.0 * 51.0 / 101.0).margin(1e-9));

  const MetricsReport full =
      evaluate_trajectories(SampledTrajectory(gt), SampledTrajectory(gt));
  REQUIRE(full.auc_ate == 100.0);
  REQUIRE(full.auc_rpe_trans == 100.0);
  REQUIRE(full.auc_rpe_rot == 100.0);
}

TEST_CASE("metrics csv pairs rpe rows with matching timestamps", "[metrics]") {
  MetricsReport report;
  report.ate_samples = {{0.0, 0.01}, {0.1, 0.02}, {0.2, 0.03},
                        {1.0, 0.04}, {1.1, 0.05}};
  report.rpe_samples = {{0.0, 1.5, 2e-4}, {1.0, 2.5, 3e-4}};

  const std::string path =
      (std::filesystem::temp_directory_path() / "metrics.csv").string();
  write_metrics_csv(path, report);

  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  REQUIRE(line == "t,ate_m,rpe_t_cmpm,rpe_r_radpm");
  std::vector<std::string> rows;
  while (std::getline(in, line)) rows.push_back(line);
  REQUIRE(rows.size() == 5);
  REQUIRE(rows[0] == "0,0.01,1.5,0.00020000000000000001");
  REQUIRE(rows[1] == "0.10000000000000001,0.02,,");
  REQUIRE(rows[3].find("2.5") != std::string::npos);
  std::filesystem::remove(path);
}
