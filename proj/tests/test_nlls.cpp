#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "ctslam/nlls.hpp"
#include "oracles.hpp"

using namespace ctslam;

TEST_CASE("huber loss values and weights", "[nlls]") {
  const RobustLoss loss = RobustLoss::Huber(1.5);
  const double d2 = 1.5 * 1.5;

  REQUIRE(loss.rho(0.5 * d2) == Catch::Approx(0.5 * d2));
  REQUIRE(loss.weight(0.5 * d2) == 1.0);

  // Continuity and slope at the corner.
  REQUIRE(loss.rho(d2) == Catch::Approx(d2));
  REQUIRE(loss.rho(d2 + 1e-9) == Catch::Approx(d2).margin(1e-8));

  // A residual at 3 sigma: quadratic cost 9 d2, robust cost 5 d2,
  // weight delta / |e| = 1/3.
  const double s = 9.0 * d2;
  REQUIRE(loss.rho(s) == Catch::Approx(5.0 * d2));
  REQUIRE(loss.rho(s) < s);
  REQUIRE(loss.weight(s) == Catch::Approx(1.0 / 3.0));

  const RobustLoss none = RobustLoss::None();
  REQUIRE(none.rho(s) == s);
  REQUIRE(none.weight(s) == 1.0);
}

TEST_CASE("quadratic bowl solves in one Gauss-Newton step", "[nlls]") {
  Problem problem;
  const int b = problem.add_point_block(Vec3(5.0, -3.0, 2.0));
  const Vec3 target(1.0, 2.0, -0.5);
  problem.add_residual(
      {b}, 3,
      [target](const std::vector<Eigen::VectorXd>& v) {
        return Eigen::VectorXd(v[0] - target);
      },
      Eigen::VectorXd(), RobustLoss::None());

  SolveOptions opts;
  opts.initial_lambda = 1e-12;
  const SolveSummary summary = solve_lm(problem, opts);
  REQUIRE(summary.converged);
  REQUIRE(summary.iterations <= 2);
  REQUIRE((problem.point_value(b) - target).norm() < 1e-10);
  REQUIRE(summary.final_cost < 1e-18);
  REQUIRE(summary.final_cost <= summary.initial_cost);
}

TEST_CASE("rosenbrock bowl converges from the standard start", "[nlls]") {
  Problem problem;
  const int b = problem.add_point_block(Vec3(-1.2, 1.0, 0.3));
  problem.add_residual(
      {b}, 3,
      [](const std::vector<Eigen::VectorXd>& v) {
        Eigen::VectorXd r(3);
        r << 10.0 * (v[0][1] - v[0][0] * v[0][0]), 1.0 - v[0][0], v[0][2];
        return r;
      },
      Eigen::VectorXd(), RobustLoss::None());

  SolveOptions opts;
  opts.max_iterations = 200;
  const SolveSummary summary = solve_lm(problem, opts);
  REQUIRE((problem.point_value(b) - Vec3(1.0, 1.0, 0.0)).norm() < 1e-6);
  REQUIRE(summary.final_cost < 1e-12);
}

TEST_CASE("twist blocks converge through the manifold update", "[nlls]") {
  std::mt19937_64 rng(301);
  for (int trial = 0; trial < 10; ++trial) {
    const Pose target = exp_map(oracle::random_twist(rng, 1.8, 3.0));
    Problem problem;
    const int b = problem.add_twist_block(Twist::Zero());
    problem.add_residual(
        {b}, 6,
        [target](const std::vector<Eigen::VectorXd>& v) {
          return Eigen::VectorXd(log_map(exp_map(Twist(v[0])) * inverse(target)));
        },
        Eigen::VectorXd(), RobustLoss::None());

    const SolveSummary summary = solve_lm(problem);
    REQUIRE(summary.final_cost < 1e-16);
    const Pose got = exp_map(problem.twist_value(b));
    REQUIRE((got.matrix() - target.matrix()).cwiseAbs().maxCoeff() < 1e-7);
  }
}

TEST_CASE("frozen blocks stay bit-identical", "[nlls]") {
  Problem problem;
  const int a = problem.add_twist_block(
      (Twist() << 0.3, -0.2, 0.1, 0.05, -0.02, 0.04).finished());
  const int b = problem.add_twist_block(Twist::Zero());
  const Pose target = exp_map((Twist() << 1.0, 0.5, -0.3, 0.2, 0.1, -0.1).finished());

  const auto pull = [target](const std::vector<Eigen::VectorXd>& v) {
    return Eigen::VectorXd(
        log_map(exp_map(Twist(v[0])) * inverse(target)));
  };
  problem.add_residual({a}, 6, pull, Eigen::VectorXd(), RobustLoss::None());
  problem.add_residual({b}, 6, pull, Eigen::VectorXd(), RobustLoss::None());

  problem.set_frozen(a, true);
  const Twist before = problem.twist_value(a);
  solve_lm(problem);
  const Twist after = problem.twist_value(a);
  for (int i = 0; i < 6; ++i) REQUIRE(before[i] == after[i]);
  REQUIRE((exp_map(problem.twist_value(b)).matrix() - target.matrix())
              .cwiseAbs()
              .maxCoeff() < 1e-7);
}

TEST_CASE("huber keeps an outlier from dragging the fit", "[nlls]") {
  const auto fit = [](RobustLoss loss) {
    Problem problem;
    const int b = problem.add_point_block(Vec3(0.0, 0.0, 0.0));
    for (int i = 0; i < 20; ++i) {
      problem.add_residual(
          {b}, 1,
          [](const std::vector<Eigen::VectorXd>& v) {
            return Eigen::VectorXd::Constant(1, v[0][0] - 1.0);
          },
          Eigen::VectorXd(), loss);
    }
    problem.add_residual(
        {b}, 1,
        [](const std::vector<Eigen::VectorXd>& v) {
          return Eigen::VectorXd::Constant(1, v[0][0] - 100.0);
        },
        Eigen::VectorXd(), loss);
    // Tie the unused coordinates down.
    problem.add_residual(
        {b}, 2,
        [](const std::vector<Eigen::VectorXd>& v) {
          return Eigen::VectorXd(v[0].tail(2));
        },
        Eigen::VectorXd(), RobustLoss::None());
    solve_lm(problem);
    return problem.point_value(b)[0];
  };

  const double robust = fit(RobustLoss::Huber(1.0));
  const double quadratic = fit(RobustLoss::None());
  REQUIRE(robust < 1.6);
  REQUIRE(quadratic > 4.0);  // pulled to the mean (20*1 + 100)/21 ~ 5.7
}

TEST_CASE("solution is invariant to residual ordering", "[nlls]") {
  std::mt19937_64 rng(303);
  const Pose target = exp_map(oracle::random_twist(rng, 1.0, 2.0));
  std::vector<Vec3> points, obs;
  for (int i = 0; i < 30; ++i) {
    const Vec3 p = 5.0 * Vec3(oracle::random_unit(rng));
    points.push_back(p);
    obs.push_back(target * p);
  }

  const auto solve_with_order = [&](bool reversed) {
    Problem problem;
    const int b = problem.add_twist_block(Twist::Zero());
    std::vector<int> order(points.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    if (reversed) std::reverse(order.begin(), order.end());
    for (int i : order) {
      const Vec3 p = points[i], o = obs[i];
      problem.add_residual(
          {b}, 3,
          [p, o](const std::vector<Eigen::VectorXd>& v) {
            return Eigen::VectorXd(exp_map(Twist(v[0])) * p - o);
          },
          Eigen::VectorXd(), RobustLoss::Huber(1.0));
    }
    solve_lm(problem);
    return problem.twist_value(b);
  };

  const Twist fwd = solve_with_order(false);
  const Twist rev = solve_with_order(true);
  REQUIRE((fwd - rev).norm() < 1e-10);
}

TEST_CASE("numeric jacobian matches an analytic pinhole jacobian", "[nlls]") {
  std::mt19937_64 rng(307);
  const double fx = 400.0, fy = 380.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Vec3 X(2.0 * oracle::random_unit(rng)[0],
                 1.5 * oracle::random_unit(rng)[1],
                 6.0 + oracle::random_unit(rng)[2]);
    const auto fn = [&](const Eigen::VectorXd& x) {
      Eigen::VectorXd uv(2);
      uv << fx * x[0] / x[2], fy * x[1] / x[2];
      return uv;
    };
    const Eigen::MatrixXd J = numeric_jacobian(fn, X, 1e-6);
    Eigen::Matrix<double, 2, 3> Ja;
    const double iz = 1.0 / X.z();
    Ja << fx * iz, 0.0, -fx * X.x() * iz * iz,  //
        0.0, fy * iz, -fy * X.y() * iz * iz;
    REQUIRE((J - Ja).norm() / Ja.norm() < 1e-5);
  }
}

TEST_CASE("grouped losses robustify each pair separately", "[nlls]") {
  Problem problem;
  const int b = problem.add_point_block(Vec3::Zero());
  // Rows 0-1 small, rows 2-3 large; only the second pair saturates.
  problem.add_residual(
      {b}, 4,
      [](const std::vector<Eigen::VectorXd>&) {
        Eigen::VectorXd r(4);
        r << 0.3, 0.4, 3.0, 4.0;
        return r;
      },
      Eigen::VectorXd(), RobustLoss::Huber(1.0), 2);

  const RobustLoss loss = RobustLoss::Huber(1.0);
  const double expected = loss.rho(0.25) + loss.rho(25.0);
  REQUIRE(problem.cost() == Catch::Approx(expected).margin(1e-14));
  REQUIRE(problem.cost() < 0.25 + 25.0);
}

TEST_CASE("schur elimination matches the dense solve", "[nlls]") {
  std::mt19937_64 rng(311);
  std::normal_distribution<double> noise(0.0, 0.01);

  const auto build = [&](Problem& problem, std::vector<int>& point_ids,
                         std::vector<int>& pose_ids) {
    std::mt19937_64 local(311);
    std::normal_distribution<double> jitter(0.0, 0.05);
    const Pose T0 = exp_map((Twist() << 0.1, 0.0, 0.0, 0.0, 0.05, 0.0).finished());
    const Pose T1 = exp_map((Twist() << -0.1, 0.1, 0.0, 0.02, 0.0, 0.0).finished());
    pose_ids.push_back(problem.add_twist_block(Twist::Zero()));
    pose_ids.push_back(problem.add_twist_block(Twist::Zero()));
    for (int i = 0; i < 20; ++i) {
      const Vec3 gt = Vec3(2.0 * jitter(local), 2.0 * jitter(local),
                           4.0 + 0.5 * jitter(local));
      const int pb = problem.add_point_block(gt + Vec3(jitter(local), jitter(local), jitter(local)));
      point_ids.push_back(pb);
      for (const auto& [pose_block, T] :
           {std::pair{pose_ids[0], T0}, std::pair{pose_ids[1], T1}}) {
        const Vec3 measured = inverse(T) * gt;
        problem.add_residual(
            {pose_block, pb}, 3,
            [measured](const std::vector<Eigen::VectorXd>& v) {
              const Pose Twb = exp_map(Twist(v[0]));
              return Eigen::VectorXd(inverse(Twb) * Vec3(v[1]) - measured);
            },
            Eigen::VectorXd(), RobustLoss::None());
      }
    }
  };

  Problem dense, schur;
  std::vector<int> pts_a, poses_a, pts_b, poses_b;
  build(dense, pts_a, poses_a);
  build(schur, pts_b, poses_b);
  // Gauge: pin the first pose.
  dense.set_frozen(poses_a[0], true);
  schur.set_frozen(poses_b[0], true);

  SolveOptions dense_opts;
  dense_opts.min_points_for_schur = 1 << 20;
  SolveOptions schur_opts;
  schur_opts.min_points_for_schur = 4;

  const SolveSummary sd = solve_lm(dense, dense_opts);
  const SolveSummary ss = solve_lm(schur, schur_opts);
  REQUIRE(sd.final_cost == Catch::Approx(ss.final_cost).margin(1e-12));
  REQUIRE((dense.twist_value(poses_a[1]) - schur.twist_value(poses_b[1]))
              .norm() < 1e-8);
  for (std::size_t i = 0; i < pts_a.size(); ++i) {
    REQUIRE((dense.point_value(pts_a[i]) - schur.point_value(pts_b[i]))
                .norm() < 1e-8);
  }
}

TEST_CASE("non-finite residuals raise NumericalFailure", "[nlls]") {
  Problem problem;
  const int b = problem.add_point_block(Vec3::Zero());
  problem.add_residual(
      {b}, 1,
      [](const std::vector<Eigen::VectorXd>&) {
        return Eigen::VectorXd::Constant(1,
                                         std::numeric_limits<double>::quiet_NaN());
      },
      Eigen::VectorXd(), RobustLoss::None());
  REQUIRE_THROWS_AS(solve_lm(problem), NumericalFailure);
}
