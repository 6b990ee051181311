#include <catch2/catch_amalgamated.hpp>

#include <set>
#include <sstream>

#include "ctslam/matching.hpp"
#include "ctslam/sim.hpp"
#include "test_rigs.hpp"

using namespace ctslam;

namespace {

SimScenario base_scenario(std::uint64_t seed = 1) {
  SimScenario s;
  s.trajectory = straight_trajectory(5.0);
  s.duration = 4.0;
  s.rig = testrig::stereo_surround_rig(2);
  s.n_landmarks = 400;
  s.depth_min = 5.0;
  s.depth_max = 25.0;
  s.bit_flip_p = 0.0;
  s.seed = seed;
  return s;
}

std::string serialize_all(const SimData& data) {
  std::ostringstream out;
  for (std::size_t i = 0; i < data.frames.size(); ++i) {
    out << serialize_camera_frame(data.frames[i], static_cast<int>(i)) << "\n";
  }
  return out.str();
}

}  // namespace

TEST_CASE("noiseless keypoints reproject exactly", "[sim]") {
  const SimScenario scenario = base_scenario();
  const SimData data = generate(scenario);

  std::size_t checked = 0;
  for (std::size_t f = 0; f < data.frames.size(); ++f) {
    const CameraFrame& frame = data.frames[f];
    const CameraModel& cam = scenario.rig.camera(frame.camera_id);
    const Pose T_wb = scenario.trajectory(frame.t);
    for (std::size_t j = 0; j < frame.keypoints.size(); ++j) {
      const int lm = data.truth[f][j].landmark;
      const Eigen::Vector2d uv = project(cam, data.landmarks[lm], T_wb);
      REQUIRE((uv - frame.keypoints[j].uv).norm() < 1e-9);
      REQUIRE_FALSE(data.truth[f][j].outlier);
      REQUIRE(frame.descriptors[j] == data.landmark_ids[lm]);
      ++checked;
    }
  }
  REQUIRE(checked > 5000);
}

TEST_CASE("capture times follow the staggered schedule", "[sim]") {
  const SimScenario scenario = base_scenario();
  const SimData data = generate(scenario);
  const std::size_t n_cams = scenario.rig.cameras.size();

  for (std::size_t f = 0; f < data.frames.size(); ++f) {
    const int sweep = static_cast<int>(f / n_cams);
    const CameraModel& cam = scenario.rig.cameras[f % n_cams];
    REQUIRE(data.frames[f].camera_id == cam.id);
    REQUIRE(data.frames[f].t ==
            Catch::Approx(sweep * scenario.rig.sweep_period + cam.fire_offset)
                .margin(1e-15));
  }

  RigCalibration rig = testrig::stereo_surround_rig(4);
  stagger_offsets(rig, 0.06);
  for (std::size_t k = 0; k < rig.cameras.size(); ++k) {
    REQUIRE(rig.cameras[k].fire_offset ==
            Catch::Approx(0.06 * k / rig.cameras.size()).margin(1e-15));
  }
}

TEST_CASE("outlier fraction lands near the requested rate", "[sim]") {
  SimScenario scenario = base_scenario(3);
  scenario.outlier_fraction = 0.3;
  const SimData data = generate(scenario);

  std::size_t total = 0, displaced = 0;
  for (std::size_t f = 0; f < data.frames.size(); ++f) {
    const CameraFrame& frame = data.frames[f];
    const CameraModel& cam = scenario.rig.camera(frame.camera_id);
    const Pose T_wb = scenario.trajectory(frame.t);
    for (std::size_t j = 0; j < frame.keypoints.size(); ++j) {
      const Eigen::Vector2d uv =
          project(cam, data.landmarks[data.truth[f][j].landmark], T_wb);
      const double d = (uv - frame.keypoints[j].uv).norm();
      ++total;
      if (d >= 20.0) ++displaced;
      if (data.truth[f][j].outlier) {
        REQUIRE(d >= 20.0);
        REQUIRE(in_bounds(cam, frame.keypoints[j].uv));
      } else {
        REQUIRE(d < 1e-9);
      }
    }
  }
  const double fraction = static_cast<double>(displaced) / total;
  REQUIRE(fraction > 0.28);
  REQUIRE(fraction < 0.32);
}

TEST_CASE("fixed seeds reproduce byte-identical streams", "[sim]") {
  SimScenario scenario = base_scenario(17);
  scenario.noise_px = 1.0;
  scenario.outlier_fraction = 0.1;
  scenario.bit_flip_p = 0.02;

  const SimData a = generate(scenario);
  const SimData b = generate(scenario);
  REQUIRE(serialize_all(a) == serialize_all(b));
  REQUIRE(a.gt_samples.size() == b.gt_samples.size());
  for (std::size_t i = 0; i < a.gt_samples.size(); ++i) {
    REQUIRE(a.gt_samples[i].t == b.gt_samples[i].t);
    REQUIRE(a.gt_samples[i].pose.matrix() == b.gt_samples[i].pose.matrix());
  }

  SimScenario other = scenario;
  other.seed = 18;
  REQUIRE(serialize_all(generate(other)) != serialize_all(a));
}

TEST_CASE("descriptor corruption stays matchable", "[sim]") {
  SimScenario scenario = base_scenario(23);
  scenario.bit_flip_p = 0.02;
  const SimData data = generate(scenario);

  // Mean corruption should sit near 256 * 0.02 = 5.12 flipped bits.
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t f = 0; f < data.frames.size(); ++f) {
    for (std::size_t j = 0; j < data.frames[f].keypoints.size(); ++j) {
      sum += hamming(data.frames[f].descriptors[j],
                     data.landmark_ids[data.truth[f][j].landmark]);
      ++count;
    }
  }
  REQUIRE(sum / count > 3.5);
  REQUIRE(sum / count < 7.0);

  // Ratio-test matching across two frames of the same camera recovers
  // planted correspondences almost perfectly.
  const std::size_t n_cams = scenario.rig.cameras.size();
  const CameraFrame& fa = data.frames[0];
  const CameraFrame& fb = data.frames[n_cams];  // next sweep, same camera
  const auto matches = match_ratio(fa.descriptors, fb.descriptors, 0.7);
  REQUIRE(matches.size() > 50);
  std::size_t correct = 0;
  for (const Match& m : matches) {
    if (data.truth[0][m.a].landmark == data.truth[n_cams][m.b].landmark) {
      ++correct;
    }
  }
  REQUIRE(static_cast<double>(correct) / matches.size() >= 0.99);
}

TEST_CASE("square loop closes and keeps constant speed", "[sim]") {
  const double side = 100.0, speed = 10.0, radius = 5.0;
  const GtTrajectory traj = square_loop_trajectory(side, speed, radius);
  const double perimeter = 4.0 * (side - 2.0 * radius) + 2.0 * M_PI * radius;
  const double lap = perimeter / speed;

  const Pose start = traj(0.0);
  const Pose closed = traj(lap);
  REQUIRE((closed.matrix() - start.matrix()).cwiseAbs().maxCoeff() < 1e-9);

  double max_step = 0.0, min_step = 1e9;
  Vec3 prev = traj(0.0).t;
  for (int i = 1; i <= 4000; ++i) {
    const double t = lap * i / 4000.0;
    const Vec3 cur = traj(t).t;
    max_step = std::max(max_step, (cur - prev).norm());
    min_step = std::min(min_step, (cur - prev).norm());
    prev = cur;
  }
  const double expected = speed * lap / 4000.0;
  REQUIRE(max_step < expected * 1.001);
  REQUIRE(min_step > expected * 0.999);

  // Heading follows the path tangent.
  for (double t : {3.0, 11.0, 19.5, 27.0}) {
    const Vec3 vel = (traj(t + 1e-5).t - traj(t - 1e-5).t) / 2e-5;
    const Vec3 fwd = traj(t).R.col(0);
    REQUIRE(vel.normalized().dot(fwd) > 0.999999);
  }

  REQUIRE_THROWS_AS(square_loop_trajectory(8.0, 1.0, 5.0), InvalidInput);
}

TEST_CASE("sine sweep matches its analytic form", "[sim]") {
  const GtTrajectory traj = sine_swept_trajectory(8.0, 2.0, 0.25);
  for (double t : {0.0, 0.7, 1.3, 2.9}) {
    const Pose T = traj(t);
    REQUIRE(T.t.x() == Catch::Approx(8.0 * t).margin(1e-12));
    REQUIRE(T.t.y() ==
            Catch::Approx(2.0 * std::sin(2.0 * M_PI * 0.25 * t)).margin(1e-12));
    const Vec3 vel = (traj(t + 1e-6).t - traj(t - 1e-6).t) / 2e-6;
    REQUIRE(vel.normalized().dot(T.R.col(0)) > 0.999999);
  }
}

TEST_CASE("landmark cloud respects scenario bounds", "[sim]") {
  const SimScenario scenario = base_scenario(29);
  const SimData data = generate(scenario);
  REQUIRE(data.landmarks.size() == (std::size_t)scenario.n_landmarks);
  REQUIRE(data.landmark_ids.size() == data.landmarks.size());
  std::set<Descriptor> unique_ids(data.landmark_ids.begin(),
                                  data.landmark_ids.end());
  REQUIRE(unique_ids.size() == data.landmark_ids.size());
  for (const Vec3& p : data.landmarks) {
    REQUIRE(p.allFinite());
  }
  REQUIRE(data.gt_samples.front().t == scenario.t_start);
  REQUIRE(data.gt_samples.back().t ==
          Catch::Approx(scenario.t_start + scenario.duration).margin(1e-6));
}
