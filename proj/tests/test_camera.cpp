#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "ctslam/camera.hpp"
#include "oracles.hpp"

using namespace ctslam;

namespace {

CameraModel make_camera(int id, const Pose& T_kb, double fire = 0.0) {
  CameraModel cam;
  cam.id = id;
  cam.fx = 320.0;
  cam.fy = 300.0;
  cam.cx = 480.0;
  cam.cy = 300.0;
  cam.width = 960;
  cam.height = 600;
  cam.T_kb = T_kb;
  cam.fire_offset = fire;
  return cam;
}

RigCalibration small_rig() {
  RigCalibration rig;
  Pose left;  // camera frame == body frame
  Pose right;
  right.t = Vec3(-0.4, 0.0, 0.0);  // body point shifted => camera 0.4 right
  rig.cameras.push_back(make_camera(0, left, 0.0));
  rig.cameras.push_back(make_camera(1, right, 0.01));
  rig.overlap_pairs = {{0, 1}};
  rig.init_pair = {0, 1};
  rig.sweep_period = 0.1;
  rig.surround_cameras = {0, 1};
  return rig;
}

}  // namespace

TEST_CASE("project produces textbook pinhole values", "[camera]") {
  CameraModel cam = make_camera(0, Pose::Identity());
  cam.fx = 100.0;
  cam.fy = 200.0;
  cam.cx = 50.0;
  cam.cy = 60.0;
  const Vec2 uv = project(cam, Vec3(0.1, -0.2, 2.0), Pose::Identity());
  REQUIRE(uv.x() == Catch::Approx(55.0).margin(1e-12));
  REQUIRE(uv.y() == Catch::Approx(40.0).margin(1e-12));
}

TEST_CASE("project rejects points at or behind the camera plane", "[camera]") {
  const CameraModel cam = make_camera(0, Pose::Identity());
  REQUIRE_THROWS_AS(project(cam, Vec3(0.0, 0.0, -1.0), Pose::Identity()),
                    BehindCamera);
  REQUIRE_THROWS_AS(project(cam, Vec3(0.1, 0.1, 1e-7), Pose::Identity()),
                    BehindCamera);
  REQUIRE_NOTHROW(project(cam, Vec3(0.1, 0.1, 1e-5), Pose::Identity()));
}

TEST_CASE("project respects body pose and extrinsics", "[camera]") {
  std::mt19937_64 rng(101);
  const RigCalibration rig = small_rig();
  for (int i = 0; i < 50; ++i) {
    const Pose T_wb = exp_map(oracle::random_twist(rng, 0.6, 3.0));
    const Vec3 X_body(0.5 * oracle::random_unit(rng)[0],
                      0.5 * oracle::random_unit(rng)[1],
                      8.0 + 2.0 * oracle::random_unit(rng)[2]);
    const Vec3 X_world = T_wb * X_body;
    for (const auto& cam : rig.cameras) {
      const Vec3 Xc = cam.T_kb * X_body;
      const Vec2 expect(cam.fx * Xc.x() / Xc.z() + cam.cx,
                        cam.fy * Xc.y() / Xc.z() + cam.cy);
      REQUIRE((project(cam, X_world, T_wb) - expect).norm() < 1e-9);
    }
  }
}

TEST_CASE("triangulate recovers synthetic stereo points", "[camera]") {
  std::mt19937_64 rng(103);
  const RigCalibration rig = small_rig();
  std::uniform_real_distribution<double> ux(-2.0, 2.0), uz(4.0, 30.0);
  for (int i = 0; i < 200; ++i) {
    const Pose T_wb = exp_map(oracle::random_twist(rng, 0.4, 2.0));
    const Vec3 X = T_wb * Vec3(ux(rng), 0.5 * ux(rng), uz(rng));
    const Observation2D a{&rig.cameras[0], T_wb,
                          project(rig.cameras[0], X, T_wb)};
    const Observation2D b{&rig.cameras[1], T_wb,
                          project(rig.cameras[1], X, T_wb)};
    REQUIRE((triangulate(a, b) - X).norm() < 1e-9);
  }
}

TEST_CASE("triangulate flags degenerate geometry", "[camera]") {
  const RigCalibration rig = small_rig();
  const Pose T_wb;
  const Vec3 X(0.3, -0.2, 12.0);

  // Same physical camera twice: coincident centers.
  const Observation2D a{&rig.cameras[0], T_wb, project(rig.cameras[0], X, T_wb)};
  const Observation2D a2{&rig.cameras[0], T_wb,
                         project(rig.cameras[0], X, T_wb) + Vec2(1.0, 0.0)};
  REQUIRE_THROWS_AS(triangulate(a, a2), DegenerateGeometry);

  // Distinct centers but matching pixels of a point at infinity: both rays
  // run parallel to the optical axis.
  const Vec2 center(rig.cameras[0].cx, rig.cameras[0].cy);
  const Observation2D p1{&rig.cameras[0], T_wb, center};
  const Observation2D p2{&rig.cameras[1], T_wb, center};
  REQUIRE_THROWS_AS(triangulate(p1, p2), DegenerateGeometry);
}

TEST_CASE("triangulate flags points behind a camera", "[camera]") {
  RigCalibration rig = small_rig();
  const Pose T_wb;
  const Vec3 X(0.2, 0.1, -6.0);  // behind both cameras
  const auto fake_pixel = [](const CameraModel& cam, const Vec3& p) {
    const Vec3 Xc = cam.T_kb * p;
    return Vec2(cam.fx * Xc.x() / Xc.z() + cam.cx,
                cam.fy * Xc.y() / Xc.z() + cam.cy);
  };
  const Observation2D a{&rig.cameras[0], T_wb, fake_pixel(rig.cameras[0], X)};
  const Observation2D b{&rig.cameras[1], T_wb, fake_pixel(rig.cameras[1], X)};
  REQUIRE_THROWS_AS(triangulate(a, b), NegativeDepth);
}

TEST_CASE("triangulate tolerates pixel noise", "[camera]") {
  std::mt19937_64 rng(107);
  std::normal_distribution<double> noise(0.0, 0.5);
  const RigCalibration rig = small_rig();
  const Pose T_wb;
  // Stereo depth error ~ z^2 / (f b) * sigma_d ~= 0.14 m at z = 5 m.
  for (int i = 0; i < 50; ++i) {
    const Vec3 X(0.4 * noise(rng), 0.4 * noise(rng), 5.0 + noise(rng));
    Observation2D a{&rig.cameras[0], T_wb, project(rig.cameras[0], X, T_wb)};
    Observation2D b{&rig.cameras[1], T_wb, project(rig.cameras[1], X, T_wb)};
    a.uv += Vec2(noise(rng), noise(rng));
    b.uv += Vec2(noise(rng), noise(rng));
    REQUIRE((triangulate(a, b) - X).norm() < 0.5);
  }
}

TEST_CASE("calibration roundtrips through JSON", "[camera]") {
  const RigCalibration rig = small_rig();
  const std::string text = serialize_calibration(rig);
  const RigCalibration back = parse_calibration(text);
  REQUIRE(back.cameras.size() == 2);
  REQUIRE(back.cameras[1].id == 1);
  REQUIRE(back.cameras[1].fx == Catch::Approx(320.0));
  REQUIRE(back.cameras[1].fire_offset == Catch::Approx(0.01));
  REQUIRE((back.cameras[1].T_kb.matrix() - rig.cameras[1].T_kb.matrix())
              .cwiseAbs()
              .maxCoeff() < 1e-12);
  REQUIRE(back.overlap_pairs == rig.overlap_pairs);
  REQUIRE(back.init_pair == rig.init_pair);
  REQUIRE(back.sweep_period == Catch::Approx(0.1));
  REQUIRE(back.surround_cameras == rig.surround_cameras);
}

TEST_CASE("calibration rejects missing fields with a diagnostic", "[camera]") {
  nlohmann::json j = nlohmann::json::parse(serialize_calibration(small_rig()));
  j["cameras"][1].erase("fy");
  try {
    parse_calibration(j.dump());
    FAIL("expected InvalidInput");
  } catch (const InvalidInput& e) {
    const std::string msg = e.what();
    REQUIRE(msg.find("cameras[1]") != std::string::npos);
    REQUIRE(msg.find("'fy'") != std::string::npos);
  }

  try {
    parse_calibration("{\n  \"cameras\": [\n    {broken\n  ]\n}");
    FAIL("expected InvalidInput");
  } catch (const InvalidInput& e) {
    REQUIRE(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("surround ring defaults to all cameras in file order", "[camera]") {
  nlohmann::json j = nlohmann::json::parse(serialize_calibration(small_rig()));
  j.erase("surround_cameras");
  const RigCalibration rig = parse_calibration(j.dump());
  REQUIRE(rig.surround_cameras == std::vector<int>{0, 1});
  REQUIRE_THROWS_AS(rig.camera(9), InvalidInput);
}

TEST_CASE("in_bounds honors margins", "[camera]") {
  const CameraModel cam = make_camera(0, Pose::Identity());
  REQUIRE(in_bounds(cam, Vec2(0.0, 0.0)));
  REQUIRE(in_bounds(cam, Vec2(959.0, 599.0)));
  REQUIRE_FALSE(in_bounds(cam, Vec2(-0.5, 10.0)));
  REQUIRE_FALSE(in_bounds(cam, Vec2(10.0, 599.5)));
  REQUIRE_FALSE(in_bounds(cam, Vec2(5.0, 5.0), 8.0));
}
