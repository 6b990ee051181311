#pragma once

// camera.hpp - Pinhole camera model, multi-camera rig calibration and
// two-view triangulation. Per-camera extrinsics T_kb map body coordinates
// into the camera frame; each camera fires at a fixed offset within the
// rig's sweep period.

#include <Eigen/Dense>

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ctslam/errors.hpp"
#include "ctslam/lie.hpp"

namespace ctslam {

using Vec2 = Eigen::Vector2d;

struct CameraModel {
  int id = 0;
  double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
  int width = 0, height = 0;
  Pose T_kb;                // body -> camera
  double fire_offset = 0.0; // seconds after the sweep reference time
};

struct RigCalibration {
  std::vector<CameraModel> cameras;
  std::vector<std::pair<int, int>> overlap_pairs;
  std::pair<int, int> init_pair{0, 0};
  double sweep_period = 0.1;
  // Ring of outward-facing cameras, in rotational order; loop-closure
  // scenario enumeration rotates indices within this list.
  std::vector<int> surround_cameras;

  const CameraModel& camera(int id) const {
    for (const auto& cam : cameras)
      if (cam.id == id) return cam;
    throw InvalidInput("rig: unknown camera id " + std::to_string(id));
  }
};

namespace detail {
inline constexpr double kMinDepth = 1e-6;
inline constexpr double kMinRayAngle = 1e-8;
}  // namespace detail

/// @brief Project a world point through a camera at body pose T_wb.
/// Throws BehindCamera at depth <= 1e-6.
inline Vec2 project(const CameraModel& cam, const Vec3& X_world,
                    const Pose& T_wb) {
  const Vec3 Xc = cam.T_kb * (inverse(T_wb) * X_world);
  if (Xc.z() <= detail::kMinDepth) {
    throw BehindCamera("project: point at non-positive depth");
  }
  return Vec2(cam.fx * Xc.x() / Xc.z() + cam.cx,
              cam.fy * Xc.y() / Xc.z() + cam.cy);
}

inline bool in_bounds(const CameraModel& cam, const Vec2& uv,
                      double margin = 0.0) {
  return uv.x() >= margin && uv.x() <= cam.width - 1 - margin &&
         uv.y() >= margin && uv.y() <= cam.height - 1 - margin;
}

/// One ray for triangulation: camera, its body pose at capture time and the
/// observed pixel.
struct Observation2D {
  const CameraModel* cam = nullptr;
  Pose T_wb;
  Vec2 uv = Vec2::Zero();
};

/// @brief Two-view triangulation: DLT followed by one Gauss-Newton step on
/// the reprojection error.
///
/// Throws DegenerateGeometry when the rays are parallel within 1e-8 rad (or
/// the camera centers coincide) and NegativeDepth when the solution lands
/// behind either camera.
inline Vec3 triangulate(const Observation2D& a, const Observation2D& b) {
  const auto camera_world = [](const Observation2D& o) {
    return inverse(o.cam->T_kb * inverse(o.T_wb));  // camera -> world
  };
  const auto ray_world = [](const Observation2D& o) {
    const Vec3 dir_cam((o.uv.x() - o.cam->cx) / o.cam->fx,
                       (o.uv.y() - o.cam->cy) / o.cam->fy, 1.0);
    const Pose T_wk = inverse(o.cam->T_kb * inverse(o.T_wb));
    return Vec3(T_wk.R * dir_cam.normalized());
  };

  const Pose T_wk_a = camera_world(a);
  const Pose T_wk_b = camera_world(b);
  if ((T_wk_a.t - T_wk_b.t).norm() < 1e-12) {
    throw DegenerateGeometry("triangulate: coincident camera centers");
  }
  const Vec3 da = ray_world(a), db = ray_world(b);
  const double angle = std::atan2(da.cross(db).norm(), da.dot(db));
  if (angle < detail::kMinRayAngle) {
    throw DegenerateGeometry("triangulate: rays parallel within 1e-8 rad");
  }

  // DLT rows u * P2 - P0 and v * P2 - P1 from each view.
  Eigen::Matrix4d A;
  const auto fill_rows = [&](const Observation2D& o, int row) {
    const Pose T_kw = o.cam->T_kb * inverse(o.T_wb);
    Eigen::Matrix<double, 3, 4> P;
    Eigen::Matrix3d K = Eigen::Matrix3d::Identity();
    K(0, 0) = o.cam->fx;
    K(1, 1) = o.cam->fy;
    K(0, 2) = o.cam->cx;
    K(1, 2) = o.cam->cy;
    P.leftCols<3>() = K * T_kw.R;
    P.rightCols<1>() = K * T_kw.t;
    A.row(row) = o.uv.x() * P.row(2) - P.row(0);
    A.row(row + 1) = o.uv.y() * P.row(2) - P.row(1);
  };
  fill_rows(a, 0);
  fill_rows(b, 2);

  const Eigen::JacobiSVD<Eigen::Matrix4d> svd(A, Eigen::ComputeFullV);
  const Eigen::Vector4d Xh = svd.matrixV().col(3);
  if (std::abs(Xh[3]) < 1e-14) {
    throw DegenerateGeometry("triangulate: point at infinity");
  }
  Vec3 X = Xh.head<3>() / Xh[3];

  const auto depth = [](const Observation2D& o, const Vec3& p) {
    return (o.cam->T_kb * (inverse(o.T_wb) * p)).z();
  };
  if (depth(a, X) <= 0.0 || depth(b, X) <= 0.0) {
    throw NegativeDepth("triangulate: point behind a camera");
  }

  // One Gauss-Newton step on the stacked reprojection residual.
  Eigen::Matrix<double, 4, 3> J;
  Eigen::Vector4d r;
  const auto residual_rows = [&](const Observation2D& o, int row) {
    const Pose T_kw = o.cam->T_kb * inverse(o.T_wb);
    const Vec3 Xc = T_kw * X;
    const double iz = 1.0 / Xc.z();
    r[row] = o.cam->fx * Xc.x() * iz + o.cam->cx - o.uv.x();
    r[row + 1] = o.cam->fy * Xc.y() * iz + o.cam->cy - o.uv.y();
    Eigen::Matrix<double, 2, 3> dpi;
    dpi << o.cam->fx * iz, 0.0, -o.cam->fx * Xc.x() * iz * iz,  //
        0.0, o.cam->fy * iz, -o.cam->fy * Xc.y() * iz * iz;
    J.block<2, 3>(row, 0) = dpi * T_kw.R;
  };
  residual_rows(a, 0);
  residual_rows(b, 2);
  const Eigen::Matrix3d H = J.transpose() * J;
  const Eigen::LDLT<Eigen::Matrix3d> ldlt(H);
  if (ldlt.info() == Eigen::Success) {
    X -= ldlt.solve(J.transpose() * r);
  }

  if (depth(a, X) <= 0.0 || depth(b, X) <= 0.0) {
    throw NegativeDepth("triangulate: point behind a camera");
  }
  return X;
}

// ---------------------------------------------------------------------------
// Calibration file I/O
// ---------------------------------------------------------------------------

namespace detail {

inline int line_of_byte(const std::string& text, std::size_t byte) {
  int line = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') ++line;
  }
  return line;
}

template <class J>
const J& require_field(const J& j, const char* key, const std::string& where) {
  if (!j.contains(key)) {
    throw InvalidInput("calibration: " + where + ": missing field '" + key +
                       "'");
  }
  return j.at(key);
}

}  // namespace detail

inline RigCalibration parse_calibration(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInput("calibration: parse error at line " +
                       std::to_string(detail::line_of_byte(text, e.byte)) +
                       ": " + e.what());
  }

  RigCalibration rig;
  const auto& cams = detail::require_field(j, "cameras", "top level");
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const std::string where = "cameras[" + std::to_string(i) + "]";
    const auto& c = cams[i];
    CameraModel cam;
    cam.id = detail::require_field(c, "id", where).template get<int>();
    cam.fx = detail::require_field(c, "fx", where).template get<double>();
    cam.fy = detail::require_field(c, "fy", where).template get<double>();
    cam.cx = detail::require_field(c, "cx", where).template get<double>();
    cam.cy = detail::require_field(c, "cy", where).template get<double>();
    cam.width = detail::require_field(c, "width", where).template get<int>();
    cam.height = detail::require_field(c, "height", where).template get<int>();
    const auto& m = detail::require_field(c, "T_kb", where);
    if (m.size() != 16) {
      throw InvalidInput("calibration: " + where +
                         ": T_kb must hold 16 row-major entries");
    }
    Mat4 T;
    for (int r = 0; r < 4; ++r)
      for (int col = 0; col < 4; ++col)
        T(r, col) = m[static_cast<std::size_t>(4 * r + col)].template get<double>();
    cam.T_kb = Pose::FromMatrix(T);
    cam.fire_offset =
        detail::require_field(c, "fire_offset_s", where).template get<double>();
    rig.cameras.push_back(cam);
  }

  for (const auto& p : detail::require_field(j, "overlap_pairs", "top level")) {
    rig.overlap_pairs.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
  }
  const auto& ip = detail::require_field(j, "init_pair", "top level");
  rig.init_pair = {ip.at(0).get<int>(), ip.at(1).get<int>()};
  rig.sweep_period =
      detail::require_field(j, "sweep_period_s", "top level").get<double>();

  if (j.contains("surround_cameras")) {
    for (const auto& id : j.at("surround_cameras"))
      rig.surround_cameras.push_back(id.get<int>());
  } else {
    for (const auto& cam : rig.cameras) rig.surround_cameras.push_back(cam.id);
  }
  return rig;
}

inline RigCalibration load_calibration(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("calibration: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_calibration(ss.str());
}

inline std::string serialize_calibration(const RigCalibration& rig) {
  nlohmann::ordered_json j;
  j["cameras"] = nlohmann::ordered_json::array();
  for (const auto& cam : rig.cameras) {
    nlohmann::ordered_json c;
    c["id"] = cam.id;
    c["fx"] = cam.fx;
    c["fy"] = cam.fy;
    c["cx"] = cam.cx;
    c["cy"] = cam.cy;
    c["width"] = cam.width;
    c["height"] = cam.height;
    std::vector<double> m(16);
    const Mat4 T = cam.T_kb.matrix();
    for (int r = 0; r < 4; ++r)
      for (int col = 0; col < 4; ++col) m[static_cast<std::size_t>(4 * r + col)] = T(r, col);
    c["T_kb"] = m;
    c["fire_offset_s"] = cam.fire_offset;
    j["cameras"].push_back(c);
  }
  j["overlap_pairs"] = nlohmann::ordered_json::array();
  for (const auto& p : rig.overlap_pairs)
    j["overlap_pairs"].push_back({p.first, p.second});
  j["init_pair"] = {rig.init_pair.first, rig.init_pair.second};
  j["sweep_period_s"] = rig.sweep_period;
  j["surround_cameras"] = rig.surround_cameras;
  return j.dump(2) + "\n";
}

inline void save_calibration(const RigCalibration& rig,
                             const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("calibration: cannot write " + path);
  out << serialize_calibration(rig);
}

}  // namespace ctslam
