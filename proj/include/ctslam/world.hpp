#pragma once

// SLAM state: camera frames grouped into multi-frames, key multi-frames
// carrying spline control poses, and the landmark map with bidirectional
// observation links.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctslam/errors.hpp"
#include "ctslam/lie.hpp"
#include "ctslam/matching.hpp"
#include "ctslam/trajectory.hpp"

namespace ctslam {

struct Keypoint {
  Eigen::Vector2d uv = Eigen::Vector2d::Zero();
  int level = 0;
};

// One camera's detections at one capture time.
struct CameraFrame {
  int camera_id = -1;
  double t = 0.0;
  std::vector<Keypoint> keypoints;
  std::vector<Descriptor> descriptors;  // parallel to keypoints
};

// Images captured closely in time, treated as one tracking unit. rep_time is
// the median capture time (even count: mean of the two middle values).
struct MultiFrame {
  int id = -1;
  std::vector<CameraFrame> frames;
  double rep_time = 0.0;
  std::optional<LinearMotion> motion;
};

inline int frame_index(const MultiFrame& mf, int camera_id) {
  for (std::size_t f = 0; f < mf.frames.size(); ++f) {
    if (mf.frames[f].camera_id == camera_id) return static_cast<int>(f);
  }
  return -1;
}

inline double median_time(std::vector<double> times) {
  if (times.empty()) throw EmptyWindow("median of zero capture times");
  std::sort(times.begin(), times.end());
  const std::size_t n = times.size();
  if (n % 2 == 1) return times[n / 2];
  return 0.5 * (times[n / 2 - 1] + times[n / 2]);
}

inline std::vector<double> capture_times(const MultiFrame& mf) {
  std::vector<double> ts;
  ts.reserve(mf.frames.size());
  for (const auto& f : mf.frames) ts.push_back(f.t);
  return ts;
}

// A multi-frame promoted to carry a control pose. links[f][j] is the map
// point id observed by keypoint j of frame f, or -1.
struct KeyMultiFrame {
  MultiFrame mf;
  Twist control_pose = Twist::Zero();
  std::vector<std::vector<int>> links;

  void init_links() {
    links.assign(mf.frames.size(), {});
    for (std::size_t f = 0; f < mf.frames.size(); ++f) {
      links[f].assign(mf.frames[f].keypoints.size(), -1);
    }
  }
};

struct ObsRef {
  int kmf_id = -1;
  int camera_id = -1;
  int keypoint_index = -1;

  friend bool operator<(const ObsRef& a, const ObsRef& b) {
    return std::tie(a.kmf_id, a.camera_id, a.keypoint_index) <
           std::tie(b.kmf_id, b.camera_id, b.keypoint_index);
  }
  friend bool operator==(const ObsRef& a, const ObsRef& b) {
    return a.kmf_id == b.kmf_id && a.camera_id == b.camera_id &&
           a.keypoint_index == b.keypoint_index;
  }
};

struct MapPoint {
  int id = -1;
  Vec3 position = Vec3::Zero();
  std::set<ObsRef> observations;
  Descriptor descriptor{};
};

// Member descriptor with minimal summed Hamming distance to the others;
// ties resolve to the lower index.
inline Descriptor medoid_descriptor(const std::vector<Descriptor>& descs) {
  if (descs.empty()) throw InvalidInput("medoid of zero descriptors");
  std::size_t best = 0;
  long best_sum = -1;
  for (std::size_t i = 0; i < descs.size(); ++i) {
    long sum = 0;
    for (std::size_t j = 0; j < descs.size(); ++j) {
      sum += hamming(descs[i], descs[j]);
    }
    if (best_sum < 0 || sum < best_sum) {
      best_sum = sum;
      best = i;
    }
  }
  return descs[best];
}

// Landmarks and key multi-frames, keyed by id for deterministic iteration.
// All link edits go through link/unlink/remove_point so the two directions
// never drift apart.
class WorldMap {
 public:
  std::map<int, MapPoint>& points() { return points_; }
  const std::map<int, MapPoint>& points() const { return points_; }
  std::map<int, KeyMultiFrame>& kmfs() { return kmfs_; }
  const std::map<int, KeyMultiFrame>& kmfs() const { return kmfs_; }

  bool has_point(int id) const { return points_.count(id) > 0; }
  bool has_kmf(int id) const { return kmfs_.count(id) > 0; }

  MapPoint& point(int id) {
    const auto it = points_.find(id);
    if (it == points_.end()) {
      throw IndexOutOfRange("no map point " + std::to_string(id));
    }
    return it->second;
  }
  const MapPoint& point(int id) const {
    return const_cast<WorldMap*>(this)->point(id);
  }

  KeyMultiFrame& kmf(int id) {
    const auto it = kmfs_.find(id);
    if (it == kmfs_.end()) {
      throw IndexOutOfRange("no key multi-frame " + std::to_string(id));
    }
    return it->second;
  }
  const KeyMultiFrame& kmf(int id) const {
    return const_cast<WorldMap*>(this)->kmf(id);
  }

  int add_point(const Vec3& position, const Descriptor& descriptor) {
    const int id = next_point_id_++;
    MapPoint p;
    p.id = id;
    p.position = position;
    p.descriptor = descriptor;
    points_.emplace(id, std::move(p));
    return id;
  }

  void add_kmf(KeyMultiFrame kmf) {
    if (kmf.links.empty()) kmf.init_links();
    const int id = kmf.mf.id;
    if (id < 0 || kmfs_.count(id)) {
      throw InvalidInput("key multi-frame id " + std::to_string(id) +
                         " invalid or already present");
    }
    kmfs_.emplace(id, std::move(kmf));
  }

  void link(int point_id, int kmf_id, int camera_id, int keypoint_index) {
    MapPoint& p = point(point_id);
    KeyMultiFrame& k = kmf(kmf_id);
    const int f = frame_index(k.mf, camera_id);
    if (f < 0 || keypoint_index < 0 ||
        keypoint_index >= static_cast<int>(k.links[f].size())) {
      throw IndexOutOfRange("link target outside key multi-frame " +
                            std::to_string(kmf_id));
    }
    const int prev = k.links[f][keypoint_index];
    if (prev == point_id) return;
    if (prev >= 0) unlink(prev, kmf_id, camera_id, keypoint_index);
    k.links[f][keypoint_index] = point_id;
    p.observations.insert({kmf_id, camera_id, keypoint_index});
  }

  void unlink(int point_id, int kmf_id, int camera_id, int keypoint_index) {
    MapPoint& p = point(point_id);
    KeyMultiFrame& k = kmf(kmf_id);
    const int f = frame_index(k.mf, camera_id);
    if (f >= 0 && keypoint_index >= 0 &&
        keypoint_index < static_cast<int>(k.links[f].size()) &&
        k.links[f][keypoint_index] == point_id) {
      k.links[f][keypoint_index] = -1;
    }
    p.observations.erase({kmf_id, camera_id, keypoint_index});
  }

  // Removes the point and clears every keypoint link that referenced it.
  void remove_point(int point_id) {
    MapPoint& p = point(point_id);
    for (const ObsRef& obs : p.observations) {
      KeyMultiFrame& k = kmf(obs.kmf_id);
      const int f = frame_index(k.mf, obs.camera_id);
      if (f >= 0 && obs.keypoint_index >= 0 &&
          obs.keypoint_index < static_cast<int>(k.links[f].size())) {
        k.links[f][obs.keypoint_index] = -1;
      }
    }
    points_.erase(point_id);
  }

  // Sorted unique map point ids linked from the given key multi-frame.
  std::vector<int> points_in_kmf(int kmf_id) const {
    const KeyMultiFrame& k = kmf(kmf_id);
    std::set<int> ids;
    for (const auto& row : k.links) {
      for (int id : row) {
        if (id >= 0) ids.insert(id);
      }
    }
    return {ids.begin(), ids.end()};
  }

 private:
  std::map<int, MapPoint> points_;
  std::map<int, KeyMultiFrame> kmfs_;
  int next_point_id_ = 0;
};

// Throws on any one-directional link: a MapPoint observation whose keypoint
// does not link back, or a keypoint link without the matching observation.
inline void verify_links(const WorldMap& world) {
  for (const auto& [pid, p] : world.points()) {
    for (const ObsRef& obs : p.observations) {
      if (!world.has_kmf(obs.kmf_id)) {
        throw Error("map point " + std::to_string(pid) +
                    " observes missing key multi-frame " +
                    std::to_string(obs.kmf_id));
      }
      const KeyMultiFrame& k = world.kmf(obs.kmf_id);
      const int f = frame_index(k.mf, obs.camera_id);
      if (f < 0 || obs.keypoint_index < 0 ||
          obs.keypoint_index >= static_cast<int>(k.links[f].size()) ||
          k.links[f][obs.keypoint_index] != pid) {
        throw Error("map point " + std::to_string(pid) +
                    " observation not mirrored by key multi-frame " +
                    std::to_string(obs.kmf_id));
      }
    }
  }
  for (const auto& [kid, k] : world.kmfs()) {
    for (std::size_t f = 0; f < k.links.size(); ++f) {
      for (std::size_t j = 0; j < k.links[f].size(); ++j) {
        const int pid = k.links[f][j];
        if (pid < 0) continue;
        if (!world.has_point(pid)) {
          throw Error("key multi-frame " + std::to_string(kid) +
                      " links missing map point " + std::to_string(pid));
        }
        const ObsRef obs{kid, k.mf.frames[f].camera_id, static_cast<int>(j)};
        if (!world.point(pid).observations.count(obs)) {
          throw Error("key multi-frame " + std::to_string(kid) +
                      " link not mirrored by map point " +
                      std::to_string(pid));
        }
      }
    }
  }
}

// Splits time-sorted camera frames into multi-frames. A run of frames whose
// capture times span at most `window` becomes one multi-frame; wider runs
// split recursively at the largest gap.
inline std::vector<MultiFrame> group_multiframes(
    const std::vector<CameraFrame>& frames, double window) {
  if (frames.empty()) throw EmptyWindow("no camera frames to group");
  for (std::size_t i = 1; i < frames.size(); ++i) {
    if (frames[i].t < frames[i - 1].t) {
      throw InvalidInput("camera frames not sorted by capture time");
    }
  }

  std::vector<std::pair<std::size_t, std::size_t>> spans;
  std::vector<std::pair<std::size_t, std::size_t>> stack{{0, frames.size()}};
  while (!stack.empty()) {
    const auto [lo, hi] = stack.back();
    stack.pop_back();
    if (hi - lo <= 1 || frames[hi - 1].t - frames[lo].t <= window) {
      spans.emplace_back(lo, hi);
      continue;
    }
    std::size_t cut = lo + 1;
    double best_gap = -1.0;
    for (std::size_t i = lo + 1; i < hi; ++i) {
      const double gap = frames[i].t - frames[i - 1].t;
      if (gap > best_gap) {
        best_gap = gap;
        cut = i;
      }
    }
    // Right half first so the left is processed (and emitted) first.
    stack.emplace_back(cut, hi);
    stack.emplace_back(lo, cut);
  }
  std::sort(spans.begin(), spans.end());

  std::vector<MultiFrame> out;
  out.reserve(spans.size());
  for (const auto& [lo, hi] : spans) {
    MultiFrame mf;
    mf.id = static_cast<int>(out.size());
    mf.frames.assign(frames.begin() + lo, frames.begin() + hi);
    mf.rep_time = median_time(capture_times(mf));
    out.push_back(std::move(mf));
  }
  return out;
}

// A 2D keypoint matched to an existing map point.
struct MapMatch {
  int point_id = -1;
  int camera_id = -1;
  int keypoint_index = -1;
  int distance = 0;
};

// Fraction of the reference map points matched in at least min_cams distinct
// cameras of the current multi-frame.
inline double reobservation_ratio(const std::vector<int>& reference_points,
                                  const std::vector<MapMatch>& links,
                                  int min_cams) {
  if (reference_points.empty()) return 0.0;
  std::map<int, std::set<int>> cams;
  for (const MapMatch& m : links) cams[m.point_id].insert(m.camera_id);
  int hit = 0;
  for (int pid : reference_points) {
    const auto it = cams.find(pid);
    if (it != cams.end() && static_cast<int>(it->second.size()) >= min_cams) {
      ++hit;
    }
  }
  return static_cast<double>(hit) / static_cast<double>(reference_points.size());
}

// --- Observation stream (newline-delimited JSON, one camera frame per line)

inline std::string descriptor_to_hex(const Descriptor& d) {
  static const char* digits = "0123456789abcdef";
  std::string s(64, '0');
  for (int byte = 0; byte < 32; ++byte) {
    const unsigned v =
        static_cast<unsigned>((d[byte / 8] >> (8 * (byte % 8))) & 0xffu);
    s[2 * byte] = digits[v >> 4];
    s[2 * byte + 1] = digits[v & 0xf];
  }
  return s;
}

inline Descriptor descriptor_from_hex(const std::string& s) {
  if (s.size() != 64) {
    throw InvalidInput("descriptor hex must be 64 characters, got " +
                       std::to_string(s.size()));
  }
  const auto nibble = [](char c) -> std::uint64_t {
    if (c >= '0' && c <= '9') return static_cast<std::uint64_t>(c - '0');
    if (c >= 'a' && c <= 'f') return static_cast<std::uint64_t>(c - 'a' + 10);
    if (c >= 'A' && c <= 'F') return static_cast<std::uint64_t>(c - 'A' + 10);
    throw InvalidInput(std::string("bad hex character '") + c + "'");
  };
  Descriptor d{};
  for (int byte = 0; byte < 32; ++byte) {
    const std::uint64_t v = (nibble(s[2 * byte]) << 4) | nibble(s[2 * byte + 1]);
    d[byte / 8] |= v << (8 * (byte % 8));
  }
  return d;
}

inline std::string serialize_camera_frame(const CameraFrame& frame, int seq) {
  nlohmann::ordered_json j;
  j["seq"] = seq;
  j["camera_id"] = frame.camera_id;
  j["t"] = frame.t;
  auto& kps = j["keypoints"] = nlohmann::json::array();
  for (const Keypoint& kp : frame.keypoints) {
    kps.push_back({kp.uv.x(), kp.uv.y(), kp.level});
  }
  auto& descs = j["descriptors"] = nlohmann::json::array();
  for (const Descriptor& d : frame.descriptors) {
    descs.push_back(descriptor_to_hex(d));
  }
  return j.dump();
}

inline CameraFrame parse_camera_frame(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInput(std::string("observation record: ") + e.what());
  }
  try {
    CameraFrame frame;
    frame.camera_id = j.at("camera_id").get<int>();
    frame.t = j.at("t").get<double>();
    for (const auto& kp : j.at("keypoints")) {
      frame.keypoints.push_back(
          {Eigen::Vector2d(kp.at(0).get<double>(), kp.at(1).get<double>()),
           kp.at(2).get<int>()});
    }
    for (const auto& d : j.at("descriptors")) {
      frame.descriptors.push_back(descriptor_from_hex(d.get<std::string>()));
    }
    if (frame.keypoints.size() != frame.descriptors.size()) {
      throw InvalidInput("keypoint and descriptor counts differ");
    }
    return frame;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("observation record: ") + e.what());
  }
}

inline void save_observation_stream(const std::string& path,
                                    const std::vector<CameraFrame>& frames) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    out << serialize_camera_frame(frames[i], static_cast<int>(i)) << "\n";
  }
}

inline std::vector<CameraFrame> load_observation_stream(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot read " + path);
  std::vector<CameraFrame> frames;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      frames.push_back(parse_camera_frame(line));
    } catch (const InvalidInput& e) {
      throw InvalidInput(std::string(e.what()) + " (line " +
                         std::to_string(lineno) + ")");
    }
  }
  return frames;
}

}  // namespace ctslam
