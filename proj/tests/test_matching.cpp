#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <random>
#include <set>

#include "ctslam/matching.hpp"
#include "oracles.hpp"

using namespace ctslam;

namespace {

Descriptor random_descriptor(std::mt19937_64& rng) {
  return {rng(), rng(), rng(), rng()};
}

Descriptor flip_bits(Descriptor d, int count, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, 255);
  std::set<int> flipped;
  while (static_cast<int>(flipped.size()) < count) flipped.insert(pick(rng));
  for (int bit : flipped) d[bit / 64] ^= (1ull << (bit % 64));
  return d;
}

int naive_hamming(const Descriptor& a, const Descriptor& b) {
  int d = 0;
  for (int w = 0; w < 4; ++w) {
    for (int bit = 0; bit < 64; ++bit) {
      d += ((a[w] >> bit) & 1) != ((b[w] >> bit) & 1);
    }
  }
  return d;
}

CameraModel test_camera() {
  CameraModel cam;
  cam.id = 0;
  cam.fx = 400.0;
  cam.fy = 400.0;
  cam.cx = 480.0;
  cam.cy = 300.0;
  cam.width = 960;
  cam.height = 600;
  return cam;
}

}  // namespace

TEST_CASE("hamming distance matches a naive bit loop", "[matching]") {
  Descriptor zero{0, 0, 0, 0};
  Descriptor one{1, 0, 0, 0};
  REQUIRE(hamming(zero, zero) == 0);
  REQUIRE(hamming(zero, one) == 1);
  Descriptor all{~0ull, ~0ull, ~0ull, ~0ull};
  REQUIRE(hamming(zero, all) == 256);

  std::mt19937_64 rng(201);
  for (int i = 0; i < 100; ++i) {
    const Descriptor a = random_descriptor(rng);
    const Descriptor b = random_descriptor(rng);
    REQUIRE(hamming(a, b) == naive_hamming(a, b));
  }
}

TEST_CASE("identical single descriptors give one zero-distance match",
          "[matching]") {
  std::mt19937_64 rng(203);
  const Descriptor d = random_descriptor(rng);
  const auto matches = match_ratio({d}, {d}, 0.7);
  REQUIRE(matches.size() == 1);
  REQUIRE(matches[0].a == 0);
  REQUIRE(matches[0].b == 0);
  REQUIRE(matches[0].distance == 0);
}

TEST_CASE("equidistant nearest neighbours are rejected", "[matching]") {
  std::mt19937_64 rng(205);
  const Descriptor q = random_descriptor(rng);
  const Descriptor n1 = flip_bits(q, 10, rng);
  const Descriptor n2 = flip_bits(q, 10, rng);
  REQUIRE(hamming(q, n1) == hamming(q, n2));
  const auto matches = match_ratio({q}, {n1, n2}, 0.7);
  REQUIRE(matches.empty());
}

TEST_CASE("ratio matching is symmetric under swapping inputs", "[matching]") {
  std::mt19937_64 rng(207);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Descriptor> a, b;
    for (int i = 0; i < 40; ++i) a.push_back(random_descriptor(rng));
    for (int i = 0; i < 30; ++i) {
      b.push_back(i < 20 ? flip_bits(a[i], 1 + static_cast<int>(rng() % 8), rng)
                         : random_descriptor(rng));
    }
    const auto fwd = match_ratio(a, b, 0.7);
    const auto rev = match_ratio(b, a, 0.7);
    std::set<std::pair<int, int>> fwd_set, rev_set;
    for (const auto& m : fwd) fwd_set.insert({m.a, m.b});
    for (const auto& m : rev) rev_set.insert({m.b, m.a});
    REQUIRE(fwd_set == rev_set);
  }
}

TEST_CASE("planted correspondences are recovered", "[matching]") {
  std::mt19937_64 rng(209);
  std::vector<Descriptor> a, b;
  for (int i = 0; i < 60; ++i) a.push_back(random_descriptor(rng));
  // First 40 of b correspond to first 40 of a with a few flipped bits.
  for (int i = 0; i < 40; ++i) b.push_back(flip_bits(a[i], 5, rng));
  for (int i = 0; i < 30; ++i) b.push_back(random_descriptor(rng));

  const auto matches = match_ratio(a, b, 0.7);
  int correct = 0;
  for (const auto& m : matches) {
    REQUIRE(m.distance == hamming(a[m.a], b[m.b]));
    if (m.a == m.b && m.a < 40) ++correct;
  }
  REQUIRE(correct >= 38);
  REQUIRE(static_cast<int>(matches.size()) <= 42);
}

TEST_CASE("essential filter rejects planted outliers", "[matching]") {
  std::mt19937_64 rng(211);
  const CameraModel cam = test_camera();
  const Pose T_a;  // identity
  Pose T_b;
  T_b.t = Vec3(0.8, 0.05, 0.1);
  T_b.R = so3_exp(Vec3(0.01, -0.06, 0.02));

  std::uniform_real_distribution<double> ux(-4.0, 4.0), uz(6.0, 25.0);
  std::uniform_real_distribution<double> upx(0.0, 959.0), upy(0.0, 599.0);
  std::vector<Vec2> kps_a, kps_b;
  std::vector<Match> matches;
  int planted_inliers = 0;
  while (planted_inliers < 60) {
    const Vec3 X(ux(rng), 0.5 * ux(rng), uz(rng));
    try {
      const Vec2 pa = project(cam, X, T_a);
      const Vec2 pb = project(cam, X, T_b);
      if (!in_bounds(cam, pa) || !in_bounds(cam, pb)) continue;
      matches.push_back({static_cast<int>(kps_a.size()),
                         static_cast<int>(kps_b.size()), 0});
      kps_a.push_back(pa);
      kps_b.push_back(pb);
      ++planted_inliers;
    } catch (const BehindCamera&) {
    }
  }
  std::set<int> outlier_ids;
  for (int i = 0; i < 40; ++i) {
    outlier_ids.insert(static_cast<int>(matches.size()));
    matches.push_back({static_cast<int>(kps_a.size()),
                       static_cast<int>(kps_b.size()), 0});
    kps_a.push_back(Vec2(upx(rng), upy(rng)));
    kps_b.push_back(Vec2(upx(rng), upy(rng)));
  }

  EssentialFilterParams params;
  params.seed = 7;
  const auto inliers =
      filter_essential(matches, kps_a, kps_b, cam, cam, params);

  int surviving_outliers = 0;
  int surviving_inliers = 0;
  for (std::size_t i = 0; i < inliers.size(); ++i) {
    const int id = inliers[i].a;  // match index == keypoint index here
    if (outlier_ids.count(id))
      ++surviving_outliers;
    else
      ++surviving_inliers;
  }
  REQUIRE(surviving_outliers <= 2);   // >= 95% of 40 rejected
  REQUIRE(surviving_inliers >= 54);   // >= 90% of the true matches kept

  // Same seed, same answer.
  const auto again = filter_essential(matches, kps_a, kps_b, cam, cam, params);
  REQUIRE(again.size() == inliers.size());
  for (std::size_t i = 0; i < again.size(); ++i) {
    REQUIRE(again[i].a == inliers[i].a);
    REQUIRE(again[i].b == inliers[i].b);
  }
}

TEST_CASE("essential filter needs eight matches", "[matching]") {
  const CameraModel cam = test_camera();
  std::vector<Match> matches(7);
  std::vector<Vec2> kps(7, Vec2(10.0, 10.0));
  for (int i = 0; i < 7; ++i) matches[i] = {i, i, 0};
  REQUIRE_THROWS_AS(filter_essential(matches, kps, kps, cam, cam),
                    TooFewMatches);
}
