#include <catch2/catch_amalgamated.hpp>
#include <map>
#include <set>

#include "lakered/superpixel.hpp"
#include "test_util.hpp"

using namespace lakered;

namespace {

// Flood-fill oracle: number of 4-connected components per label.
std::map<int, int> components_per_label(const SuperpixelMap& map) {
  std::map<int, int> counts;
  std::vector<char> seen(map.labels.size(), 0);
  for (int y = 0; y < map.h; ++y)
    for (int x = 0; x < map.w; ++x) {
      const int idx = y * map.w + x;
      if (seen[idx] || map.labels[idx] < 0) continue;
      counts[map.labels[idx]]++;
      std::vector<int> stack{idx};
      seen[idx] = 1;
      while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        const int cy = cur / map.w, cx = cur % map.w;
        const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
        for (int d = 0; d < 4; ++d) {
          const int ny = cy + dy[d], nx = cx + dx[d];
          if (ny < 0 || ny >= map.h || nx < 0 || nx >= map.w) continue;
          const int nidx = ny * map.w + nx;
          if (!seen[nidx] && map.labels[nidx] == map.labels[idx]) {
            seen[nidx] = 1;
            stack.push_back(nidx);
          }
        }
      }
    }
  return counts;
}

void check_partition(const SuperpixelMap& map, const Mask& cm) {
  for (int y = 0; y < map.h; ++y)
    for (int x = 0; x < map.w; ++x) {
      if (cm.at(y, x) == 0) {
        REQUIRE(map.label_at(y, x) >= 0);
        REQUIRE(map.label_at(y, x) < map.count);
      } else {
        REQUIRE(map.label_at(y, x) == -1);
      }
    }
}

Mask blob_mask(int h, int w, int y0, int y1, int x0, int x1) {
  Mask m(h, w, 1);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.at(y, x) = 0;
  return m;
}

}  // namespace

TEST_CASE("slic with s=1 yields a single superpixel equal to the blob") {
  GridF features(8, 8, 3, 0.5f);
  Mask cm = blob_mask(8, 8, 2, 6, 2, 6);
  SuperpixelMap map = slic_foreground(features, cm, 1, 10.0, 5, 0);
  REQUIRE(map.count == 1);
  check_partition(map, cm);
  CHECK(map.centers[0].cells == 16);
}

TEST_CASE("two separated homogeneous blobs with s=2 split one per blob") {
  GridF features(8, 16, 3, 0.0f);
  Mask cm(8, 16, 1);
  for (int y = 2; y < 6; ++y)
    for (int x = 1; x < 5; ++x) {
      cm.at(y, x) = 0;
      for (int c = 0; c < 3; ++c) features.at(y, x, c) = 0.0f;
    }
  for (int y = 2; y < 6; ++y)
    for (int x = 11; x < 15; ++x) {
      cm.at(y, x) = 0;
      for (int c = 0; c < 3; ++c) features.at(y, x, c) = 1.0f;
    }
  SuperpixelMap map = slic_foreground(features, cm, 2, 40.0, 10, 0);
  REQUIRE(map.count == 2);
  check_partition(map, cm);
  // Each blob carries exactly one label.
  std::set<int> left, right;
  for (int y = 2; y < 6; ++y) {
    for (int x = 1; x < 5; ++x) left.insert(map.label_at(y, x));
    for (int x = 11; x < 15; ++x) right.insert(map.label_at(y, x));
  }
  CHECK(left.size() == 1);
  CHECK(right.size() == 1);
  CHECK(*left.begin() != *right.begin());

  // Oracle: at convergence every cell sits with its nearest center under the
  // joint distance.
  const double S = std::sqrt(32.0 / 2.0);
  const double scale = 40.0 / S;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 16; ++x) {
      if (cm.at(y, x)) continue;
      int best = -1;
      double best_d = 0;
      for (int l = 0; l < map.count; ++l) {
        double d = 0;
        for (int c = 0; c < 3; ++c) {
          const double diff = features.at(y, x, c) - map.centers[l].feat[c];
          d += diff * diff;
        }
        const double dy = (y - map.centers[l].y) * scale;
        const double dx = (x - map.centers[l].x) * scale;
        d += dy * dy + dx * dx;
        if (best < 0 || d < best_d) {
          best = l;
          best_d = d;
        }
      }
      REQUIRE(map.label_at(y, x) == best);
    }
}

TEST_CASE("partition property holds for random masks and features") {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    Mask cm = testutil::random_mask(12, 12, rng, 0.55);
    GridF features = testutil::random_grid(12, 12, 3, rng);
    SuperpixelMap map = slic_foreground(features, cm, 5, 10.0, 6,
                                        rng.next_u64());
    check_partition(map, cm);
    REQUIRE(map.count <= 5);
    for (const auto& c : map.centers) REQUIRE(c.cells > 0);
  }
}

TEST_CASE("slic is deterministic for fixed inputs and seed") {
  Rng rng(5);
  Mask cm = testutil::random_mask(16, 16, rng, 0.5);
  GridF features = testutil::random_grid(16, 16, 3, rng);
  SuperpixelMap a = slic_foreground(features, cm, 6, 10.0, 8, 42);
  SuperpixelMap b = slic_foreground(features, cm, 6, 10.0, 8, 42);
  REQUIRE(a.labels == b.labels);
  REQUIRE(a.count == b.count);
}

TEST_CASE("slic objective is non-increasing over iterations") {
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    Mask cm = testutil::random_mask(16, 16, rng, 0.5);
    GridF features = testutil::random_grid(16, 16, 3, rng);
    std::vector<double> trace;
    slic_foreground(features, cm, 6, 12.0, 10, 3, &trace);
    REQUIRE(trace.size() == 10);
    for (size_t i = 1; i < trace.size(); ++i)
      REQUIRE(trace[i] <= trace[i - 1] + 1e-9);
  }
}

TEST_CASE("foreground smaller than s shrinks the label count") {
  GridF features(6, 6, 3, 0.0f);
  Mask cm(6, 6, 1);
  cm.at(0, 0) = cm.at(3, 3) = cm.at(5, 1) = 0;
  SuperpixelMap map = slic_foreground(features, cm, 8, 10.0, 4, 0);
  REQUIRE(map.count == 3);
  check_partition(map, cm);
}

TEST_CASE("slic rejects empty foreground") {
  GridF features(4, 4, 3, 0.0f);
  Mask cm(4, 4, 1);  // everything background
  REQUIRE_THROWS_AS(slic_foreground(features, cm, 2, 10.0, 3, 0), DataError);
}

TEST_CASE("enforce_connectivity merges split islands") {
  // Label 0 occupies two islands separated by label 1.
  GridF features(4, 6, 3, 0.0f);
  SuperpixelMap map;
  map.h = 4;
  map.w = 6;
  map.count = 2;
  map.labels.assign(24, -1);
  for (int y = 1; y < 3; ++y)
    for (int x = 0; x < 6; ++x) {
      int label = (x < 2) ? 0 : (x < 4 ? 1 : 0);
      map.label_at(y, x) = label;
      for (int c = 0; c < 3; ++c) features.at(y, x, c) = float(label);
    }
  auto before = components_per_label(map);
  REQUIRE(before[0] == 2);

  SuperpixelMap fixed = enforce_connectivity(map, features, 1);
  auto after = components_per_label(fixed);
  for (const auto& [label, comps] : after) REQUIRE(comps == 1);
  // Partition preserved: same foreground support.
  for (size_t i = 0; i < map.labels.size(); ++i)
    REQUIRE((map.labels[i] < 0) == (fixed.labels[i] < 0));
}

TEST_CASE("enforce_connectivity keeps already-connected maps unchanged") {
  GridF features(6, 6, 3, 0.25f);
  Mask cm = blob_mask(6, 6, 1, 5, 1, 5);
  SuperpixelMap map = slic_foreground(features, cm, 2, 10.0, 5, 1);
  SuperpixelMap fixed = enforce_connectivity(map, features, 1);
  REQUIRE(fixed.labels == map.labels);

  // Single-label map: nothing to merge.
  SuperpixelMap one = slic_foreground(features, cm, 1, 10.0, 3, 1);
  SuperpixelMap one_fixed = enforce_connectivity(one, features, 2);
  REQUIRE(one_fixed.labels == one.labels);
}

TEST_CASE("compute_superpixels yields connected labels on random blobs") {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    Mask full(32, 32, 1);
    const int cy = rng.uniform_int(10, 22), cx = rng.uniform_int(10, 22);
    const int r = rng.uniform_int(5, 9);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        if ((y - cy) * (y - cy) + (x - cx) * (x - cx) < r * r)
          full.at(y, x) = 0;
    Mask cm = downsample_mask(full, 4);
    if (cm.foreground_count() == 0) continue;
    GridF features = testutil::random_grid(8, 8, 3, rng);
    SuperpixelMap map =
        compute_superpixels(features, cm, 4, 10.0, 8, rng.next_u64());
    check_partition(map, cm);
    for (const auto& [label, comps] : components_per_label(map))
      REQUIRE(comps == 1);
  }
}
