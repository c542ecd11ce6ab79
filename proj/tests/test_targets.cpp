#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "posealign/rng.hpp"
#include "posealign/synthgen.hpp"
#include "posealign/targets.hpp"

using namespace posealign;

namespace {

InstanceAnnotation box_instance(double x0, double y0, double x1, double y1) {
  InstanceAnnotation a;
  for (int t = 0; t < kNumKeypoints; ++t) {
    a.keypoints[t] = {t % 2 ? x0 : x1, t % 3 ? y0 : y1};
    a.visibility[t] = 2;
  }
  a.keypoints[0] = {x0, y0};
  a.keypoints[1] = {x1, y1};
  a.area = (x1 - x0) * (y1 - y0);
  return a;
}

std::vector<std::pair<int, int>> shapes_for(int h, int w, const std::vector<LevelAssignment>& levels) {
  std::vector<std::pair<int, int>> s;
  for (const auto& l : levels) s.emplace_back(h / l.stride, w / l.stride);
  return s;
}

InstanceAnnotation shifted(const InstanceAnnotation& a, double dx, double dy) {
  InstanceAnnotation out = a;
  for (auto& p : out.keypoints) p = {p.x + dx, p.y + dy};
  return out;
}

}  // namespace

TEST(LocationCenter, Examples) {
  EXPECT_EQ(location_center(8, 0, 0), (Point{4, 4}));
  EXPECT_EQ(location_center(8, 2, 1), (Point{12, 20}));
  EXPECT_EQ(location_center(16, 1, 1), (Point{24, 24}));
}

TEST(LevelAssignment, DefaultRangesPartitionPositiveAxis) {
  for (int n : {1, 2, 3, 5}) {
    const auto levels = default_level_assignments(n);
    ASSERT_EQ(static_cast<int>(levels.size()), n);
    EXPECT_EQ(levels.front().lo, 0.0);
    EXPECT_TRUE(std::isinf(levels.back().hi));
    for (int l = 1; l < n; ++l) {
      EXPECT_EQ(levels[l].lo, levels[l - 1].hi);
      EXPECT_EQ(levels[l].stride, 2 * levels[l - 1].stride);
    }
  }
}

TEST(KeypointOffsets, Examples) {
  InstanceAnnotation a;
  a.keypoints[0] = {20, 20};
  a.visibility[0] = 2;
  a.keypoints[1] = {12, 12};
  a.visibility[1] = 1;
  a.keypoints[2] = {50, -3};
  a.visibility[2] = 0;
  const auto ko = keypoint_offsets(a, {12, 12}, 8);
  EXPECT_EQ(ko.offsets[0], 1.0);
  EXPECT_EQ(ko.offsets[1], 1.0);
  EXPECT_EQ(ko.offsets[2], 0.0);
  EXPECT_EQ(ko.offsets[3], 0.0);
  EXPECT_EQ(ko.mask[0], 1.0);
  EXPECT_EQ(ko.mask[2], 1.0);
  EXPECT_EQ(ko.offsets[4], (50.0 - 12.0) / 8.0);
  EXPECT_EQ(ko.mask[4], 0.0);
  EXPECT_EQ(ko.mask[5], 0.0);
}

TEST(Centerness, Examples) {
  const Box b{0, 0, 4, 4};
  EXPECT_EQ(centerness_target(b, {2, 2}), 1.0);
  EXPECT_EQ(centerness_target(b, {0, 2}), 0.0);
  EXPECT_EQ(centerness_target(b, {4, 4}), 0.0);
  EXPECT_NEAR(centerness_target(b, {1, 2}), std::sqrt(1.0 / 3.0), 1e-15);
  EXPECT_NEAR(centerness_target(b, {1, 2}), 0.57735, 1e-5);
}

TEST(BoxOffsets, Examples) {
  const auto c = box_offsets(Box{0, 0, 16, 16}, {8, 8}, 8);
  EXPECT_EQ(c, (std::array<double, 4>{1, 1, 1, 1}));
  const auto tl = box_offsets(Box{10, 20, 34, 36}, {10, 20}, 8);
  EXPECT_EQ(tl, (std::array<double, 4>{0, 0, 3, 2}));
  EXPECT_EQ(box_offsets(Box{0, 0, 16, 8}, {4, 4}, 8), (std::array<double, 4>{0.5, 0.5, 1.5, 0.5}));
}

TEST(AssignLocations, TwentyByTenBoxOnP3) {
  const auto levels = default_level_assignments(3);
  const auto shapes = shapes_for(128, 128, levels);
  const InstanceAnnotation a = box_instance(30, 41, 50, 51);
  const auto lt = assign_locations(std::span(&a, 1), shapes, levels);
  // Enumerate P3 centres inside [30,50] x [41,51] directly.
  std::set<std::size_t> expected;
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) {
      const double x = 4 + 8 * j, y = 4 + 8 * i;
      if (x >= 30 && x <= 50 && y >= 41 && y <= 51) expected.insert(i * 16 + j);
    }
  ASSERT_FALSE(expected.empty());
  std::set<std::size_t> got;
  for (std::size_t c = 0; c < lt[0].cells(); ++c)
    if (lt[0].cls[c] > 0.5) got.insert(c);
  EXPECT_EQ(got, expected);
  EXPECT_EQ(lt[1].num_positive(), 0);
  EXPECT_EQ(lt[2].num_positive(), 0);
  // Outside the box: negative with empty targets.
  EXPECT_EQ(lt[0].cls[0], 0.0);
  EXPECT_EQ(lt[0].instance_id[0], -1);
  EXPECT_EQ(lt[0].centerness[0], 0.0);
}

TEST(AssignLocations, DegenerateBoxGetsExactlyOnePositive) {
  InstanceAnnotation a;
  for (auto& p : a.keypoints) p = {37.5, 70.25};
  a.visibility.fill(2);
  a.area = 1.0;
  const auto levels = default_level_assignments(3);
  const auto lt = assign_locations(std::span(&a, 1), shapes_for(128, 128, levels), levels);
  EXPECT_EQ(lt[0].num_positive() + lt[1].num_positive() + lt[2].num_positive(), 1);
  ASSERT_EQ(lt[0].num_positive(), 1);
  // Nearest P3 centre to (37.5, 70.25) is (36, 68): row 8, col 4.
  EXPECT_EQ(lt[0].cls[8 * 16 + 4], 1.0);
}

TEST(AssignLocations, SmallestBoxWinsAmbiguity) {
  const auto levels = default_level_assignments(3);
  const InstanceAnnotation anns[2] = {box_instance(0, 0, 30, 30), box_instance(10, 10, 26, 26)};
  const auto lt = assign_locations(std::span(anns, 2), shapes_for(64, 64, levels), levels);
  // (20, 20) is inside both; the smaller box is instance 1.
  EXPECT_EQ(lt[0].instance_id[2 * 8 + 2], 1);
  EXPECT_EQ(lt[0].instance_id[0], 0);
}

TEST(AssignLocations, MaskZeroWhereUnlabeledAndCenternessOnPositivesOnly) {
  SceneSpec spec;
  spec.occlusion_prob = 1.0;
  const auto levels = default_level_assignments(3);
  for (int k = 0; k < 30; ++k) {
    Sample s = generate_scene(spec, k);
    for (auto& a : s.annotations) a.visibility[k % kNumKeypoints] = 0;
    const auto lt = assign_locations(std::span(s.annotations), shapes_for(128, 128, levels), levels);
    for (const auto& l : lt) {
      const std::size_t n = l.cells();
      for (std::size_t c = 0; c < n; ++c) {
        if (l.cls[c] < 0.5) {
          EXPECT_EQ(l.centerness[c], 0.0);
          continue;
        }
        const auto& a = s.annotations[l.instance_id[c]];
        for (int t = 0; t < kNumKeypoints; ++t) {
          const double m = a.visibility[t] > 0 ? 1.0 : 0.0;
          EXPECT_EQ(l.kp_mask[(2 * t) * n + c], m);
          EXPECT_EQ(l.kp_mask[(2 * t + 1) * n + c], m);
        }
        EXPECT_GE(l.centerness[c], 0.0);
        EXPECT_LE(l.centerness[c], 1.0);
      }
    }
  }
}

TEST(AssignLocations, EveryInstanceHasAPositive) {
  SceneSpec spec;
  spec.max_instances = 5;
  spec.min_side = 4;
  spec.occlusion_prob = 0.8;
  const auto levels = default_level_assignments(3);
  for (int k = 0; k < 300; ++k) {
    const Sample s = generate_scene(spec, k);
    const auto lt = assign_locations(std::span(s.annotations), shapes_for(128, 128, levels), levels);
    std::vector<int> count(s.annotations.size(), 0);
    for (const auto& l : lt)
      for (int id : l.instance_id)
        if (id >= 0) ++count[id];
    for (int c : count) EXPECT_GE(c, 1) << "scene " << k;
  }
}

TEST(AssignLocations, OffsetsRoundTripExactly) {
  SceneSpec spec;
  const auto levels = default_level_assignments(3);
  for (int k = 0; k < 100; ++k) {
    const Sample s = generate_scene(spec, k);
    const auto lt = assign_locations(std::span(s.annotations), shapes_for(128, 128, levels), levels);
    for (const auto& l : lt) {
      const std::size_t n = l.cells();
      for (std::size_t c = 0; c < n; ++c) {
        if (l.cls[c] < 0.5) continue;
        const Point ctr = location_center(l.stride, static_cast<int>(c) / l.width, static_cast<int>(c) % l.width);
        const auto& a = s.annotations[l.instance_id[c]];
        for (int t = 0; t < kNumKeypoints; ++t) {
          EXPECT_EQ(ctr.x + l.kp_offsets[(2 * t) * n + c] * l.stride, a.keypoints[t].x);
          EXPECT_EQ(ctr.y + l.kp_offsets[(2 * t + 1) * n + c] * l.stride, a.keypoints[t].y);
        }
      }
    }
  }
}

TEST(AssignLocations, TranslationEquivariant) {
  // Scenes drawn on 128x128, placed at (32, 32) and (32 + 32a, 32 + 32b) on a
  // 256x256 grid; a 32 px shift moves level-l indices by 32 / stride.
  SceneSpec spec;
  const auto levels = default_level_assignments(3);
  const auto shapes = shapes_for(256, 256, levels);
  CounterRng rng(8, 0);
  for (int k = 0; k < 100; ++k) {
    const Sample s = generate_scene(spec, k);
    const int a = rng.uniform_int(0, 2), b = rng.uniform_int(0, 2);
    std::vector<InstanceAnnotation> base, moved;
    for (const auto& ann : s.annotations) {
      base.push_back(shifted(ann, 32, 32));
      moved.push_back(shifted(ann, 32 + 32.0 * a, 32 + 32.0 * b));
    }
    const auto l0 = assign_locations(std::span(base), shapes, levels);
    const auto l1 = assign_locations(std::span(moved), shapes, levels);
    for (std::size_t l = 0; l < levels.size(); ++l) {
      const int di = 32 / levels[l].stride * b, dj = 32 / levels[l].stride * a;
      const int h = shapes[l].first, w = shapes[l].second;
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          const double before = l0[l].cls[i * w + j];
          const int i2 = i + di, j2 = j + dj;
          if (i2 >= h || j2 >= w) {
            EXPECT_EQ(before, 0.0);
            continue;
          }
          EXPECT_EQ(l1[l].cls[i2 * w + j2], before) << "scene " << k << " level " << l;
          EXPECT_EQ(l1[l].instance_id[i2 * w + j2], l0[l].instance_id[i * w + j]);
        }
    }
  }
}

TEST(HeatmapTargets, NearestCell) {
  InstanceAnnotation a;
  a.keypoints[3] = {12, 20};
  a.visibility[3] = 2;
  const auto hm = heatmap_targets(std::span(&a, 1), 8, 16, 16);
  const std::size_t plane = 256;
  EXPECT_EQ(hm.labels[3 * plane + 2 * 16 + 1], 1.0);
  EXPECT_EQ(hm.positives, 1);
}

TEST(HeatmapTargets, TieGoesToLowerIndex) {
  InstanceAnnotation a;
  a.keypoints[0] = {8, 16};  // x between centres 4 and 12; y between 12 and 20
  a.visibility[0] = 2;
  const auto hm = heatmap_targets(std::span(&a, 1), 8, 16, 16);
  EXPECT_EQ(hm.labels[1 * 16 + 0], 1.0);
  EXPECT_EQ(nearest_cell(8.0, 8, 16), 0);
  EXPECT_EQ(nearest_cell(8.0001, 8, 16), 1);
  EXPECT_EQ(nearest_cell(-50.0, 8, 16), 0);
  EXPECT_EQ(nearest_cell(500.0, 8, 16), 15);
}

TEST(HeatmapTargets, NearestCellMatchesEnumeration) {
  CounterRng rng(12, 0);
  for (int trial = 0; trial < 2000; ++trial) {
    const int stride = rng.bernoulli(0.5) ? 8 : 16, extent = 128 / stride;
    const double v = rng.bernoulli(0.3) ? rng.uniform_int(0, 256) / 2.0 : rng.uniform(-10, 140);
    int best = 0;
    for (int c = 1; c < extent; ++c)
      if (std::abs(stride / 2.0 + c * stride - v) < std::abs(stride / 2.0 + best * stride - v)) best = c;
    EXPECT_EQ(nearest_cell(v, stride, extent), best) << v;
  }
}

TEST(HeatmapTargets, OnesEqualLabeledMinusCollisions) {
  SceneSpec spec;
  spec.max_instances = 3;
  spec.occlusion_prob = 1.0;
  for (int stride : {8, 16}) {
    for (int k = 0; k < 100; ++k) {
      const Sample s = generate_scene(spec, k);
      const auto hm = heatmap_targets(std::span(s.annotations), stride, 128 / stride, 128 / stride);
      int labeled = 0;
      for (const auto& a : s.annotations) labeled += a.num_labeled();
      int ones = 0;
      for (double v : hm.labels) ones += v > 0.5;
      EXPECT_EQ(ones, hm.positives);
      EXPECT_EQ(ones, labeled - hm.collisions);
    }
  }
}

TEST(HeatmapTargets, TwoNosesTwoOnes) {
  InstanceAnnotation a, b;
  a.keypoints[kNose] = {10, 10};
  b.keypoints[kNose] = {60, 90};
  a.visibility[kNose] = b.visibility[kNose] = 2;
  const InstanceAnnotation both[2] = {a, b};
  const auto hm = heatmap_targets(std::span(both, 2), 8, 16, 16);
  int ones = 0;
  for (int c = 0; c < 256; ++c) ones += hm.labels[c] > 0.5;
  EXPECT_EQ(ones, 2);
  EXPECT_EQ(hm.collisions, 0);
}
