#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "posealign/geometry.hpp"
#include "posealign/rng.hpp"
#include "oracles.hpp"

using namespace posealign;

namespace {

InstanceAnnotation with_points(const std::vector<Point>& pts, const std::vector<int>& vis) {
  InstanceAnnotation a;
  for (std::size_t t = 0; t < pts.size(); ++t) {
    a.keypoints[t] = pts[t];
    a.visibility[t] = vis[t];
  }
  return a;
}

using oracle::random_annotation;
using oracle::random_box_set;

}  // namespace

// ---------------------------------------------------------------------------
// min_enclosing_rect

TEST(MinEnclosingRect, ComponentwiseExtremes) {
  auto a = with_points({{1, 2}, {3, 5}, {0, 4}}, {2, 2, 2});
  EXPECT_EQ(min_enclosing_rect(a), (Box{0, 2, 3, 5}));
}

TEST(MinEnclosingRect, SinglePointIsDegenerate) {
  auto a = with_points({{7, 7}}, {1});
  EXPECT_EQ(min_enclosing_rect(a), (Box{7, 7, 7, 7}));
}

TEST(MinEnclosingRect, UnlabeledIgnored) {
  auto a = with_points({{100, 100}, {1, 1}, {2, 2}}, {0, 2, 1});
  EXPECT_EQ(min_enclosing_rect(a), (Box{1, 1, 2, 2}));
}

TEST(MinEnclosingRect, NoLabeledKeypointsIsAnError) {
  InstanceAnnotation a;
  EXPECT_THROW(min_enclosing_rect(a), GeometryError);
}

// ---------------------------------------------------------------------------
// iou / nms

TEST(Iou, Examples) {
  const Box a{0, 0, 2, 2};
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_EQ(iou(a, Box{5, 5, 6, 6}), 0.0);
  EXPECT_NEAR(iou(a, Box{1, 1, 3, 3}), 1.0 / 7.0, 1e-15);
  EXPECT_EQ(iou(Box{1, 1, 1, 1}, Box{1, 1, 1, 1}), 0.0);
}

TEST(Nms, IdenticalBoxesKeepHigherScore) {
  std::vector<ScoredBox> d{{0.8, {0, 0, 4, 4}}, {0.9, {0, 0, 4, 4}}};
  EXPECT_EQ(nms(d, 0.5), (std::vector<std::size_t>{1}));
}

TEST(Nms, DisjointBoxesBothKept) {
  std::vector<ScoredBox> d{{0.9, {0, 0, 1, 1}}, {0.8, {5, 5, 6, 6}}};
  EXPECT_EQ(nms(d, 0.5), (std::vector<std::size_t>{0, 1}));
}

TEST(Nms, ChainKeepsEnds) {
  // A~B and B~C overlap, A and C touch only at an edge. Both IoUs are 6/16.
  const Box A{0, 0, 10, 1}, B{4, 0, 16, 1}, C{10, 0, 20, 1};
  ASSERT_EQ(iou(A, B), 0.375);
  ASSERT_EQ(iou(B, C), 0.375);
  ASSERT_EQ(iou(A, C), 0.0);
  std::vector<ScoredBox> d{{0.9, A}, {0.8, B}, {0.7, C}};
  EXPECT_EQ(nms(d, 0.3), (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(nms(d, 0.3), oracle::nms(d, 0.3));
}

TEST(Nms, EmptyInput) {
  std::vector<ScoredBox> d;
  EXPECT_TRUE(nms(d, 0.5).empty());
}

TEST(Nms, TieBrokenByLowerIndex) {
  std::vector<ScoredBox> d{{0.5, {0, 0, 2, 2}}, {0.5, {0, 0, 2, 2}}, {0.5, {0, 0, 2, 2}}};
  EXPECT_EQ(nms(d, 0.5), (std::vector<std::size_t>{0}));
}

TEST(Nms, MatchesRemovalOracleOnRandomSets) {
  CounterRng rng(21, 0);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::vector<ScoredBox> d = random_box_set(rng, 50);
    const double thr = rng.uniform_int(1, 10) / 10.0;
    ASSERT_EQ(nms(d, thr), oracle::nms(d, thr)) << "trial " << trial;
  }
}

// ---------------------------------------------------------------------------
// oks

TEST(Oks, PerfectPrediction) {
  CounterRng rng(3, 0);
  auto gt = random_annotation(rng, 0, 100);
  EXPECT_EQ(oks(gt.keypoints, gt, kCocoSigmas), 1.0);
}

TEST(Oks, HandValueOneKeypoint) {
  InstanceAnnotation gt;
  gt.visibility[0] = 2;
  gt.keypoints[0] = {10, 10};
  gt.area = 100;
  auto pred = gt.keypoints;
  pred[0] = {11, 11};  // d^2 = 2 = 2 * 100 * 0.1^2
  const auto sig = uniform_sigmas(0.05);  // kappa = 0.1
  EXPECT_NEAR(oks(pred, gt, sig), std::exp(-1.0), 1e-15);
}

TEST(Oks, ExactPlusFarIsHalf) {
  InstanceAnnotation gt;
  gt.visibility[3] = 2;
  gt.visibility[9] = 1;
  gt.keypoints[3] = {5, 5};
  gt.keypoints[9] = {6, 6};
  gt.area = 400;
  auto pred = gt.keypoints;
  pred[9] = {1e6, -1e6};
  EXPECT_EQ(oks(pred, gt, kCocoSigmas), 0.5);
}

TEST(Oks, NonPositiveAreaIsAnError) {
  CounterRng rng(3, 1);
  auto gt = random_annotation(rng, 0, 100);
  gt.area = 0.0;
  EXPECT_THROW(oks(gt.keypoints, gt, kCocoSigmas), GeometryError);
}

TEST(Oks, MatchesDirectFormula) {
  CounterRng rng(4, 0);
  for (int trial = 0; trial < 300; ++trial) {
    auto gt = random_annotation(rng, 0, 128);
    std::array<Point, kNumKeypoints> pred;
    for (int t = 0; t < kNumKeypoints; ++t)
      pred[t] = {gt.keypoints[t].x + rng.normal() * 3, gt.keypoints[t].y + rng.normal() * 3};
    EXPECT_NEAR(oks(pred, gt, kCocoSigmas), oracle::oks(pred, gt, kCocoSigmas), 1e-14);
  }
}

TEST(Oks, TranslationAndScaleInvariant) {
  CounterRng rng(5, 0);
  for (int trial = 0; trial < 200; ++trial) {
    auto gt = random_annotation(rng, 0, 128);
    std::array<Point, kNumKeypoints> pred;
    for (int t = 0; t < kNumKeypoints; ++t)
      pred[t] = {gt.keypoints[t].x + rng.normal() * 4, gt.keypoints[t].y + rng.normal() * 4};
    const double base = oks(pred, gt, kCocoSigmas);

    const double dx = rng.uniform(-50, 50), dy = rng.uniform(-50, 50);
    auto gt_t = gt;
    auto pred_t = pred;
    for (int t = 0; t < kNumKeypoints; ++t) {
      gt_t.keypoints[t] = {gt.keypoints[t].x + dx, gt.keypoints[t].y + dy};
      pred_t[t] = {pred[t].x + dx, pred[t].y + dy};
    }
    EXPECT_NEAR(oks(pred_t, gt_t, kCocoSigmas), base, 1e-12);

    const double c = rng.uniform(0.25, 4.0);
    auto gt_s = gt;
    auto pred_s = pred;
    gt_s.area = gt.area * c * c;
    for (int t = 0; t < kNumKeypoints; ++t) {
      gt_s.keypoints[t] = {gt.keypoints[t].x * c, gt.keypoints[t].y * c};
      pred_s[t] = {pred[t].x * c, pred[t].y * c};
    }
    EXPECT_NEAR(oks(pred_s, gt_s, kCocoSigmas), base, 1e-12);
  }
}

// ---------------------------------------------------------------------------
// flip

TEST(Flip, NoseStaysInPlace) {
  InstanceAnnotation a;
  a.keypoints[kNose] = {10, 3};
  a.visibility[kNose] = 2;
  const auto f = flip_keypoints(a, 128);
  EXPECT_EQ(f.keypoints[kNose], (Point{118, 3}));
  EXPECT_EQ(f.visibility[kNose], 2);
}

TEST(Flip, LeftShoulderMovesToRightSlot) {
  InstanceAnnotation a;
  a.keypoints[kLeftShoulder] = {30, 40};
  a.visibility[kLeftShoulder] = 1;
  const auto f = flip_keypoints(a, 100);
  EXPECT_EQ(f.keypoints[kRightShoulder], (Point{70, 40}));
  EXPECT_EQ(f.visibility[kRightShoulder], 1);
  EXPECT_EQ(f.visibility[kLeftShoulder], 0);
}

TEST(Flip, PermutationIsAnInvolutionPairingLeftAndRight) {
  for (int t = 0; t < kNumKeypoints; ++t) {
    EXPECT_EQ(kFlipPermutation[kFlipPermutation[t]], t);
    const std::string a = kKeypointNames[t], b = kKeypointNames[kFlipPermutation[t]];
    if (a.rfind("left_", 0) == 0) {
      EXPECT_EQ(b, "right_" + a.substr(5));
    } else if (a.rfind("right_", 0) == 0) {
      EXPECT_EQ(b, "left_" + a.substr(6));
    } else {
      EXPECT_EQ(b, a);
    }
  }
}

TEST(Flip, DoubleFlipIsIdentityAndCommutesWithBox) {
  CounterRng rng(6, 0);
  for (int trial = 0; trial < 200; ++trial) {
    // Dyadic coordinates so W - (W - x) is exact.
    auto a = random_annotation(rng, 0, 128);
    for (auto& p : a.keypoints) p = {std::round(p.x * 256) / 256, std::round(p.y * 256) / 256};
    const double w = 128;
    EXPECT_EQ(flip_keypoints(flip_keypoints(a, w), w), a);
    EXPECT_EQ(min_enclosing_rect(flip_keypoints(a, w)), flip_box(min_enclosing_rect(a), w));
  }
}
