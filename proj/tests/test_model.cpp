#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

#include "posealign/evalkit.hpp"
#include "posealign/model.hpp"
#include "support.hpp"

using namespace posealign;
using support::perturb;
using support::random_image;

namespace {

void fill(Tensor<float>& t, float v) { std::fill(t.data().begin(), t.data().end(), v); }

ModelConfig align_config() {
  ModelConfig cfg;
  cfg.head.align = true;
  return cfg;
}

std::set<std::string> head_names(const ParameterSet<float>& p) {
  std::set<std::string> out;
  for (const auto& e : p.entries())
    if (e.name.rfind("head.", 0) == 0) out.insert(e.name);
  return out;
}

}  // namespace

TEST(Backbone, PyramidShapes) {
  PoseModel<float> m(ModelConfig{}, 1);
  Graph<float> g(false);
  const auto p = m.backbone_fpn_forward(g, random_image<float>(1, 128, 128));
  ASSERT_EQ(p.size(), 3u);
  EXPECT_EQ(p[0].shape(), (Shape{64, 16, 16}));
  EXPECT_EQ(p[1].shape(), (Shape{64, 8, 8}));
  EXPECT_EQ(p[2].shape(), (Shape{64, 4, 4}));

  const auto q = m.backbone_fpn_forward(g, random_image<float>(1, 256, 128));
  EXPECT_EQ(q[0].shape(), (Shape{64, 32, 16}));
  EXPECT_EQ(q[2].shape(), (Shape{64, 8, 4}));
}

TEST(Backbone, FiveLevels) {
  ModelConfig cfg;
  cfg.num_levels = 5;
  PoseModel<float> m(cfg, 1);
  Graph<float> g(false);
  const auto p = m.backbone_fpn_forward(g, random_image<float>(1, 128, 128));
  ASSERT_EQ(p.size(), 5u);
  EXPECT_EQ(p[3].shape(), (Shape{64, 2, 2}));
  EXPECT_EQ(p[4].shape(), (Shape{64, 1, 1}));
}

TEST(Backbone, ZeroInputGivesZeroPyramid) {
  PoseModel<float> m(ModelConfig{}, 3);
  Graph<float> g(false);
  for (const auto& level : m.backbone_fpn_forward(g, Tensor<float>(Shape{3, 64, 64})))
    for (float v : level.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Backbone, IndivisibleSizeIsRejected) {
  PoseModel<float> m(ModelConfig{}, 1);
  Graph<float> g(false);
  try {
    m.backbone_fpn_forward(g, Tensor<float>(Shape{3, 100, 128}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("divisible by 32"), std::string::npos);
  }
  EXPECT_THROW(m.backbone_fpn_forward(g, Tensor<float>(Shape{1, 64, 64})), DimensionError);
}

TEST(SharedHead, SameParametersOnEveryLevel) {
  ModelConfig a, b;
  b.num_levels = 5;
  EXPECT_EQ(head_names(PoseModel<float>(a, 1).params()), head_names(PoseModel<float>(b, 1).params()));

  ModelConfig ca = align_config(), cb = align_config();
  cb.num_levels = 4;
  EXPECT_EQ(head_names(PoseModel<float>(ca, 1).params()), head_names(PoseModel<float>(cb, 1).params()));

  // Identical features at two levels give identical predictions.
  PoseModel<float> m(ModelConfig{}, 2);
  Graph<float> g(false);
  const auto p = m.backbone_fpn_forward(g, random_image<float>(2, 64, 64));
  const auto x = m.shared_head_forward(g, p[1]);
  const auto y = m.shared_head_forward(g, p[1]);
  for (std::size_t i = 0; i < x.cls.numel(); ++i) EXPECT_EQ(x.cls[i], y.cls[i]);
}

TEST(SharedHead, BoxIsPositiveAndPriorBias) {
  ModelConfig cfg;
  cfg.head.box_branch = true;
  PoseModel<float> m(cfg, 4);
  perturb(m.params(), 4, 0.02);
  Graph<float> g(false);
  const auto out = m.forward(g, random_image<float>(4, 64, 64), false);
  for (const auto& lo : out.levels) {
    ASSERT_EQ(lo.box.dim(0), 4);
    for (float v : lo.box.data()) EXPECT_GT(v, 0.0f);
  }
  // Fresh classifier logits sit near the 0.01 prior.
  PoseModel<float> fresh(ModelConfig{}, 4);
  const auto o = fresh.forward(g, random_image<float>(4, 64, 64), false);
  for (float v : o.levels[0].cls.data()) EXPECT_NEAR(1.0 / (1.0 + std::exp(-v)), 0.01, 0.005);
}

TEST(NaiveHead, ZeroFinalLayerDecodesToLocationCentre) {
  PoseModel<float> m(ModelConfig{}, 5);
  fill(m.params().at("head.kp_pred.weight"), 0.0f);
  fill(m.params().at("head.kp_pred.bias"), 0.0f);
  Graph<float> g(false);
  const auto out = m.forward(g, random_image<float>(5, 64, 64), false);
  for (int l = 0; l < 3; ++l) {
    const auto& lo = out.levels[l];
    ASSERT_EQ(lo.kp.dim(0), 2 * kNumKeypoints);
    const Detection d = decode_location(lo, l, 1, 0);
    for (const Point& p : d.keypoints) {
      EXPECT_EQ(p.x, lo.stride / 2);
      EXPECT_EQ(p.y, lo.stride + lo.stride / 2);
    }
  }
}

TEST(KpAlign, ZeroLocatorAndPredictorGiveZeroOffsets) {
  PoseModel<float> m(align_config(), 6);
  for (auto& e : m.params().entries())
    if (e.name.rfind("head.kp_predictor", 0) == 0 || e.name.rfind("head.kp_locator", 0) == 0) fill(e.tensor, 0.0f);
  Graph<float> g(false);
  const auto out = m.forward(g, random_image<float>(6, 64, 64), false);
  for (const auto& lo : out.levels) {
    EXPECT_EQ(lo.kp.dim(0), 2 * kNumKeypoints);
    EXPECT_EQ(lo.locator.dim(0), 2 * kNumKeypoints);
    for (float v : lo.kp.data()) EXPECT_EQ(v, 0.0f);
  }
}

TEST(KpAlign, KeypointIsLocatorPlusResidual) {
  PoseModel<float> m(align_config(), 7);
  fill(m.params().at("head.kp_locator.weight"), 0.0f);
  Tensor<float>& lb = m.params().at("head.kp_locator.bias");
  fill(lb, 0.0f);
  lb[0] = 1.0f;  // o_x of the nose
  fill(m.params().at("head.kp_predictor0.weight"), 0.0f);
  Tensor<float>& pb = m.params().at("head.kp_predictor0.bias");
  pb[0] = 0.5f;
  pb[1] = 0.0f;
  Graph<float> g(false);
  const auto out = m.forward(g, random_image<float>(7, 64, 64), false);
  const auto& lo = out.levels[0];
  for (int j = 0; j < lo.kp.dim(2); ++j) {
    const Detection d = decode_location(lo, 0, 2, j);
    EXPECT_DOUBLE_EQ(d.keypoints[kNose].x, 4.0 + (j + 1.5) * 8.0);
    EXPECT_DOUBLE_EQ(d.keypoints[kNose].y, 20.0);
    EXPECT_DOUBLE_EQ(d.sample_points[0].x, 4.0 + (j + 1.0) * 8.0);
  }
}

TEST(KpAlign, GroupedHeadStillPredictsAllKeypoints) {
  ModelConfig cfg = align_config();
  cfg.head.grouped = true;
  cfg.head.separate_features = true;
  PoseModel<float> m(cfg, 8);
  EXPECT_EQ(m.params().at("head.kp_locator.weight").dim(0), 2 * cfg.groups.size());
  EXPECT_EQ(m.params().at("head.kp_predictor0.weight").shape(), (Shape{10, 16}));
  Graph<float> g(false);
  const auto out = m.forward(g, random_image<float>(8, 64, 64), false);
  for (const auto& lo : out.levels) {
    EXPECT_EQ(lo.kp.dim(0), 2 * kNumKeypoints);
    EXPECT_EQ(lo.locator.dim(0), 2 * cfg.groups.size());
  }
}

TEST(KpAlign, GroupMembersShareTheLocatorOffset) {
  ModelConfig cfg = align_config();
  cfg.head.grouped = true;
  PoseModel<float> m(cfg, 9);
  perturb(m.params(), 9, 0.05);
  for (auto& e : m.params().entries())
    if (e.name.rfind("head.kp_predictor", 0) == 0) fill(e.tensor, 0.0f);
  Graph<float> g(false);
  const auto out = m.forward(g, random_image<float>(9, 64, 64), false);
  const auto& lo = out.levels[0];
  const std::size_t plane = static_cast<std::size_t>(lo.kp.dim(1)) * lo.kp.dim(2);
  for (int gi = 0; gi < cfg.groups.size(); ++gi)
    for (int t : cfg.groups.groups[gi])
      for (int c = 0; c < 2; ++c)
        for (std::size_t p = 0; p < plane; ++p)
          EXPECT_EQ(lo.kp[(2 * t + c) * plane + p], lo.locator[(2 * gi + c) * plane + p]);
}

TEST(KpAlign, FinerSamplingPositions) {
  Graph<double> g(false);
  Tensor<double> loc(Shape{2, 2, 3});
  for (std::size_t i = 0; i < loc.numel(); ++i) loc[i] = 0.25;
  const auto same = model_detail::group_sample_points(g, loc, 0, false, true);
  const auto fine = model_detail::group_sample_points(g, loc, 0, true, true);
  const auto off = model_detail::group_sample_points(g, loc, 0, true, false);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) {
      const std::size_t p = 2 * (static_cast<std::size_t>(i) * 3 + j);
      EXPECT_DOUBLE_EQ(same[p], j + 0.25);
      EXPECT_DOUBLE_EQ(same[p + 1], i + 0.25);
      EXPECT_DOUBLE_EQ(fine[p], 2 * (j + 0.25) + 0.5);
      EXPECT_DOUBLE_EQ(fine[p + 1], 2 * (i + 0.25) + 0.5);
      EXPECT_DOUBLE_EQ(off[p], 2 * j + 0.5);
    }
}

TEST(KpAlign, SamplePointsFiniteUnderLargeOffsets) {
  ModelConfig cfg = align_config();
  cfg.head.finer_sampling = true;
  PoseModel<float> m(cfg, 10);
  perturb(m.params(), 10, 0.5);
  Graph<float> g(false);
  const auto out = m.forward(g, random_image<float>(10, 64, 64), false);
  for (int l = 0; l < 3; ++l) {
    for (float v : out.levels[l].kp.data()) EXPECT_TRUE(std::isfinite(v));
    const Detection d = decode_location(out.levels[l], l, 0, 0);
    for (const Point& p : d.sample_points) EXPECT_TRUE(std::isfinite(p.x) && std::isfinite(p.y));
  }
}

TEST(KpAlign, DisabledAlignerMatchesNaiveHead) {
  EXPECT_LT(support::aligner_disabled_gap(11, 64, 64), 1e-6);
  EXPECT_LT(support::aligner_disabled_gap(12, 128, 96), 1e-6);
}

TEST(KpAlign, DisabledAlignerIgnoresLocator) {
  ModelConfig cfg = align_config();
  cfg.head.disable_aligner = true;
  PoseModel<float> m(cfg, 13);
  perturb(m.params(), 13, 0.05);
  const auto img = random_image<float>(13, 64, 64);
  Graph<float> g(false);
  const auto a = m.forward(g, img, false);
  for (float& v : m.params().at("head.kp_locator.bias").data()) v += 3.0f;
  const auto b = m.forward(g, img, false);
  bool locator_moved = false;
  for (std::size_t i = 0; i < a.levels[0].locator.numel(); ++i)
    locator_moved |= a.levels[0].locator[i] != b.levels[0].locator[i];
  EXPECT_TRUE(locator_moved);
  for (std::size_t i = 0; i < a.levels[0].kp.numel(); ++i) EXPECT_EQ(a.levels[0].kp[i], b.levels[0].kp[i]);
}

TEST(KpAlign, NaiveEquivalenceRejectsGroupedHeads) {
  ModelConfig cfg = align_config();
  cfg.head.grouped = true;
  PoseModel<float> m(cfg, 1);
  EXPECT_THROW(naive_equivalent_params(m, ModelConfig{}), ConfigError);
}

TEST(KpAlign, LocatorReceivesGradient) {
  PoseModel<float> m(align_config(), 15);
  perturb(m.params(), 15, 0.02);
  Graph<float> g;
  const auto out = m.forward(g, random_image<float>(15, 64, 64), true);
  Tensor<float> loss = ops::sum(g, ops::mul(g, out.levels[0].kp, out.levels[0].kp));
  g.backward(loss);
  double norm = 0.0;
  for (float v : m.params().at("head.kp_locator.weight").grad()) norm += static_cast<double>(v) * v;
  EXPECT_GT(norm, 0.0);
}

TEST(HeatmapBranch, ShapesAndTrainingOnly) {
  for (int stride : {8, 16}) {
    ModelConfig cfg = align_config();
    cfg.head.heatmap_aux = true;
    cfg.head.heatmap_stride = stride;
    PoseModel<float> m(cfg, 16);
    const auto img = random_image<float>(16, 128, 128);
    Graph<float> g(false);
    const auto train = m.forward(g, img, true);
    EXPECT_EQ(train.heatmap.shape(), (Shape{kNumKeypoints, 128 / stride, 128 / stride}));
    EXPECT_EQ(train.heatmap_stride, stride);
    const auto infer = m.forward(g, img, false);
    EXPECT_EQ(infer.heatmap.numel(), 0u);

    // Removing the branch leaves inference unchanged.
    ModelConfig plain = cfg;
    plain.head.heatmap_aux = false;
    PoseModel<float> p(plain, 16);
    const auto ref = p.forward(g, img, false);
    for (int l = 0; l < 3; ++l) {
      for (std::size_t i = 0; i < ref.levels[l].kp.numel(); ++i) EXPECT_EQ(infer.levels[l].kp[i], ref.levels[l].kp[i]);
      for (std::size_t i = 0; i < ref.levels[l].cls.numel(); ++i)
        EXPECT_EQ(infer.levels[l].cls[i], ref.levels[l].cls[i]);
    }
  }
}

TEST(Equivariance, NaiveAndAlignedHeadsCommuteWithShifts) {
  SceneSpec spec;
  const Tensor<float> scene = generate_scene(spec, 3).image;
  for (bool align : {false, true}) {
    ModelConfig cfg;
    cfg.head.align = align;
    PoseModel<float> m(cfg, 17);
    perturb(m.params(), 17, 0.02);
    const auto r = support::translation_equivariance(m, scene, 1024, 448, 32);
    EXPECT_GT(r.compared, 0);
    EXPECT_LT(r.max_abs_diff, 1e-3);
  }
}

TEST(ModelConfig, ValidationNamesField) {
  auto path_of = [](const ModelConfig& c) {
    try {
      c.validate();
    } catch (const ConfigError& e) {
      return e.path();
    }
    return std::string("<none>");
  };
  ModelConfig c;
  EXPECT_EQ(path_of(c), "<none>");
  c.head.grouped = true;
  EXPECT_EQ(path_of(c), "head");
  c = ModelConfig{};
  c.head.heatmap_stride = 4;
  EXPECT_EQ(path_of(c), "head.heatmap_stride");
  c = ModelConfig{};
  c.num_levels = 6;
  EXPECT_EQ(path_of(c), "model.num_levels");
  c = align_config();
  c.head.separate_features = true;
  c.fpn_channels = 66;
  EXPECT_NE(path_of(c), "<none>");
  EXPECT_THROW(PoseModel<float>(c, 1), ConfigError);
}

TEST(ModelConfig, JsonRoundTrip) {
  ModelConfig c = align_config();
  c.head.grouped = true;
  c.head.heatmap_aux = true;
  c.head.heatmap_stride = 16;
  c.num_levels = 4;
  c.tower_convs = 3;
  ModelConfig back = model_from_json(nlohmann::json::parse(model_to_json(c).dump()), "model");
  back.head = head_from_json(nlohmann::json::parse(head_to_json(c.head).dump()), "head");
  EXPECT_EQ(back, c);
}

TEST(ParameterSet, WrappingChecksNamesAndShapes) {
  PoseModel<float> src(ModelConfig{}, 18);
  PoseModel<float> copy(ModelConfig{}, src.params().clone());
  Graph<float> g(false);
  const auto img = random_image<float>(18, 64, 64);
  const auto a = src.forward(g, img, false), b = copy.forward(g, img, false);
  for (std::size_t i = 0; i < a.levels[0].kp.numel(); ++i) EXPECT_EQ(a.levels[0].kp[i], b.levels[0].kp[i]);

  EXPECT_THROW(PoseModel<float>(align_config(), src.params().clone()), std::invalid_argument);
  ModelConfig wide;
  wide.fpn_channels = 32;
  EXPECT_THROW(PoseModel<float>(wide, src.params().clone()), DimensionError);
}
