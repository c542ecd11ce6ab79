#pragma once
// Helpers shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "posealign/evalkit.hpp"
#include "posealign/model.hpp"
#include "posealign/rng.hpp"
#include "posealign/synthgen.hpp"

namespace posealign::support {

/// Adds N(0, scale^2) noise to every parameter.
template <typename T>
void perturb(ParameterSet<T>& params, std::uint64_t seed, double scale) {
  CounterRng rng(seed, 0x7e57);
  for (auto& e : params.entries())
    for (auto& v : e.tensor.data()) v += static_cast<T>(scale * rng.normal());
}

template <typename T>
Tensor<T> random_image(std::uint64_t seed, int h, int w) {
  CounterRng rng(seed, 0x1a6e);
  Tensor<T> img(Shape{3, h, w});
  for (auto& v : img.data()) v = static_cast<T>(rng.uniform());
  return img;
}

/// Copies `img` into an [3,H,W] canvas filled with `fill`, left edge at x_off.
inline Tensor<float> embed(const Tensor<float>& img, int height, int width, int x_off, float fill) {
  const int h = img.dim(1), w = img.dim(2);
  Tensor<float> out(Shape{3, height, width}, fill);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < std::min(h, height); ++i)
      for (int j = 0; j < w; ++j) {
        const int x = j + x_off;
        if (x < 0 || x >= width) continue;
        out[(static_cast<std::size_t>(c) * height + i) * width + x] = img[(static_cast<std::size_t>(c) * h + i) * w + j];
      }
  return out;
}

struct EquivarianceResult {
  double max_abs_diff = 0.0;  // decoded keypoint / sample point displacement error, pixels
  int compared = 0;           // interior locations compared
};

/// Renders `scene` at x offset `base` and `base + shift` on a wide canvas and
/// compares the decoded keypoints of corresponding interior locations: those
/// whose receptive field (plus the locator's sampling reach) stays clear of
/// the canvas border and the fill region in both images. `shift` must be a
/// multiple of the largest stride.
inline EquivarianceResult translation_equivariance(const PoseModel<float>& model, const Tensor<float>& scene,
                                                   int canvas_width, int base, int shift, float fill = 0.5f) {
  const int h = scene.dim(1);
  const Tensor<float> a = embed(scene, h, canvas_width, base, fill);
  const Tensor<float> b = embed(scene, h, canvas_width, base + shift, fill);
  Graph<float> ga(false), gb(false);
  const ModelOutput<float> oa = model.forward(ga, a, false);
  const ModelOutput<float> ob = model.forward(gb, b, false);

  EquivarianceResult res;
  for (std::size_t l = 0; l < oa.levels.size(); ++l) {
    const LevelOutput<float>& la = oa.levels[l];
    const LevelOutput<float>& lb = ob.levels[l];
    const int s = la.stride;
    const int lh = la.cls.dim(1), lw = la.cls.dim(2);
    const int dj = shift / s;
    const int radius = model.receptive_radius(static_cast<int>(l));
    for (int i = 0; i < lh; ++i) {
      for (int j = 0; j + dj < lw; ++j) {
        const Detection da = decode_location(la, static_cast<int>(l), i, j);
        double reach = 0.0;
        for (const Point& p : da.sample_points) reach = std::max(reach, std::abs(p.x - location_center(s, i, j).x));
        const double cx = location_center(s, i, j).x;
        const double margin = radius + reach + 2.0 * s;
        // Image a equals image b shifted left by `shift` on [0, canvas_width - shift).
        if (cx - margin < 0.0 || cx + margin > canvas_width - shift) continue;
        const Detection db = decode_location(lb, static_cast<int>(l), i, j + dj);
        for (int t = 0; t < kNumKeypoints; ++t) {
          res.max_abs_diff = std::max(res.max_abs_diff, std::abs(db.keypoints[t].x - da.keypoints[t].x - shift));
          res.max_abs_diff = std::max(res.max_abs_diff, std::abs(db.keypoints[t].y - da.keypoints[t].y));
        }
        for (std::size_t gi = 0; gi < da.sample_points.size(); ++gi) {
          res.max_abs_diff =
              std::max(res.max_abs_diff, std::abs(db.sample_points[gi].x - da.sample_points[gi].x - shift));
        }
        res.max_abs_diff = std::max(res.max_abs_diff, std::abs(db.score - da.score));
        ++res.compared;
      }
    }
  }
  return res;
}

/// Max |difference| between the keypoint maps of an aligner-disabled KPAlign
/// head (random weights, random locator) and the naive head carrying the same
/// predictor weights at its centre tap, over all levels.
inline double aligner_disabled_gap(std::uint64_t seed, int height, int width) {
  ModelConfig acfg;
  acfg.head.align = true;
  acfg.head.disable_aligner = true;
  PoseModel<double> aligned(acfg, seed);
  perturb(aligned.params(), seed, 0.05);

  ModelConfig ncfg = acfg;
  ncfg.head = HeadVariant{};
  PoseModel<double> naive(ncfg, naive_equivalent_params(aligned, ncfg));

  const Tensor<double> img = random_image<double>(seed, height, width);
  Graph<double> g1(false), g2(false);
  const auto oa = aligned.forward(g1, img, false);
  const auto on = naive.forward(g2, img, false);
  double gap = 0.0;
  for (std::size_t l = 0; l < oa.levels.size(); ++l) {
    for (std::size_t k = 0; k < oa.levels[l].kp.numel(); ++k)
      gap = std::max(gap, std::abs(oa.levels[l].kp[k] - on.levels[l].kp[k]));
    for (std::size_t k = 0; k < oa.levels[l].cls.numel(); ++k)
      gap = std::max(gap, std::abs(oa.levels[l].cls[k] - on.levels[l].cls[k]));
  }
  return gap;
}

}  // namespace posealign::support
