#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "posealign/geometry.hpp"
#include "posealign/model.hpp"
#include "posealign/targets.hpp"
#include "posealign/tensor.hpp"

namespace posealign {

/// One decoded person. `sample_points` holds the locator sample position of
/// every keypoint group in image pixels (empty for the naive head).
struct Detection {
  double score = 0.0;
  std::array<Point, kNumKeypoints> keypoints{};
  Box box;
  int level = 0;
  int row = 0;
  int col = 0;
  std::vector<Point> sample_points;
};

struct DecodeOptions {
  double score_thresh = 0.05;
  int topk_per_level = 100;
  double nms_thresh = 0.5;

  void validate() const {
    if (!(score_thresh >= 0.0 && score_thresh < 1.0)) throw ConfigError("eval.score_thresh", "must lie in [0, 1)");
    if (topk_per_level < 1) throw ConfigError("eval.topk_per_level", "must be >= 1");
    if (!(nms_thresh > 0.0 && nms_thresh <= 1.0)) throw ConfigError("eval.nms_thresh", "must lie in (0, 1]");
  }
  bool operator==(const DecodeOptions&) const = default;
};

namespace eval_detail {

inline double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace eval_detail

/// Detection at location (i, j) of one level, without thresholding.
template <typename T>
Detection decode_location(const LevelOutput<T>& lo, int level, int i, int j) {
  const int h = lo.cls.dim(1), w = lo.cls.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t p = static_cast<std::size_t>(i) * w + j;
  const double s = lo.stride;
  const Point c = location_center(lo.stride, i, j);
  Detection d;
  d.level = level;
  d.row = i;
  d.col = j;
  d.score = std::sqrt(eval_detail::sigmoid(lo.cls[p]) * eval_detail::sigmoid(lo.ctr[p]));
  for (int t = 0; t < kNumKeypoints; ++t) {
    d.keypoints[t] = {c.x + static_cast<double>(lo.kp[2 * t * plane + p]) * s,
                      c.y + static_cast<double>(lo.kp[(2 * t + 1) * plane + p]) * s};
  }
  if (lo.box.defined()) {
    d.box = {c.x - lo.box[p] * s, c.y - lo.box[plane + p] * s, c.x + lo.box[2 * plane + p] * s,
             c.y + lo.box[3 * plane + p] * s};
  } else {
    d.box = enclosing_rect(d.keypoints);
  }
  if (lo.locator.defined()) {
    const int groups = lo.locator.dim(0) / 2;
    for (int gi = 0; gi < groups; ++gi) {
      d.sample_points.push_back({c.x + static_cast<double>(lo.locator[2 * gi * plane + p]) * s,
                                 c.y + static_cast<double>(lo.locator[(2 * gi + 1) * plane + p]) * s});
    }
  }
  return d;
}

/// Candidates of one level scoring above the threshold, best first (ties by
/// location index), capped at topk.
template <typename T>
std::vector<Detection> level_candidates(const LevelOutput<T>& lo, int level, const DecodeOptions& opt) {
  const int h = lo.cls.dim(1), w = lo.cls.dim(2);
  std::vector<std::pair<double, int>> scored;
  for (int p = 0; p < h * w; ++p) {
    const double sc = std::sqrt(eval_detail::sigmoid(lo.cls[p]) * eval_detail::sigmoid(lo.ctr[p]));
    if (sc > opt.score_thresh) scored.emplace_back(sc, p);
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  if (static_cast<int>(scored.size()) > opt.topk_per_level) scored.resize(opt.topk_per_level);
  std::vector<Detection> out;
  for (const auto& [sc, p] : scored) out.push_back(decode_location(lo, level, p / w, p % w));
  return out;
}

/// Score threshold and top-k per level, then NMS over all levels on the
/// detection boxes. Result is in descending score order.
template <typename T>
std::vector<Detection> decode(const ModelOutput<T>& out, const DecodeOptions& opt = {}) {
  std::vector<Detection> cand;
  for (std::size_t l = 0; l < out.levels.size(); ++l) {
    auto c = level_candidates(out.levels[l], static_cast<int>(l), opt);
    cand.insert(cand.end(), std::make_move_iterator(c.begin()), std::make_move_iterator(c.end()));
  }
  std::vector<ScoredBox> boxes;
  for (const auto& d : cand) boxes.push_back({d.score, d.box});
  std::vector<Detection> kept;
  for (std::size_t k : nms(boxes, opt.nms_thresh)) kept.push_back(cand[k]);
  return kept;
}

/// Inference on one image; no tape is recorded and the heatmap branch is
/// not evaluated.
template <typename T>
std::vector<Detection> predict(const PoseModel<T>& model, const Tensor<T>& image, const DecodeOptions& opt = {}) {
  Graph<T> g(false);
  return decode(model.forward(g, image, false), opt);
}

// ---------------------------------------------------------------------------
// OKS average precision

struct AreaRange {
  const char* name;
  double lo;
  double hi;
};

inline constexpr double kAreaInfinity = 1e10;
inline constexpr std::array<AreaRange, 3> kAreaRanges = {{{"all", 0.0, kAreaInfinity},
                                                          {"medium", 32.0 * 32.0, 96.0 * 96.0},
                                                          {"large", 96.0 * 96.0, kAreaInfinity}}};

inline std::array<double, 10> oks_thresholds() {
  std::array<double, 10> t{};
  for (int k = 0; k < 10; ++k) t[k] = 0.5 + 0.05 * k;
  return t;
}

inline std::array<double, 101> recall_thresholds() {
  std::array<double, 101> r{};
  for (int k = 0; k <= 100; ++k) r[k] = k / 100.0;
  return r;
}

struct EvalOptions {
  int max_dets = 20;
  std::array<double, kNumKeypoints> sigmas = [] {
    std::array<double, kNumKeypoints> s{};
    std::copy(kCocoSigmas.begin(), kCocoSigmas.end(), s.begin());
    return s;
  }();
};

/// Interpolated precision at each of the 101 recall thresholds.
struct PrCurve {
  double threshold = 0.0;
  std::array<double, 101> precision{};
};

/// AP values are -1 where an area range holds no ground truth.
struct EvalReport {
  double ap = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ap_m = 0.0;
  double ap_l = 0.0;
  std::vector<PrCurve> curves;  // area range "all", one per OKS threshold
  int num_images = 0;
  int num_gt = 0;
  int num_dets = 0;
};

namespace eval_detail {

struct ImageMatch {
  std::vector<double> scores;               // kept detections, score order
  std::vector<std::vector<int>> matched;    // [threshold][det]: 1 matched, 0 not
  std::vector<std::vector<int>> ignored;    // [threshold][det]
  int num_valid_gt = 0;
};

/// Greedy matching of one image for one area range.
inline ImageMatch match_image(std::span<const Detection> dets, std::span<const InstanceAnnotation> gts,
                              const AreaRange& range, const EvalOptions& opt, std::span<const double> thresholds) {
  ImageMatch m;
  std::vector<std::size_t> dorder(dets.size());
  std::iota(dorder.begin(), dorder.end(), std::size_t{0});
  std::stable_sort(dorder.begin(), dorder.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  if (static_cast<int>(dorder.size()) > opt.max_dets) dorder.resize(opt.max_dets);

  std::vector<int> gt_ignore(gts.size());
  for (std::size_t k = 0; k < gts.size(); ++k) gt_ignore[k] = gts[k].area < range.lo || gts[k].area > range.hi;
  std::vector<std::size_t> gorder(gts.size());
  std::iota(gorder.begin(), gorder.end(), std::size_t{0});
  std::stable_sort(gorder.begin(), gorder.end(), [&](std::size_t a, std::size_t b) { return gt_ignore[a] < gt_ignore[b]; });
  for (int v : gt_ignore) m.num_valid_gt += v == 0;

  std::vector<std::vector<double>> sim(dorder.size(), std::vector<double>(gorder.size()));
  for (std::size_t d = 0; d < dorder.size(); ++d) {
    for (std::size_t k = 0; k < gorder.size(); ++k) {
      sim[d][k] = oks(dets[dorder[d]].keypoints, gts[gorder[k]], opt.sigmas);
    }
  }
  for (std::size_t d : dorder) m.scores.push_back(dets[d].score);

  for (double tau : thresholds) {
    std::vector<int> gt_taken(gorder.size(), 0);
    std::vector<int> matched(dorder.size(), 0), ignored(dorder.size(), 0);
    for (std::size_t d = 0; d < dorder.size(); ++d) {
      double best = std::min(tau, 1.0 - 1e-10);
      int hit = -1;
      for (std::size_t k = 0; k < gorder.size(); ++k) {
        if (gt_taken[k]) continue;
        if (hit > -1 && !gt_ignore[gorder[hit]] && gt_ignore[gorder[k]]) break;
        if (sim[d][k] < best) continue;
        best = sim[d][k];
        hit = static_cast<int>(k);
      }
      if (hit > -1) {
        gt_taken[hit] = 1;
        matched[d] = 1;
        ignored[d] = gt_ignore[gorder[hit]];
      } else {
        const double a = dets[dorder[d]].box.area();
        ignored[d] = a < range.lo || a > range.hi;
      }
    }
    m.matched.push_back(std::move(matched));
    m.ignored.push_back(std::move(ignored));
  }
  return m;
}

/// 101-point interpolated precision; -1 when there is no valid ground truth.
inline std::array<double, 101> accumulate(const std::vector<ImageMatch>& images, std::size_t tau_index, bool* empty) {
  std::vector<std::pair<double, int>> dets;  // score, tp (1) / fp (0)
  int num_gt = 0;
  for (const auto& im : images) {
    num_gt += im.num_valid_gt;
    for (std::size_t d = 0; d < im.scores.size(); ++d) {
      if (im.ignored[tau_index][d]) continue;
      dets.emplace_back(im.scores[d], im.matched[tau_index][d]);
    }
  }
  std::array<double, 101> q{};
  *empty = num_gt == 0;
  if (*empty) {
    q.fill(-1.0);
    return q;
  }
  std::stable_sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<double> recall(dets.size()), precision(dets.size());
  double tp = 0, fp = 0;
  for (std::size_t k = 0; k < dets.size(); ++k) {
    (dets[k].second ? tp : fp) += 1.0;
    recall[k] = tp / num_gt;
    precision[k] = tp / (tp + fp);
  }
  for (std::size_t k = dets.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  const auto rthr = recall_thresholds();
  for (std::size_t r = 0; r < rthr.size(); ++r) {
    const auto it = std::lower_bound(recall.begin(), recall.end(), rthr[r]);
    q[r] = it == recall.end() ? 0.0 : precision[it - recall.begin()];
  }
  return q;
}

inline double mean_valid(std::span<const double> v) {
  double s = 0;
  int n = 0;
  for (double x : v) {
    if (x > -1.0) {
      s += x;
      ++n;
    }
  }
  return n ? s / n : -1.0;
}

}  // namespace eval_detail

/// COCO-style keypoint AP over a dataset.
inline EvalReport evaluate(std::span<const std::vector<Detection>> detections,
                           std::span<const std::vector<InstanceAnnotation>> ground_truth, const EvalOptions& opt = {}) {
  using namespace eval_detail;
  if (detections.size() != ground_truth.size()) {
    throw std::invalid_argument("evaluate: " + std::to_string(detections.size()) + " detection lists for " +
                                std::to_string(ground_truth.size()) + " images");
  }
  const auto taus = oks_thresholds();
  EvalReport rep;
  rep.num_images = static_cast<int>(detections.size());
  for (std::size_t i = 0; i < detections.size(); ++i) {
    rep.num_gt += static_cast<int>(ground_truth[i].size());
    rep.num_dets += static_cast<int>(detections[i].size());
  }
  std::array<std::array<double, 10>, 3> ap_by{};  // [range][tau]
  for (std::size_t r = 0; r < kAreaRanges.size(); ++r) {
    std::vector<ImageMatch> images;
    for (std::size_t i = 0; i < detections.size(); ++i) {
      images.push_back(match_image(detections[i], ground_truth[i], kAreaRanges[r], opt, taus));
    }
    for (std::size_t t = 0; t < taus.size(); ++t) {
      bool empty = false;
      const auto q = accumulate(images, t, &empty);
      ap_by[r][t] = empty ? -1.0 : mean_valid(q);
      if (r == 0) rep.curves.push_back({taus[t], q});
    }
  }
  rep.ap = mean_valid(ap_by[0]);
  rep.ap50 = ap_by[0][0];
  rep.ap75 = ap_by[0][5];
  rep.ap_m = mean_valid(ap_by[1]);
  rep.ap_l = mean_valid(ap_by[2]);
  return rep;
}

inline nlohmann::json report_to_json(const EvalReport& r, bool with_curves = true) {
  nlohmann::json j = {{"AP", r.ap},     {"AP50", r.ap50},           {"AP75", r.ap75},
                      {"AP_M", r.ap_m}, {"AP_L", r.ap_l},           {"num_images", r.num_images},
                      {"num_gt", r.num_gt}, {"num_dets", r.num_dets}};
  if (with_curves) {
    nlohmann::json curves = nlohmann::json::array();
    for (const auto& c : r.curves) curves.push_back({{"oks_threshold", c.threshold}, {"precision", c.precision}});
    j["pr_curves"] = curves;
    j["recall_thresholds"] = recall_thresholds();
  }
  return j;
}

inline nlohmann::json detection_to_json(const Detection& d) {
  nlohmann::json kps = nlohmann::json::array();
  for (const auto& p : d.keypoints) kps.push_back({p.x, p.y});
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& p : d.sample_points) samples.push_back({p.x, p.y});
  return {{"score", d.score},
          {"keypoints", kps},
          {"box", {d.box.x0, d.box.y0, d.box.x1, d.box.y1}},
          {"level", d.level},
          {"row", d.row},
          {"col", d.col},
          {"locator_points", samples}};
}

/// Runs inference over scenes and evaluates against their annotations.
template <typename T, typename SampleRange>
EvalReport evaluate_model(const PoseModel<T>& model, const SampleRange& samples, const DecodeOptions& dopt = {},
                          const EvalOptions& eopt = {}) {
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<InstanceAnnotation>> gts;
  for (const auto& s : samples) {
    dets.push_back(predict(model, s.image, dopt));
    gts.push_back(s.annotations);
  }
  return evaluate(dets, gts, eopt);
}

}  // namespace posealign
