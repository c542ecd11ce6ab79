#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "posealign/geometry.hpp"
#include "posealign/json_util.hpp"
#include "posealign/ops.hpp"
#include "posealign/rng.hpp"
#include "posealign/targets.hpp"
#include "posealign/tensor.hpp"

namespace posealign {

/// Keypoint-head configuration; one record per ablation row.
struct HeadVariant {
  bool align = false;              // KPAlign instead of the naive final conv
  bool grouped = false;            // share one sample per keypoint group
  bool separate_features = false;  // per-group C/4 feature maps
  bool finer_sampling = false;     // sample on P_{L-1}
  bool disable_aligner = false;    // ignore locator output, sample at the location itself
  bool heatmap_aux = false;        // training-only heatmap branch
  int heatmap_stride = 8;
  bool box_branch = false;

  void validate() const {
    if (!align && (grouped || separate_features || finer_sampling || disable_aligner)) {
      throw ConfigError("head", "grouped/separate_features/finer_sampling/disable_aligner require align = true");
    }
    if (heatmap_stride != 8 && heatmap_stride != 16) {
      throw ConfigError("head.heatmap_stride", "must be 8 or 16");
    }
  }
  bool operator==(const HeadVariant&) const = default;
};

/// Partition of the 17 keypoints into groups that share one sampled feature.
struct KeypointGroups {
  std::vector<std::vector<int>> groups;

  /// Face five-tuple; each shoulder alone; elbow+wrist per side; each hip
  /// alone; knee+ankle per side.
  static KeypointGroups standard() {
    return {{{kNose, kLeftEye, kRightEye, kLeftEar, kRightEar},
             {kLeftShoulder},
             {kLeftElbow, kLeftWrist},
             {kRightShoulder},
             {kRightElbow, kRightWrist},
             {kLeftHip},
             {kLeftKnee, kLeftAnkle},
             {kRightHip},
             {kRightKnee, kRightAnkle}}};
  }

  static KeypointGroups singletons() {
    KeypointGroups g;
    for (int t = 0; t < kNumKeypoints; ++t) g.groups.push_back({t});
    return g;
  }

  int size() const { return static_cast<int>(groups.size()); }

  void validate() const {
    std::array<int, kNumKeypoints> seen{};
    for (const auto& grp : groups) {
      if (grp.empty()) throw ConfigError("model.groups", "empty keypoint group");
      for (int t : grp) {
        if (t < 0 || t >= kNumKeypoints) throw ConfigError("model.groups", "keypoint index out of range");
        if (seen[t]++) throw ConfigError("model.groups", "keypoint " + std::to_string(t) + " appears twice");
      }
    }
    for (int t = 0; t < kNumKeypoints; ++t) {
      if (!seen[t]) throw ConfigError("model.groups", "keypoint " + std::to_string(t) + " is not covered");
    }
  }
  bool operator==(const KeypointGroups&) const = default;
};

struct ModelConfig {
  int stem_channels = 8;
  std::array<int, 3> stage_channels{16, 32, 64};
  int fpn_channels = 64;
  int num_levels = 3;
  int tower_convs = 2;
  int heatmap_channels = 128;
  HeadVariant head;
  KeypointGroups groups = KeypointGroups::standard();

  void validate() const {
    auto positive = [](int v, const char* path) {
      if (v < 1) throw ConfigError(path, "must be >= 1");
    };
    positive(stem_channels, "model.stem_channels");
    for (int c : stage_channels) positive(c, "model.stage_channels");
    positive(fpn_channels, "model.fpn_channels");
    positive(heatmap_channels, "model.heatmap_channels");
    if (tower_convs < 0) throw ConfigError("model.tower_convs", "must be >= 0");
    if (num_levels < 3 || num_levels > 5) throw ConfigError("model.num_levels", "must lie in [3, 5]");
    if (head.separate_features && fpn_channels % 4 != 0) {
      throw ConfigError("model.fpn_channels", "must be divisible by 4 when separate_features is on");
    }
    head.validate();
    groups.validate();
  }

  int max_stride() const { return 8 << (num_levels - 1); }
  int stride(int level) const { return 8 << level; }

  /// Groups actually used by the KPAlign head.
  KeypointGroups active_groups() const { return head.grouped ? groups : KeypointGroups::singletons(); }
  bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::json head_to_json(const HeadVariant& h) {
  return {{"align", h.align},
          {"grouped", h.grouped},
          {"separate_features", h.separate_features},
          {"finer_sampling", h.finer_sampling},
          {"disable_aligner", h.disable_aligner},
          {"heatmap_aux", h.heatmap_aux},
          {"heatmap_stride", h.heatmap_stride},
          {"box_branch", h.box_branch}};
}

inline HeadVariant head_from_json(const nlohmann::json& j, const std::string& path, HeadVariant h = {}) {
  JsonObjectReader r(j, path);
  r.get("align", h.align);
  r.get("grouped", h.grouped);
  r.get("separate_features", h.separate_features);
  r.get("finer_sampling", h.finer_sampling);
  r.get("disable_aligner", h.disable_aligner);
  r.get("heatmap_aux", h.heatmap_aux);
  r.get("heatmap_stride", h.heatmap_stride);
  r.get("box_branch", h.box_branch);
  r.finish();
  return h;
}

inline nlohmann::json model_to_json(const ModelConfig& m) {
  return {{"stem_channels", m.stem_channels}, {"stage_channels", m.stage_channels},
          {"fpn_channels", m.fpn_channels},   {"num_levels", m.num_levels},
          {"tower_convs", m.tower_convs},     {"heatmap_channels", m.heatmap_channels},
          {"groups", m.groups.groups}};
}

inline ModelConfig model_from_json(const nlohmann::json& j, const std::string& path, ModelConfig m = {}) {
  JsonObjectReader r(j, path);
  r.get("stem_channels", m.stem_channels);
  r.get("stage_channels", m.stage_channels);
  r.get("fpn_channels", m.fpn_channels);
  r.get("num_levels", m.num_levels);
  r.get("tower_convs", m.tower_convs);
  r.get("heatmap_channels", m.heatmap_channels);
  r.get("groups", m.groups.groups);
  r.finish();
  return m;
}

/// Named parameter tensors in creation order.
template <typename T>
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
  };

  /// Returns a handle sharing storage with the stored parameter.
  Tensor<T> add(const std::string& name, Shape shape) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, Tensor<T>(std::move(shape), T(0), true)});
    return entries_.back().tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return entries_[it->second].tensor;
  }
  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return entries_[it->second].tensor;
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& e : entries_) {
      Tensor<U> t = out.add(e.name, e.tensor.shape());
      for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<U>(e.tensor[i]);
    }
    return out;
  }

  /// Deep copy (fresh storage, no gradients).
  ParameterSet clone() const {
    ParameterSet out;
    for (const auto& e : entries_) {
      Tensor<T> t = out.add(e.name, e.tensor.shape());
      std::copy(e.tensor.data().begin(), e.tensor.data().end(), t.data().begin());
    }
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Head outputs of one pyramid level. Keypoint offsets and locator offsets
/// are in units of the level stride, relative to each location.
template <typename T>
struct LevelOutput {
  int stride = 8;
  Tensor<T> cls;      // [1,H,W] logits
  Tensor<T> ctr;      // [1,H,W] logits
  Tensor<T> box;      // [4,H,W] positive (l,t,r,b)/stride, box branch only
  Tensor<T> kp;       // [2K,H,W]
  Tensor<T> locator;  // [2G,H,W], KPAlign only
};

template <typename T>
struct ModelOutput {
  std::vector<LevelOutput<T>> levels;
  Tensor<T> heatmap;  // [K,H/s,W/s] logits, training with heatmap_aux only
  int heatmap_stride = 0;
};

namespace model_detail {

inline constexpr double kPriorLogit = -4.59511985013459;  // -log((1 - 0.01) / 0.01)

/// Sampling positions of one keypoint group for every location of a level,
/// in the coordinates of the sampled map: (j + o_x, i + o_y), or
/// (2(j + o_x) + 0.5, 2(i + o_y) + 0.5) on the next finer level. With
/// use_offsets false the locator is ignored.
template <typename T>
Tensor<T> group_sample_points(Graph<T>& g, const Tensor<T>& locator, int group, bool finer, bool use_offsets) {
  const int h = locator.dim(1), w = locator.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const T mult = finer ? T(2) : T(1);
  const T shift = finer ? T(0.5) : T(0);
  Tensor<T> pts(Shape{h * w, 2});
  const T* ox = locator.ptr() + 2 * group * plane;
  const T* oy = ox + plane;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const std::size_t p = static_cast<std::size_t>(i) * w + j;
      const T dx = use_offsets ? ox[p] : T(0);
      const T dy = use_offsets ? oy[p] : T(0);
      pts[2 * p] = mult * (T(j) + dx) + shift;
      pts[2 * p + 1] = mult * (T(i) + dy) + shift;
    }
  }
  if (use_offsets && g.tracks({&locator})) {
    g.record("group_sample_points", {locator}, pts, [locator, pts, group, plane, mult]() mutable {
      auto gp = pts.grad();
      auto gl = locator.grad_mut();
      for (std::size_t p = 0; p < plane; ++p) {
        gl[2 * group * plane + p] += mult * gp[2 * p];
        gl[(2 * group + 1) * plane + p] += mult * gp[2 * p + 1];
      }
    });
  }
  return pts;
}

/// Final keypoint map [2K,H,W]: residual of keypoint t (member m of group g)
/// plus the group's locator offset o_g.
template <typename T>
Tensor<T> compose_keypoints(Graph<T>& g, const Tensor<T>& locator, const std::vector<Tensor<T>>& residuals,
                            const KeypointGroups& groups, bool use_offsets) {
  const int h = locator.dim(1), w = locator.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor<T> kp(Shape{2 * kNumKeypoints, h, w});
  for (int gi = 0; gi < groups.size(); ++gi) {
    const auto& members = groups.groups[gi];
    const Tensor<T>& res = residuals[gi];
    const int width = 2 * static_cast<int>(members.size());
    for (std::size_t m = 0; m < members.size(); ++m) {
      const int t = members[m];
      for (int c = 0; c < 2; ++c) {
        T* dst = kp.ptr() + (2 * t + c) * plane;
        const T* loc = locator.ptr() + (2 * gi + c) * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          dst[p] = res[p * width + 2 * m + c] + (use_offsets ? loc[p] : T(0));
        }
      }
    }
  }
  std::vector<Tensor<T>> inputs = residuals;
  if (use_offsets) inputs.push_back(locator);
  if (g.tracks(inputs)) {
    g.record("compose_keypoints", inputs, kp, [kp, locator, residuals, groups, use_offsets, plane]() mutable {
      auto gk = kp.grad();
      for (int gi = 0; gi < groups.size(); ++gi) {
        const auto& members = groups.groups[gi];
        Tensor<T> res = residuals[gi];
        const int width = 2 * static_cast<int>(members.size());
        T* gr = res.requires_grad() ? res.grad_mut().data() : nullptr;
        T* gl = use_offsets && locator.requires_grad() ? locator.grad_mut().data() : nullptr;
        for (std::size_t m = 0; m < members.size(); ++m) {
          const int t = members[m];
          for (int c = 0; c < 2; ++c) {
            const T* src = gk.data() + (2 * t + c) * plane;
            for (std::size_t p = 0; p < plane; ++p) {
              if (gr) gr[p * width + 2 * m + c] += src[p];
              if (gl) gl[(2 * gi + c) * plane + p] += src[p];
            }
          }
        }
      }
    });
  }
  return kp;
}

}  // namespace model_detail

/// Desk-scale keypoint detector: conv backbone, FPN, FCOS-style shared
/// heads, naive or KPAlign keypoint head, optional heatmap branch.
template <typename T>
class PoseModel {
 public:
  PoseModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    build(seed);
  }

  /// Wraps existing parameters; names and shapes must match the layout.
  PoseModel(const ModelConfig& cfg, ParameterSet<T> params) : cfg_(cfg) {
    cfg_.validate();
    build(0);
    for (auto& e : params_.entries()) {
      if (!params.contains(e.name)) throw std::invalid_argument("missing parameter " + e.name);
      const Tensor<T>& src = params.at(e.name);
      if (src.shape() != e.tensor.shape()) {
        throw DimensionError("parameter " + e.name + " has shape " + shape_str(src.shape()) + ", expected " +
                             shape_str(e.tensor.shape()));
      }
    }
    for (auto& e : params_.entries()) {
      e.tensor = params.at(e.name);
      e.tensor.set_requires_grad(true);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }

  /// Feature pyramid P3.. for an image [3,H,W].
  std::vector<Tensor<T>> backbone_fpn_forward(Graph<T>& g, const Tensor<T>& image) const {
    if (image.rank() != 3 || image.dim(0) != 3) {
      throw DimensionError("image must have shape [3,H,W], got " + shape_str(image.shape()));
    }
    const int s = cfg_.max_stride();
    if (image.dim(1) % s != 0 || image.dim(2) % s != 0) {
      throw DimensionError("image height and width must be divisible by " + std::to_string(s) + ", got " +
                           std::to_string(image.dim(1)) + "x" + std::to_string(image.dim(2)));
    }
    Tensor<T> x = conv(g, "backbone.stem1", image, 2, true);
    x = conv(g, "backbone.stem2", x, 2, true);
    std::array<Tensor<T>, 3> c;
    for (int k = 0; k < 3; ++k) {
      const std::string name = "backbone.stage" + std::to_string(k + 3);
      x = conv(g, name + ".conv1", x, 2, true);
      x = conv(g, name + ".conv2", x, 1, true);
      c[k] = x;
    }
    Tensor<T> top = conv(g, "fpn.lateral5", c[2], 1, false);
    std::array<Tensor<T>, 3> merged;
    merged[2] = top;
    for (int k = 1; k >= 0; --k) {
      Tensor<T> lat = conv(g, "fpn.lateral" + std::to_string(k + 3), c[k], 1, false);
      merged[k] = ops::add(g, lat, ops::upsample_nearest2x(g, merged[k + 1]));
    }
    std::vector<Tensor<T>> pyramid;
    for (int k = 0; k < 3; ++k) pyramid.push_back(conv(g, "fpn.output" + std::to_string(k + 3), merged[k], 1, false));
    for (int l = 3; l < cfg_.num_levels; ++l) {
      Tensor<T> in = l == 3 ? pyramid.back() : ops::relu(g, pyramid.back());
      pyramid.push_back(conv(g, "fpn.extra" + std::to_string(l + 3), in, 2, false));
    }
    return pyramid;
  }

  struct SharedHeadOutput {
    Tensor<T> cls, ctr, box;
  };

  /// Classification / center-ness / optional box predictions of one level;
  /// the same parameters serve every level.
  SharedHeadOutput shared_head_forward(Graph<T>& g, const Tensor<T>& level) const {
    Tensor<T> x = level;
    for (int k = 0; k < cfg_.tower_convs; ++k) x = conv(g, "head.cls_tower" + std::to_string(k), x, 1, true);
    SharedHeadOutput out;
    out.cls = conv(g, "head.cls_logits", x, 1, false);
    out.ctr = conv(g, "head.centerness", x, 1, false);
    if (cfg_.head.box_branch) out.box = ops::exp(g, conv(g, "head.box_pred", x, 1, false));
    return out;
  }

  Tensor<T> keypoint_tower(Graph<T>& g, const Tensor<T>& level) const {
    Tensor<T> x = level;
    for (int k = 0; k < cfg_.tower_convs; ++k) x = conv(g, "head.kp_tower" + std::to_string(k), x, 1, true);
    return x;
  }

  /// Naive head: one 3x3 conv regressing all 2K offsets from a single
  /// feature vector per location.
  Tensor<T> naive_keypoint_head(Graph<T>& g, const Tensor<T>& tower) const {
    return conv(g, "head.kp_pred", tower, 1, false);
  }

  struct KpAlignOutput {
    Tensor<T> kp;       // [2K,H,W]
    Tensor<T> locator;  // [2G,H,W]
  };

  /// KPAlign on level `level`: locator offsets o_g, bilinear sampling of the
  /// (per-group) features at (j,i)+o_g, per-group predictor residuals, and
  /// keypoint = residual + o_g. `towers` are the keypoint-tower outputs of
  /// every level; `group_features` the per-level separate feature maps
  /// (empty unless separate_features).
  KpAlignOutput kpalign_forward(Graph<T>& g, const std::vector<Tensor<T>>& towers,
                                const std::vector<Tensor<T>>& group_features, int level) const {
    const HeadVariant& hv = cfg_.head;
    if (!hv.align) throw ConfigError("head.align", "kpalign_forward needs align = true");
    const KeypointGroups groups = cfg_.active_groups();
    KpAlignOutput out;
    out.locator = conv(g, "head.kp_locator", towers[level], 1, false);
    const bool finer = hv.finer_sampling && level > 0;
    const int src_level = finer ? level - 1 : level;
    const bool use_offsets = !hv.disable_aligner;
    const int sub = cfg_.fpn_channels / 4;
    std::vector<Tensor<T>> residuals;
    for (int gi = 0; gi < groups.size(); ++gi) {
      Tensor<T> source = hv.separate_features ? ops::slice_channels(g, group_features[src_level], gi * sub, (gi + 1) * sub)
                                              : towers[src_level];
      Tensor<T> pts = model_detail::group_sample_points(g, out.locator, gi, finer, use_offsets);
      Tensor<T> v = ops::bilinear_sample(g, source, pts);
      const std::string name = "head.kp_predictor" + std::to_string(gi);
      residuals.push_back(ops::linear(g, v, params_.at(name + ".weight"), params_.at(name + ".bias")));
    }
    out.kp = model_detail::compose_keypoints(g, out.locator, residuals, groups, use_offsets);
    return out;
  }

  Tensor<T> separate_features(Graph<T>& g, const Tensor<T>& tower) const {
    return conv(g, "head.kp_group_features", tower, 1, true);
  }

  /// Training-only heatmap logits [K, H/s, W/s] on the pyramid level of the
  /// configured stride.
  Tensor<T> heatmap_branch_forward(Graph<T>& g, const std::vector<Tensor<T>>& pyramid) const {
    const int level = cfg_.head.heatmap_stride == 8 ? 0 : 1;
    Tensor<T> x = conv(g, "heatmap.conv0", pyramid[level], 1, true);
    x = conv(g, "heatmap.conv1", x, 1, true);
    return conv(g, "heatmap.logits", x, 1, false);
  }

  ModelOutput<T> forward(Graph<T>& g, const Tensor<T>& image, bool training) const {
    const std::vector<Tensor<T>> pyramid = backbone_fpn_forward(g, image);
    ModelOutput<T> out;
    std::vector<Tensor<T>> towers;
    for (const auto& p : pyramid) towers.push_back(keypoint_tower(g, p));
    std::vector<Tensor<T>> group_feats;
    if (cfg_.head.align && cfg_.head.separate_features) {
      for (const auto& t : towers) group_feats.push_back(separate_features(g, t));
    }
    for (int l = 0; l < static_cast<int>(pyramid.size()); ++l) {
      LevelOutput<T> lo;
      lo.stride = cfg_.stride(l);
      auto shared = shared_head_forward(g, pyramid[l]);
      lo.cls = shared.cls;
      lo.ctr = shared.ctr;
      lo.box = shared.box;
      if (cfg_.head.align) {
        auto ka = kpalign_forward(g, towers, group_feats, l);
        lo.kp = ka.kp;
        lo.locator = ka.locator;
      } else {
        lo.kp = naive_keypoint_head(g, towers[l]);
      }
      out.levels.push_back(std::move(lo));
    }
    if (training && cfg_.head.heatmap_aux) {
      out.heatmap = heatmap_branch_forward(g, pyramid);
      out.heatmap_stride = cfg_.head.heatmap_stride;
    }
    return out;
  }

  /// Radius in input pixels of the region that can influence a location of
  /// `level` through the convolution stack (sampling offsets excluded).
  int receptive_radius(int level) const {
    int r = 1 + 2;                   // stem: 3x3 at input strides 1 and 2
    r += 4 + 8 + 8 + 16 + 16 + 32;   // stages: 3x3 at strides 4,8 / 8,16 / 16,32
    r += 32;                         // top-down upsampling slack
    for (int l = 3; l <= level; ++l) r += cfg_.stride(l - 1);
    r += cfg_.stride(level) * (1 + cfg_.tower_convs + 1);  // fpn output, tower, predictor
    return r;
  }

 private:
  struct ConvSpec {
    int cout, cin, k;
    double std;
    double bias;
  };

  Tensor<T> conv(Graph<T>& g, const std::string& name, const Tensor<T>& x, int stride, bool relu) const {
    const Tensor<T>& w = params_.at(name + ".weight");
    const Tensor<T>& b = params_.at(name + ".bias");
    // Stride-2 convs drop the trailing pad so even extents halve exactly.
    const int pad = w.dim(2) / 2;
    Tensor<T> y = ops::conv2d(g, x, w, b, stride, pad, stride == 2 ? pad - 1 : pad);
    return relu ? ops::relu(g, y) : y;
  }

  void add_conv(CounterRng& rng, const std::string& name, const ConvSpec& s) {
    Tensor<T> w = params_.add(name + ".weight", Shape{s.cout, s.cin, s.k, s.k});
    Tensor<T> b = params_.add(name + ".bias", Shape{s.cout});
    for (auto& v : w.data()) v = static_cast<T>(s.std * rng.normal());
    for (auto& v : b.data()) v = static_cast<T>(s.bias);
  }

  void add_linear(CounterRng& rng, const std::string& name, int cout, int cin, double std) {
    Tensor<T> w = params_.add(name + ".weight", Shape{cout, cin});
    params_.add(name + ".bias", Shape{cout});
    for (auto& v : w.data()) v = static_cast<T>(std * rng.normal());
  }

  static double he(int cin, int k) { return std::sqrt(2.0 / (cin * k * k)); }
  static double lecun(int cin, int k) { return std::sqrt(1.0 / (cin * k * k)); }

  void build(std::uint64_t seed) {
    CounterRng rng(seed, 0x6d6f64656cULL);
    const int c = cfg_.fpn_channels;
    const auto& st = cfg_.stage_channels;
    add_conv(rng, "backbone.stem1", {cfg_.stem_channels, 3, 3, he(3, 3), 0});
    add_conv(rng, "backbone.stem2", {cfg_.stem_channels, cfg_.stem_channels, 3, he(cfg_.stem_channels, 3), 0});
    int cin = cfg_.stem_channels;
    for (int k = 0; k < 3; ++k) {
      const std::string name = "backbone.stage" + std::to_string(k + 3);
      add_conv(rng, name + ".conv1", {st[k], cin, 3, he(cin, 3), 0});
      add_conv(rng, name + ".conv2", {st[k], st[k], 3, he(st[k], 3), 0});
      cin = st[k];
    }
    for (int k = 0; k < 3; ++k) add_conv(rng, "fpn.lateral" + std::to_string(k + 3), {c, st[k], 1, lecun(st[k], 1), 0});
    for (int k = 0; k < 3; ++k) add_conv(rng, "fpn.output" + std::to_string(k + 3), {c, c, 3, lecun(c, 3), 0});
    for (int l = 3; l < cfg_.num_levels; ++l) add_conv(rng, "fpn.extra" + std::to_string(l + 3), {c, c, 3, lecun(c, 3), 0});

    for (int k = 0; k < cfg_.tower_convs; ++k) add_conv(rng, "head.cls_tower" + std::to_string(k), {c, c, 3, he(c, 3), 0});
    add_conv(rng, "head.cls_logits", {1, c, 1, 0.01, model_detail::kPriorLogit});
    add_conv(rng, "head.centerness", {1, c, 1, 0.01, 0});
    if (cfg_.head.box_branch) add_conv(rng, "head.box_pred", {4, c, 1, 0.01, 0});

    for (int k = 0; k < cfg_.tower_convs; ++k) add_conv(rng, "head.kp_tower" + std::to_string(k), {c, c, 3, he(c, 3), 0});
    if (!cfg_.head.align) {
      add_conv(rng, "head.kp_pred", {2 * kNumKeypoints, c, 3, 0.01, 0});
    } else {
      const KeypointGroups groups = cfg_.active_groups();
      add_conv(rng, "head.kp_locator", {2 * groups.size(), c, 3, 0.0, 0});
      int sample_c = c;
      if (cfg_.head.separate_features) {
        sample_c = c / 4;
        add_conv(rng, "head.kp_group_features", {groups.size() * sample_c, c, 1, he(c, 1), 0});
      }
      for (int gi = 0; gi < groups.size(); ++gi) {
        add_linear(rng, "head.kp_predictor" + std::to_string(gi), 2 * static_cast<int>(groups.groups[gi].size()),
                   sample_c, 0.01);
      }
    }
    if (cfg_.head.heatmap_aux) {
      const int hc = cfg_.heatmap_channels;
      add_conv(rng, "heatmap.conv0", {hc, c, 3, he(c, 3), 0});
      add_conv(rng, "heatmap.conv1", {hc, hc, 3, he(hc, 3), 0});
      add_conv(rng, "heatmap.logits", {kNumKeypoints, hc, 3, 0.01, model_detail::kPriorLogit});
    }
  }

  ModelConfig cfg_;
  ParameterSet<T> params_;
};

/// Parameters of a naive-head model computing exactly what an
/// ungrouped, same-level KPAlign head with its aligner disabled computes:
/// each predictor row becomes the centre tap of the naive 3x3 conv.
template <typename T>
ParameterSet<T> naive_equivalent_params(const PoseModel<T>& aligned, const ModelConfig& naive_cfg) {
  const ModelConfig& acfg = aligned.config();
  if (!acfg.head.align || acfg.head.grouped || acfg.head.separate_features || acfg.head.finer_sampling) {
    throw ConfigError("head", "naive equivalence needs an ungrouped, same-level KPAlign head without separate features");
  }
  PoseModel<T> naive(naive_cfg, 0);
  ParameterSet<T> out = naive.params().clone();
  for (auto& e : out.entries()) {
    if (aligned.params().contains(e.name)) {
      const auto& src = aligned.params().at(e.name);
      std::copy(src.data().begin(), src.data().end(), e.tensor.data().begin());
    }
  }
  Tensor<T>& w = out.at("head.kp_pred.weight");
  Tensor<T>& b = out.at("head.kp_pred.bias");
  std::fill(w.data().begin(), w.data().end(), T(0));
  const int c = w.dim(1);
  for (int t = 0; t < kNumKeypoints; ++t) {
    const auto& pw = aligned.params().at("head.kp_predictor" + std::to_string(t) + ".weight");
    const auto& pb = aligned.params().at("head.kp_predictor" + std::to_string(t) + ".bias");
    for (int r = 0; r < 2; ++r) {
      for (int ch = 0; ch < c; ++ch) w[((static_cast<std::size_t>(2 * t + r) * c + ch) * 3 + 1) * 3 + 1] = pw[static_cast<std::size_t>(r) * c + ch];
      b[2 * t + r] = pb[r];
    }
  }
  return out;
}

}  // namespace posealign
