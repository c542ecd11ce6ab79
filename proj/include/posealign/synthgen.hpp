#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "posealign/geometry.hpp"
#include "posealign/rng.hpp"
#include "posealign/json_util.hpp"
#include "posealign/tensor.hpp"

namespace posealign {

struct SceneSpec {
  std::uint64_t seed = 1;
  int height = 128;
  int width = 128;
  int min_instances = 1;
  int max_instances = 3;
  double min_side = 32.0;
  double max_side = 96.0;
  double occlusion_prob = 0.3;

  void validate() const {
    if (height < 8) throw ConfigError("scene.height", "must be >= 8");
    if (width < 8) throw ConfigError("scene.width", "must be >= 8");
    if (min_instances < 1) throw ConfigError("scene.min_instances", "must be >= 1");
    if (max_instances < min_instances) throw ConfigError("scene.max_instances", "must be >= scene.min_instances");
    if (!(min_side > 0.0)) throw ConfigError("scene.min_side", "must be > 0");
    if (!(max_side >= min_side)) throw ConfigError("scene.max_side", "must be >= scene.min_side");
    if (max_side > std::min(height, width) - 2) {
      throw ConfigError("scene.max_side", "must fit inside the image (<= min(height, width) - 2)");
    }
    if (!(occlusion_prob >= 0.0 && occlusion_prob <= 1.0)) throw ConfigError("scene.occlusion_prob", "must lie in [0, 1]");
  }
  bool operator==(const SceneSpec&) const = default;
};

struct Sample {
  Tensor<float> image;  // [3,H,W], values in [0,1]
  std::vector<InstanceAnnotation> annotations;
  /// Set when placement gave up before reaching the drawn instance count.
  bool placement_shortfall = false;
};

namespace synth_detail {

struct Rgb {
  float r, g, b;
};

struct Canvas {
  int h, w;
  std::vector<float> rgb;  // planar [3,H,W]
  std::vector<int> owner;  // last figure that covered the pixel, -1 = background

  void blend(int i, int j, float alpha, Rgb c, int id) {
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const std::size_t p = static_cast<std::size_t>(i) * w + j;
    rgb[p] = rgb[p] * (1 - alpha) + c.r * alpha;
    rgb[plane + p] = rgb[plane + p] * (1 - alpha) + c.g * alpha;
    rgb[2 * plane + p] = rgb[2 * plane + p] * (1 - alpha) + c.b * alpha;
    if (alpha >= 0.5f) owner[p] = id;
  }

  // Antialiased capsule around segment a-b; pixel (i,j) is sampled at its centre.
  void capsule(Point a, Point b, double radius, Rgb c, int id) {
    const int i0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - radius - 1)));
    const int i1 = std::min(h - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + radius + 1)));
    const int j0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - radius - 1)));
    const int j1 = std::min(w - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + radius + 1)));
    const double vx = b.x - a.x, vy = b.y - a.y;
    const double len2 = vx * vx + vy * vy;
    for (int i = i0; i <= i1; ++i) {
      for (int j = j0; j <= j1; ++j) {
        const double px = j + 0.5 - a.x, py = i + 0.5 - a.y;
        const double t = len2 > 0 ? std::clamp((px * vx + py * vy) / len2, 0.0, 1.0) : 0.0;
        const double dx = px - t * vx, dy = py - t * vy;
        const double d = std::sqrt(dx * dx + dy * dy);
        const double alpha = std::clamp(radius + 0.5 - d, 0.0, 1.0);
        if (alpha > 0) blend(i, j, static_cast<float>(alpha), c, id);
      }
    }
  }

  void disk(Point p, double radius, Rgb c, int id) { capsule(p, p, radius, c, id); }
};

// Limb colours are shared by left/right counterparts so that mirrored
// figures stay consistent with their mirrored labels.
inline constexpr Rgb kTorso{0.35f, 0.45f, 0.80f};
inline constexpr Rgb kUpperArm{0.95f, 0.55f, 0.10f};
inline constexpr Rgb kForearm{0.95f, 0.90f, 0.15f};
inline constexpr Rgb kThigh{0.15f, 0.75f, 0.25f};
inline constexpr Rgb kShin{0.10f, 0.80f, 0.85f};
inline constexpr Rgb kSkin{0.95f, 0.78f, 0.65f};
inline constexpr std::array<Rgb, kNumKeypoints> kMarker = {{
    {0.85f, 0.05f, 0.05f},                                              // nose
    {0.05f, 0.05f, 0.05f}, {0.05f, 0.05f, 0.05f},                       // eyes
    {0.45f, 0.25f, 0.10f}, {0.45f, 0.25f, 0.10f},                       // ears
    {0.90f, 0.10f, 0.90f}, {0.90f, 0.10f, 0.90f},                       // shoulders
    {0.75f, 0.00f, 0.20f}, {0.75f, 0.00f, 0.20f},                       // elbows
    {1.00f, 1.00f, 1.00f}, {1.00f, 1.00f, 1.00f},                       // wrists
    {0.45f, 0.10f, 0.60f}, {0.45f, 0.10f, 0.60f},                       // hips
    {0.05f, 0.15f, 0.45f}, {0.05f, 0.15f, 0.45f},                       // knees
    {0.40f, 0.20f, 0.05f}, {0.40f, 0.20f, 0.05f},                       // ankles
}};

struct Figure {
  std::array<Point, kNumKeypoints> kp;
  Point head;
  double head_radius;
  double limb_radius;
};

inline Point rotate(Point p, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * p.x - s * p.y, s * p.x + c * p.y};
}

// Articulated pose in body units (about one unit tall, y pointing down).
// Facing the viewer: the figure's left side is at +x.
inline std::array<Point, kNumKeypoints> random_pose(CounterRng& rng, Point* head, double* head_radius) {
  std::array<Point, kNumKeypoints> kp{};
  const double lean = rng.uniform(-0.25, 0.25);
  const Point up{std::sin(lean), -std::cos(lean)};
  const Point across{std::cos(lean), std::sin(lean)};
  const Point pelvis{0.0, 0.0};
  const Point neck{pelvis.x + 0.30 * up.x, pelvis.y + 0.30 * up.y};
  auto offset = [](Point p, Point dir, double d) { return Point{p.x + d * dir.x, p.y + d * dir.y}; };

  kp[kLeftShoulder] = offset(neck, across, 0.11);
  kp[kRightShoulder] = offset(neck, across, -0.11);
  kp[kLeftHip] = offset(pelvis, across, 0.075);
  kp[kRightHip] = offset(pelvis, across, -0.075);

  const double tilt = lean + rng.uniform(-0.2, 0.2);
  const Point h_up{std::sin(tilt), -std::cos(tilt)};
  const Point h_across{std::cos(tilt), std::sin(tilt)};
  const Point hc = offset(neck, h_up, 0.12);
  const double yaw = rng.uniform(-0.012, 0.012);
  const Point face = offset(hc, h_across, yaw);
  kp[kNose] = offset(face, h_up, -0.012);
  kp[kLeftEye] = offset(offset(face, h_across, 0.026), h_up, 0.014);
  kp[kRightEye] = offset(offset(face, h_across, -0.026), h_up, 0.014);
  kp[kLeftEar] = offset(offset(hc, h_across, 0.056 - yaw), h_up, 0.006);
  kp[kRightEar] = offset(offset(hc, h_across, -0.056 - yaw), h_up, 0.006);
  *head = hc;
  *head_radius = 0.062;

  for (int side : {+1, -1}) {
    const int sho = side > 0 ? kLeftShoulder : kRightShoulder;
    const int elb = side > 0 ? kLeftElbow : kRightElbow;
    const int wri = side > 0 ? kLeftWrist : kRightWrist;
    const double upper = rng.uniform(-0.3, 2.6);
    const double fore = upper + rng.uniform(-0.4, 2.2);
    const Point du = rotate({side * std::sin(upper), std::cos(upper)}, lean);
    const Point df = rotate({side * std::sin(fore), std::cos(fore)}, lean);
    kp[elb] = offset(kp[sho], du, 0.16);
    kp[wri] = offset(kp[elb], df, 0.15);

    const int hip = side > 0 ? kLeftHip : kRightHip;
    const int kne = side > 0 ? kLeftKnee : kRightKnee;
    const int ank = side > 0 ? kLeftAnkle : kRightAnkle;
    const double thigh = rng.uniform(-0.15, 0.8);
    const double shin = thigh - rng.uniform(-0.2, 1.1);
    const Point dt{side * std::sin(thigh), std::cos(thigh)};
    const Point ds{side * std::sin(shin), std::cos(shin)};
    kp[kne] = offset(kp[hip], dt, 0.22);
    kp[ank] = offset(kp[kne], ds, 0.21);
  }

  const double spin = rng.uniform(-0.3, 0.3);
  for (auto& p : kp) p = rotate(p, spin);
  *head = rotate(*head, spin);
  return kp;
}

// Keypoints sit on a 1/256 px grid so mirror arithmetic is exact.
inline double quantize(double v) { return std::round(v * 256.0) / 256.0; }

inline void draw_figure(Canvas& canvas, const Figure& f, int id) {
  const auto& k = f.kp;
  const double r = f.limb_radius;
  const Point neck{(k[kLeftShoulder].x + k[kRightShoulder].x) / 2, (k[kLeftShoulder].y + k[kRightShoulder].y) / 2};
  const Point pelvis{(k[kLeftHip].x + k[kRightHip].x) / 2, (k[kLeftHip].y + k[kRightHip].y) / 2};
  canvas.capsule(neck, pelvis, r * 1.3, kTorso, id);
  canvas.capsule(k[kLeftShoulder], k[kRightShoulder], r, kTorso, id);
  canvas.capsule(k[kLeftHip], k[kRightHip], r, kTorso, id);
  canvas.capsule(neck, f.head, r, kTorso, id);
  canvas.capsule(k[kLeftShoulder], k[kLeftElbow], r, kUpperArm, id);
  canvas.capsule(k[kRightShoulder], k[kRightElbow], r, kUpperArm, id);
  canvas.capsule(k[kLeftElbow], k[kLeftWrist], r, kForearm, id);
  canvas.capsule(k[kRightElbow], k[kRightWrist], r, kForearm, id);
  canvas.capsule(k[kLeftHip], k[kLeftKnee], r, kThigh, id);
  canvas.capsule(k[kRightHip], k[kRightKnee], r, kThigh, id);
  canvas.capsule(k[kLeftKnee], k[kLeftAnkle], r, kShin, id);
  canvas.capsule(k[kRightKnee], k[kRightAnkle], r, kShin, id);
  canvas.disk(f.head, f.head_radius, kSkin, id);
  const double joint_r = std::max(1.0, r * 1.2);
  for (int t = kLeftShoulder; t < kNumKeypoints; ++t) canvas.disk(k[t], joint_r, kMarker[t], id);
  const double face_r = std::max(0.5, f.head_radius * 0.22);
  for (int t = kNose; t <= kRightEar; ++t) canvas.disk(k[t], face_r, kMarker[t], id);
}

}  // namespace synth_detail

/// Renders scene `index` of the stream defined by `spec`. The result is a
/// pure function of (spec, index).
inline Sample generate_scene(const SceneSpec& spec, std::uint64_t index) {
  using namespace synth_detail;
  spec.validate();
  CounterRng rng(spec.seed, index);
  const int h = spec.height, w = spec.width;

  Canvas canvas{h, w, std::vector<float>(static_cast<std::size_t>(3) * h * w), std::vector<int>(static_cast<std::size_t>(h) * w, -1)};
  {
    const double gx = rng.uniform(-1, 1), gy = rng.uniform(-1, 1);
    std::array<double, 3> base{rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7)};
    CounterRng noise(spec.seed ^ 0x6e6f697365ULL, index);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
          const double v = base[c] + 0.25 * ((j + 0.5) / w - 0.5) * gx + 0.25 * ((i + 0.5) / h - 0.5) * gy +
                           noise.uniform(-0.06, 0.06);
          canvas.rgb[c * plane + static_cast<std::size_t>(i) * w + j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
  }

  const int wanted = rng.uniform_int(spec.min_instances, spec.max_instances);
  std::vector<Figure> figures;
  std::vector<Box> extents;
  constexpr int kMaxAttempts = 64;
  for (int n = 0; n < wanted; ++n) {
    const bool may_overlap = rng.bernoulli(spec.occlusion_prob);
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
      Figure f{};
      double head_r = 0;
      auto body = random_pose(rng, &f.head, &head_r);
      Box bb{body[0].x, body[0].y, body[0].x, body[0].y};
      for (const Point& p : body) {
        bb.x0 = std::min(bb.x0, p.x);
        bb.y0 = std::min(bb.y0, p.y);
        bb.x1 = std::max(bb.x1, p.x);
        bb.y1 = std::max(bb.y1, p.y);
      }
      // Keypoint quantisation moves the box side by < 1/128 px; keep clear of the ends.
      const double margin = std::min(0.01, (spec.max_side - spec.min_side) / 4);
      const double side = rng.uniform(spec.min_side + margin, spec.max_side - margin);
      const double k = side / bb.max_side();
      const double bw = bb.width() * k, bh = bb.height() * k;
      const double ox = rng.uniform(1.0, w - 1.0 - bw);
      const double oy = rng.uniform(1.0, h - 1.0 - bh);
      for (int t = 0; t < kNumKeypoints; ++t) {
        f.kp[t] = {quantize(ox + (body[t].x - bb.x0) * k), quantize(oy + (body[t].y - bb.y0) * k)};
      }
      f.head = {ox + (f.head.x - bb.x0) * k, oy + (f.head.y - bb.y0) * k};
      f.head_radius = head_r * k;
      f.limb_radius = std::max(0.8, 0.03 * side);

      Box kb{f.kp[0].x, f.kp[0].y, f.kp[0].x, f.kp[0].y};
      for (const Point& p : f.kp) {
        kb.x0 = std::min(kb.x0, p.x);
        kb.y0 = std::min(kb.y0, p.y);
        kb.x1 = std::max(kb.x1, p.x);
        kb.y1 = std::max(kb.y1, p.y);
      }
      if (kb.x0 < 0.0 || kb.y0 < 0.0 || kb.x1 >= w || kb.y1 >= h) continue;
      const double pad = f.head_radius + 2.0 * f.limb_radius + 1.0;
      const Box ext{kb.x0 - pad, kb.y0 - pad, kb.x1 + pad, kb.y1 + pad};
      if (!may_overlap) {
        const bool clash = std::any_of(extents.begin(), extents.end(), [&](const Box& o) {
          return ext.x0 < o.x1 && o.x0 < ext.x1 && ext.y0 < o.y1 && o.y0 < ext.y1;
        });
        if (clash) continue;
      }
      figures.push_back(f);
      extents.push_back(ext);
      placed = true;
    }
    if (!placed) break;
  }

  for (std::size_t n = 0; n < figures.size(); ++n) draw_figure(canvas, figures[n], static_cast<int>(n));

  Sample sample;
  sample.placement_shortfall = static_cast<int>(figures.size()) < wanted;
  for (std::size_t n = 0; n < figures.size(); ++n) {
    InstanceAnnotation ann;
    for (int t = 0; t < kNumKeypoints; ++t) {
      const Point p = figures[n].kp[t];
      ann.keypoints[t] = p;
      const int i = std::clamp(static_cast<int>(std::floor(p.y)), 0, h - 1);
      const int j = std::clamp(static_cast<int>(std::floor(p.x)), 0, w - 1);
      ann.visibility[t] = canvas.owner[static_cast<std::size_t>(i) * w + j] > static_cast<int>(n) ? 1 : 2;
    }
    ann.area = min_enclosing_rect(ann).area();
    sample.annotations.push_back(ann);
  }
  sample.image = Tensor<float>(Shape{3, h, w}, std::move(canvas.rgb));
  return sample;
}

/// Mirrors a sample horizontally (image columns and annotations).
inline Sample flip_sample(const Sample& s) {
  const int h = s.image.dim(1), w = s.image.dim(2);
  Sample out;
  out.placement_shortfall = s.placement_shortfall;
  out.image = Tensor<float>(s.image.shape());
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const std::size_t row = (static_cast<std::size_t>(c) * h + i) * w;
        out.image[row + j] = s.image[row + (w - 1 - j)];
      }
  for (const auto& a : s.annotations) out.annotations.push_back(flip_keypoints(a, w));
  return out;
}

// ---------------------------------------------------------------------------
// Dataset manifest

inline constexpr int kManifestVersion = 1;

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetManifest {
  int format_version = kManifestVersion;
  SceneSpec spec;
  int count = 0;
  bool operator==(const DatasetManifest&) const = default;
};

inline void to_json(nlohmann::json& j, const SceneSpec& s) {
  j = nlohmann::json{{"seed", s.seed},
                     {"height", s.height},
                     {"width", s.width},
                     {"min_instances", s.min_instances},
                     {"max_instances", s.max_instances},
                     {"min_side", s.min_side},
                     {"max_side", s.max_side},
                     {"occlusion_prob", s.occlusion_prob}};
}

inline DatasetManifest dataset_manifest(const SceneSpec& spec, int count) {
  if (count < 1) throw ManifestError("dataset_manifest: count must be >= 1, got " + std::to_string(count));
  spec.validate();
  return DatasetManifest{kManifestVersion, spec, count};
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  return nlohmann::json{{"format_version", m.format_version}, {"kind", "dataset"}, {"spec", m.spec}, {"count", m.count}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kManifestVersion) {
      throw ManifestError("dataset manifest version " + std::to_string(version) + " does not match supported version " +
                          std::to_string(kManifestVersion));
    }
    const auto& s = j.at("spec");
    SceneSpec spec;
    spec.seed = s.at("seed").get<std::uint64_t>();
    spec.height = s.at("height").get<int>();
    spec.width = s.at("width").get<int>();
    spec.min_instances = s.at("min_instances").get<int>();
    spec.max_instances = s.at("max_instances").get<int>();
    spec.min_side = s.at("min_side").get<double>();
    spec.max_side = s.at("max_side").get<double>();
    spec.occlusion_prob = s.at("occlusion_prob").get<double>();
    return dataset_manifest(spec, j.at("count").get<int>());
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(std::string("malformed dataset manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw ManifestError(std::string("invalid dataset manifest: ") + e.what());
  }
}

inline void write_manifest(const std::string& path, const DatasetManifest& m) {
  std::ofstream os(path);
  if (!os) throw ManifestError("cannot write " + path);
  os << manifest_to_json(m).dump(2) << '\n';
}

inline DatasetManifest read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ManifestError("cannot read " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError("malformed dataset manifest " + path + ": " + e.what());
  }
  return manifest_from_json(j);
}

}  // namespace posealign
