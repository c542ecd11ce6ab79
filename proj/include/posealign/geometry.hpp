#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace posealign {

inline constexpr int kNumKeypoints = 17;

/// COCO keypoint order.
enum Keypoint : int {
  kNose = 0,
  kLeftEye,
  kRightEye,
  kLeftEar,
  kRightEar,
  kLeftShoulder,
  kRightShoulder,
  kLeftElbow,
  kRightElbow,
  kLeftWrist,
  kRightWrist,
  kLeftHip,
  kRightHip,
  kLeftKnee,
  kRightKnee,
  kLeftAnkle,
  kRightAnkle,
};

inline constexpr std::array<const char*, kNumKeypoints> kKeypointNames = {
    "nose",       "left_eye",    "right_eye",  "left_ear",   "right_ear",  "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hip",
    "right_hip",  "left_knee",   "right_knee", "left_ankle", "right_ankle"};

/// Horizontal-flip partner of each keypoint (midline points map to themselves).
inline constexpr std::array<int, kNumKeypoints> kFlipPermutation = {0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15};

/// COCO per-keypoint OKS sigmas.
inline constexpr std::array<double, kNumKeypoints> kCocoSigmas = {
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089};

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

struct Box {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  double max_side() const { return std::max(width(), height()); }
  Point center() const { return {(x0 + x1) / 2, (y0 + y1) / 2}; }
  bool valid() const { return x0 <= x1 && y0 <= y1; }
  bool operator==(const Box&) const = default;
};

/// One person: 17 keypoints in image pixels, visibility in {0,1,2}
/// (unlabeled / labeled-occluded / labeled-visible) and area in pixel^2.
struct InstanceAnnotation {
  std::array<Point, kNumKeypoints> keypoints{};
  std::array<int, kNumKeypoints> visibility{};
  double area = 0.0;

  int num_labeled() const {
    return static_cast<int>(std::count_if(visibility.begin(), visibility.end(), [](int v) { return v > 0; }));
  }
  bool operator==(const InstanceAnnotation&) const = default;
};

class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Tightest axis-aligned box over keypoints with visibility > 0.
inline Box min_enclosing_rect(const InstanceAnnotation& ann) {
  Box box{};
  bool any = false;
  for (int t = 0; t < kNumKeypoints; ++t) {
    if (ann.visibility[t] <= 0) continue;
    const Point& p = ann.keypoints[t];
    if (!any) {
      box = {p.x, p.y, p.x, p.y};
      any = true;
    } else {
      box.x0 = std::min(box.x0, p.x);
      box.y0 = std::min(box.y0, p.y);
      box.x1 = std::max(box.x1, p.x);
      box.y1 = std::max(box.y1, p.y);
    }
  }
  if (!any) throw GeometryError("min_enclosing_rect: annotation has no labeled keypoints");
  return box;
}

/// Enclosing box of a full set of predicted points.
inline Box enclosing_rect(std::span<const Point> points) {
  if (points.empty()) throw GeometryError("enclosing_rect: no points");
  Box box{points[0].x, points[0].y, points[0].x, points[0].y};
  for (const Point& p : points.subspan(1)) {
    box.x0 = std::min(box.x0, p.x);
    box.y0 = std::min(box.y0, p.y);
    box.x1 = std::max(box.x1, p.x);
    box.y1 = std::max(box.y1, p.y);
  }
  return box;
}

inline double iou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double ih = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

struct ScoredBox {
  double score = 0.0;
  Box box;
};

/// Greedy NMS. Visits detections by descending score (ties: lower index
/// first) and keeps one iff its IoU with every kept detection is <= threshold.
/// Returns kept indices in visiting order.
inline std::vector<std::size_t> nms(std::span<const ScoredBox> dets, double threshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<std::size_t> kept;
  for (std::size_t i : order) {
    bool keep = true;
    for (std::size_t k : kept) {
      if (iou(dets[i].box, dets[k].box) > threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(i);
  }
  return kept;
}

/// Object keypoint similarity between predicted points and a ground truth,
/// COCO form with per-keypoint constants kappa_i = 2 sigma_i:
///   sum_i exp(-d_i^2 / (2 area kappa_i^2)) [v_i > 0] / sum_i [v_i > 0].
inline double oks(std::span<const Point> pred, const InstanceAnnotation& gt, std::span<const double> sigmas) {
  if (pred.size() != kNumKeypoints || sigmas.size() != kNumKeypoints) {
    throw GeometryError("oks: expected 17 predicted points and 17 sigmas");
  }
  if (!(gt.area > 0.0)) throw GeometryError("oks: ground-truth area must be > 0, got " + std::to_string(gt.area));
  double total = 0.0;
  int count = 0;
  for (int t = 0; t < kNumKeypoints; ++t) {
    if (gt.visibility[t] <= 0) continue;
    const double dx = pred[t].x - gt.keypoints[t].x;
    const double dy = pred[t].y - gt.keypoints[t].y;
    const double kappa = 2.0 * sigmas[t];
    const double e = (dx * dx + dy * dy) / (kappa * kappa) / gt.area / 2.0;
    total += std::exp(-e);
    ++count;
  }
  if (count == 0) throw GeometryError("oks: ground truth has no labeled keypoints");
  return total / count;
}

inline std::array<double, kNumKeypoints> uniform_sigmas(double sigma) {
  std::array<double, kNumKeypoints> s{};
  s.fill(sigma);
  return s;
}

/// Horizontal flip: x' = image_width - x, with left/right slots swapped.
inline InstanceAnnotation flip_keypoints(const InstanceAnnotation& ann, double image_width) {
  InstanceAnnotation out;
  out.area = ann.area;
  for (int t = 0; t < kNumKeypoints; ++t) {
    const int dst = kFlipPermutation[t];
    out.keypoints[dst] = {image_width - ann.keypoints[t].x, ann.keypoints[t].y};
    out.visibility[dst] = ann.visibility[t];
  }
  return out;
}

inline Box flip_box(const Box& box, double image_width) {
  return {image_width - box.x1, box.y0, image_width - box.x0, box.y1};
}

}  // namespace posealign
