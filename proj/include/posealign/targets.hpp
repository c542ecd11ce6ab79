#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "posealign/geometry.hpp"

namespace posealign {

/// FPN level with its positive-sample size range (lo, hi] on the pseudo-box
/// max side, in pixels.
struct LevelAssignment {
  int level = 0;
  int stride = 8;
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();
};

/// Three levels (strides 8/16/32) use (0,32], (32,64], (64,inf); larger
/// pyramids fall back to the FCOS ranges (0,64], (64,128], ... with the last
/// level open-ended.
inline std::vector<LevelAssignment> default_level_assignments(int num_levels) {
  std::vector<LevelAssignment> out;
  const double inf = std::numeric_limits<double>::infinity();
  if (num_levels == 3) {
    out = {{0, 8, 0.0, 32.0}, {1, 16, 32.0, 64.0}, {2, 32, 64.0, inf}};
    return out;
  }
  const double edges[] = {0.0, 64.0, 128.0, 256.0, 512.0};
  for (int l = 0; l < num_levels; ++l) {
    out.push_back({l, 8 << l, edges[std::min(l, 4)], l + 1 < num_levels ? edges[std::min(l + 1, 4)] : inf});
  }
  return out;
}

/// Image position of location (i, j) on a level with the given stride.
inline Point location_center(int stride, int i, int j) {
  return {stride / 2.0 + j * static_cast<double>(stride), stride / 2.0 + i * static_cast<double>(stride)};
}

struct KeypointOffsets {
  std::array<double, 2 * kNumKeypoints> offsets{};
  std::array<double, 2 * kNumKeypoints> mask{};
};

/// Stride-normalised offsets from a location centre to each keypoint;
/// unlabeled keypoints get mask 0.
inline KeypointOffsets keypoint_offsets(const InstanceAnnotation& ann, Point center, int stride) {
  KeypointOffsets out;
  for (int t = 0; t < kNumKeypoints; ++t) {
    out.offsets[2 * t] = (ann.keypoints[t].x - center.x) / stride;
    out.offsets[2 * t + 1] = (ann.keypoints[t].y - center.y) / stride;
    const double m = ann.visibility[t] > 0 ? 1.0 : 0.0;
    out.mask[2 * t] = m;
    out.mask[2 * t + 1] = m;
  }
  return out;
}

/// sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b)); 0 when the centre touches
/// or leaves the box.
inline double centerness_target(const Box& box, Point c) {
  const double l = c.x - box.x0, r = box.x1 - c.x, t = c.y - box.y0, b = box.y1 - c.y;
  if (l <= 0.0 || r <= 0.0 || t <= 0.0 || b <= 0.0) return 0.0;
  return std::sqrt((std::min(l, r) / std::max(l, r)) * (std::min(t, b) / std::max(t, b)));
}

/// Distances (l, t, r, b) from the location to the box sides, divided by the
/// stride and clamped at 0.
inline std::array<double, 4> box_offsets(const Box& box, Point c, int stride) {
  return {std::max(0.0, c.x - box.x0) / stride, std::max(0.0, c.y - box.y0) / stride,
          std::max(0.0, box.x1 - c.x) / stride, std::max(0.0, box.y1 - c.y) / stride};
}

/// Dense per-location targets of one pyramid level, channel-major.
struct LevelTargets {
  int stride = 8;
  int height = 0;
  int width = 0;
  std::vector<double> cls;          // [H*W] in {0,1}
  std::vector<double> kp_offsets;   // [2K,H,W]
  std::vector<double> kp_mask;      // [2K,H,W]
  std::vector<double> centerness;   // [H*W], 0 on negatives
  std::vector<double> box_offsets;  // [4,H,W]
  std::vector<int> instance_id;     // [H*W], -1 on negatives

  std::size_t cells() const { return static_cast<std::size_t>(height) * width; }
  int num_positive() const {
    int n = 0;
    for (double c : cls) n += c > 0.5;
    return n;
  }
};

namespace targets_detail {

inline int level_for_size(std::span<const LevelAssignment> levels, double side) {
  for (std::size_t l = 0; l < levels.size(); ++l) {
    if (side > levels[l].lo && side <= levels[l].hi) return static_cast<int>(l);
  }
  return side <= levels.front().lo ? 0 : static_cast<int>(levels.size()) - 1;
}

inline void fill_positive(LevelTargets& lt, std::size_t cell, int id, const InstanceAnnotation& ann, const Box& box,
                          Point c) {
  const std::size_t n = lt.cells();
  lt.cls[cell] = 1.0;
  lt.instance_id[cell] = id;
  const KeypointOffsets ko = keypoint_offsets(ann, c, lt.stride);
  for (int ch = 0; ch < 2 * kNumKeypoints; ++ch) {
    lt.kp_offsets[ch * n + cell] = ko.offsets[ch];
    lt.kp_mask[ch * n + cell] = ko.mask[ch];
  }
  lt.centerness[cell] = centerness_target(box, c);
  const auto bo = box_offsets(box, c, lt.stride);
  for (int ch = 0; ch < 4; ++ch) lt.box_offsets[ch * n + cell] = bo[ch];
}

inline void clear_positive(LevelTargets& lt, std::size_t cell) {
  const std::size_t n = lt.cells();
  lt.cls[cell] = 0.0;
  lt.instance_id[cell] = -1;
  for (int ch = 0; ch < 2 * kNumKeypoints; ++ch) {
    lt.kp_offsets[ch * n + cell] = 0.0;
    lt.kp_mask[ch * n + cell] = 0.0;
  }
  lt.centerness[cell] = 0.0;
  for (int ch = 0; ch < 4; ++ch) lt.box_offsets[ch * n + cell] = 0.0;
}

}  // namespace targets_detail

/// FCOS-style assignment on pseudo-boxes. A location is positive for an
/// instance when its centre lies inside the pseudo-box (borders included)
/// and the box max side falls in the level's range; the smallest-area box
/// wins ambiguous locations. Instances left without any positive receive
/// the free location nearest their box centre on their size level.
inline std::vector<LevelTargets> assign_locations(std::span<const InstanceAnnotation> annotations,
                                                  std::span<const std::pair<int, int>> level_shapes,
                                                  std::span<const LevelAssignment> levels) {
  using namespace targets_detail;
  if (level_shapes.size() != levels.size()) {
    throw GeometryError("assign_locations: level shape count does not match assignment count");
  }
  std::vector<Box> boxes;
  for (const auto& a : annotations) boxes.push_back(min_enclosing_rect(a));

  std::vector<LevelTargets> out(levels.size());
  for (std::size_t l = 0; l < levels.size(); ++l) {
    LevelTargets& lt = out[l];
    lt.stride = levels[l].stride;
    lt.height = level_shapes[l].first;
    lt.width = level_shapes[l].second;
    const std::size_t n = lt.cells();
    lt.cls.assign(n, 0.0);
    lt.kp_offsets.assign(2 * kNumKeypoints * n, 0.0);
    lt.kp_mask.assign(2 * kNumKeypoints * n, 0.0);
    lt.centerness.assign(n, 0.0);
    lt.box_offsets.assign(4 * n, 0.0);
    lt.instance_id.assign(n, -1);

    for (int i = 0; i < lt.height; ++i) {
      for (int j = 0; j < lt.width; ++j) {
        const Point c = location_center(lt.stride, i, j);
        int best = -1;
        for (std::size_t k = 0; k < boxes.size(); ++k) {
          const Box& b = boxes[k];
          const double side = b.max_side();
          if (!(side > levels[l].lo && side <= levels[l].hi)) continue;
          if (c.x < b.x0 || c.x > b.x1 || c.y < b.y0 || c.y > b.y1) continue;
          if (best < 0 || b.area() < boxes[best].area()) best = static_cast<int>(k);
        }
        if (best >= 0) {
          fill_positive(lt, static_cast<std::size_t>(i) * lt.width + j, best, annotations[best], boxes[best], c);
        }
      }
    }
  }

  // Guarantee one positive per instance, smallest boxes first.
  std::vector<int> count(boxes.size(), 0);
  for (const auto& lt : out)
    for (int id : lt.instance_id)
      if (id >= 0) ++count[id];
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return boxes[a].area() < boxes[b].area(); });
  for (std::size_t k : order) {
    if (count[k] > 0) continue;
    const int l = level_for_size(levels, boxes[k].max_side());
    LevelTargets& lt = out[l];
    const Point bc = boxes[k].center();
    std::vector<std::pair<double, std::size_t>> cand;
    for (int i = 0; i < lt.height; ++i) {
      for (int j = 0; j < lt.width; ++j) {
        const Point c = location_center(lt.stride, i, j);
        const double d = (c.x - bc.x) * (c.x - bc.x) + (c.y - bc.y) * (c.y - bc.y);
        cand.emplace_back(d, static_cast<std::size_t>(i) * lt.width + j);
      }
    }
    std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [d, cell] : cand) {
      const int owner = lt.instance_id[cell];
      if (owner >= 0 && count[owner] < 2) continue;
      if (owner >= 0) {
        --count[owner];
        clear_positive(lt, cell);
      }
      const int i = static_cast<int>(cell) / lt.width, j = static_cast<int>(cell) % lt.width;
      fill_positive(lt, cell, static_cast<int>(k), annotations[k], boxes[k], location_center(lt.stride, i, j));
      ++count[k];
      break;
    }
  }
  return out;
}

struct HeatmapTargets {
  int stride = 8;
  int height = 0;
  int width = 0;
  std::vector<double> labels;  // [K,H,W] one-vs-all binary maps
  int positives = 0;
  int collisions = 0;
};

/// Index of the grid cell whose centre is nearest to coordinate v along an
/// axis of `extent` cells; exact ties go to the lower index.
inline int nearest_cell(double v, int stride, int extent) {
  const double u = (v - stride / 2.0) / stride;
  const int idx = static_cast<int>(std::ceil(u - 0.5));
  return std::clamp(idx, 0, extent - 1);
}

/// Marks, per labeled keypoint of every instance, the nearest grid location
/// on that keypoint's channel.
inline HeatmapTargets heatmap_targets(std::span<const InstanceAnnotation> annotations, int stride, int height, int width) {
  HeatmapTargets out;
  out.stride = stride;
  out.height = height;
  out.width = width;
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  out.labels.assign(kNumKeypoints * plane, 0.0);
  for (const auto& ann : annotations) {
    for (int t = 0; t < kNumKeypoints; ++t) {
      if (ann.visibility[t] <= 0) continue;
      const int i = nearest_cell(ann.keypoints[t].y, stride, height);
      const int j = nearest_cell(ann.keypoints[t].x, stride, width);
      double& cell = out.labels[t * plane + static_cast<std::size_t>(i) * width + j];
      if (cell > 0.5) {
        ++out.collisions;
      } else {
        cell = 1.0;
        ++out.positives;
      }
    }
  }
  return out;
}

}  // namespace posealign
