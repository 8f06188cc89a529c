// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

namespace dadet {

// Axis-aligned box in continuous pixel coordinates. Ground truth carries no score.
struct BoundingBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  int label = 0;  // contiguous category id, 1..K; 0 is background
  std::optional<double> score;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
  bool valid() const { return x2 > x1 && y2 > y1; }
  std::array<double, 4> coords() const { return {x1, y1, x2, y2}; }
  bool operator==(const BoundingBox&) const = default;
};

inline BoundingBox make_box(double x1, double y1, double x2, double y2, int label = 0,
                           std::optional<double> score = std::nullopt) {
  return BoundingBox{x1, y1, x2, y2, label, score};
}

double iou(const BoundingBox& a, const BoundingBox& b);

// Clips to [0, width] x [0, height].
BoundingBox clip_box(BoundingBox b, double width, double height);

// (dx, dy, log dw, log dh) of `box` relative to `anchor`, divided by `weights`.
using BoxDeltas = std::array<double, 4>;
using DeltaWeights = std::array<double, 4>;
inline constexpr DeltaWeights kUnitDeltaWeights{1.0, 1.0, 1.0, 1.0};

BoxDeltas encode_box(const BoundingBox& box, const BoundingBox& anchor,
                     const DeltaWeights& weights = kUnitDeltaWeights);
BoundingBox decode_box(const BoxDeltas& deltas, const BoundingBox& anchor,
                       const DeltaWeights& weights = kUnitDeltaWeights);

// Greedy suppression in descending score order; equal scores keep the lower index first.
// A box is dropped when its IoU with an already kept box exceeds `iou_threshold`.
std::vector<int> nms(const std::vector<BoundingBox>& boxes, const std::vector<double>& scores,
                     double iou_threshold);

// Per-label NMS over boxes that carry scores.
std::vector<int> nms_per_class(const std::vector<BoundingBox>& boxes, double iou_threshold);

struct AnchorSpec {
  std::vector<double> sizes{8, 16, 32, 64, 128};
  std::vector<double> ratios{1.0, 2.0, 3.0};  // height / width
  int per_image_samples = 256;

  int per_location() const { return static_cast<int>(sizes.size() * ratios.size()); }
  void validate() const;
};

// Anchor layout: index ((y * width + x) * A + s * |ratios| + r), centered on the cell.
std::vector<BoundingBox> generate_anchors(const AnchorSpec& spec, int feat_height, int feat_width,
                                          double stride);

}  // namespace dadet
