// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0

#include "dadet/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

namespace dadet {

namespace {
// exp() guard for width/height deltas.
const double kMaxLogScale = std::log(1000.0 / 16.0);
}  // namespace

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

BoundingBox clip_box(BoundingBox b, double width, double height) {
  b.x1 = std::clamp(b.x1, 0.0, width);
  b.x2 = std::clamp(b.x2, 0.0, width);
  b.y1 = std::clamp(b.y1, 0.0, height);
  b.y2 = std::clamp(b.y2, 0.0, height);
  return b;
}

BoxDeltas encode_box(const BoundingBox& box, const BoundingBox& anchor, const DeltaWeights& w) {
  const double aw = anchor.width(), ah = anchor.height();
  const double acx = anchor.x1 + 0.5 * aw, acy = anchor.y1 + 0.5 * ah;
  const double bw = box.width(), bh = box.height();
  const double bcx = box.x1 + 0.5 * bw, bcy = box.y1 + 0.5 * bh;
  return {w[0] * (bcx - acx) / aw, w[1] * (bcy - acy) / ah, w[2] * std::log(bw / aw), w[3] * std::log(bh / ah)};
}

BoundingBox decode_box(const BoxDeltas& d, const BoundingBox& anchor, const DeltaWeights& w) {
  const double aw = anchor.width(), ah = anchor.height();
  const double acx = anchor.x1 + 0.5 * aw, acy = anchor.y1 + 0.5 * ah;
  const double cx = d[0] / w[0] * aw + acx;
  const double cy = d[1] / w[1] * ah + acy;
  const double bw = std::exp(std::min(d[2] / w[2], kMaxLogScale)) * aw;
  const double bh = std::exp(std::min(d[3] / w[3], kMaxLogScale)) * ah;
  BoundingBox out = anchor;
  out.x1 = cx - 0.5 * bw;
  out.y1 = cy - 0.5 * bh;
  out.x2 = cx + 0.5 * bw;
  out.y2 = cy + 0.5 * bh;
  return out;
}

std::vector<int> nms(const std::vector<BoundingBox>& boxes, const std::vector<double>& scores,
                     double iou_threshold) {
  if (boxes.size() != scores.size()) throw std::invalid_argument("nms: boxes and scores differ in length");
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<char> suppressed(boxes.size(), 0);
  std::vector<int> keep;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const int a = order[i];
    if (suppressed[a]) continue;
    keep.push_back(a);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const int b = order[j];
      if (!suppressed[b] && iou(boxes[a], boxes[b]) > iou_threshold) suppressed[b] = 1;
    }
  }
  return keep;
}

std::vector<int> nms_per_class(const std::vector<BoundingBox>& boxes, double iou_threshold) {
  std::map<int, std::vector<int>> by_label;
  for (std::size_t i = 0; i < boxes.size(); ++i) by_label[boxes[i].label].push_back(static_cast<int>(i));
  std::vector<int> keep;
  for (const auto& [label, idx] : by_label) {
    std::vector<BoundingBox> sub;
    std::vector<double> sc;
    for (int i : idx) {
      sub.push_back(boxes[i]);
      sc.push_back(boxes[i].score.value_or(0.0));
    }
    for (int k : nms(sub, sc, iou_threshold)) keep.push_back(idx[k]);
  }
  std::stable_sort(keep.begin(), keep.end(), [&](int a, int b) {
    const double sa = boxes[a].score.value_or(0.0), sb = boxes[b].score.value_or(0.0);
    return sa != sb ? sa > sb : a < b;
  });
  return keep;
}

void AnchorSpec::validate() const {
  if (sizes.empty() || ratios.empty() || per_image_samples <= 0)
    throw std::invalid_argument("anchor spec needs sizes, ratios and a positive sample count");
  for (double s : sizes)
    if (!(s > 0)) throw std::invalid_argument("anchor sizes must be positive");
  for (double r : ratios)
    if (!(r > 0)) throw std::invalid_argument("anchor ratios must be positive");
}

std::vector<BoundingBox> generate_anchors(const AnchorSpec& spec, int feat_height, int feat_width,
                                          double stride) {
  spec.validate();
  if (!(stride > 0)) throw std::invalid_argument("generate_anchors: stride must be positive");
  std::vector<BoundingBox> shapes;
  for (double s : spec.sizes) {
    for (double r : spec.ratios) {
      const double w = s / std::sqrt(r);
      const double h = s * std::sqrt(r);
      shapes.push_back({-0.5 * w, -0.5 * h, 0.5 * w, 0.5 * h, 0, std::nullopt});
    }
  }
  std::vector<BoundingBox> anchors;
  anchors.reserve(static_cast<std::size_t>(feat_height) * feat_width * shapes.size());
  for (int y = 0; y < feat_height; ++y) {
    for (int x = 0; x < feat_width; ++x) {
      const double cx = (x + 0.5) * stride, cy = (y + 0.5) * stride;
      for (const BoundingBox& s : shapes)
        anchors.push_back({cx + s.x1, cy + s.y1, cx + s.x2, cy + s.y2, 0, std::nullopt});
    }
  }
  return anchors;
}

}  // namespace dadet
