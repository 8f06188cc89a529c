// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0
//
// COCO-convention detection metrics: greedy highest-IoU matching, 101-point
// interpolated AP, per-class AP averaged over IoU 0.50:0.95:0.05.

#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dadet/boxes.hpp"
#include "dadet/datasets.hpp"

namespace dadet {

// Same floating-point grid as numpy.linspace(start, stop, n).
std::vector<double> linspace(double start, double stop, int n);

std::vector<double> coco_iou_thresholds();     // 0.50 ... 0.95, 10 values
std::vector<double> coco_recall_thresholds();  // 0.00 ... 1.00, 101 values

// `detections` must be sorted by descending score. Returns one TP flag per detection.
// Labels are ignored; callers pass a single class.
std::vector<bool> match_detections(const std::vector<BoundingBox>& detections, const std::vector<BoundingBox>& gt,
                                   double iou_threshold);

// 101-point interpolated AP. `tp` and `scores` are aligned; order is re-sorted by
// descending score (stable). Returns -1 when num_gt == 0 (class skipped).
double average_precision(const std::vector<bool>& tp, const std::vector<double>& scores, int num_gt);

struct EvalOptions {
  std::vector<double> iou_thresholds = coco_iou_thresholds();
  int max_detections = 100;  // per image, after sorting by score
};

struct EvalResult {
  double map_coco = 0.0;  // mean over classes of mean AP over iou_thresholds
  double map_50 = 0.0;    // mean over classes of AP at IoU 0.5 (if 0.5 is among the thresholds)
  std::map<std::string, double> per_class_ap;     // IoU-averaged
  std::map<std::string, double> per_class_ap50;
  std::vector<double> iou_thresholds;
  int images = 0;
  int gt_boxes = 0;
  int detections = 0;

  std::string to_json() const;
  std::string per_class_csv() const;
};

// Per-image ground truth and detections (labels 1..K, detections carry scores).
EvalResult evaluate_detections(const std::vector<std::vector<BoundingBox>>& gt,
                               const std::vector<std::vector<BoundingBox>>& detections,
                               const std::vector<Category>& categories, const EvalOptions& opts = {});

using DetectorFn = std::function<std::vector<BoundingBox>(const ImageSample&)>;

// Runs `detector` on every sample and scores against Dataset::eval_boxes.
// Throws std::invalid_argument on an empty dataset.
EvalResult evaluate(const DetectorFn& detector, const Dataset& dataset, const EvalOptions& opts = {});

}  // namespace dadet
