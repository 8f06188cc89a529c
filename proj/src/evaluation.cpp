// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0

#include "dadet/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace dadet {

namespace {

std::vector<int> order_by_score(const std::vector<double>& scores) {
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  return idx;
}

double score_of(const BoundingBox& b) { return b.score.value_or(1.0); }

}  // namespace

std::vector<double> linspace(double start, double stop, int n) {
  std::vector<double> out(static_cast<std::size_t>(n));
  if (n == 1) {
    out[0] = start;
    return out;
  }
  const double step = (stop - start) / (n - 1);
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = i * step + start;
  out.back() = stop;
  return out;
}

std::vector<double> coco_iou_thresholds() { return linspace(0.5, 0.95, 10); }
std::vector<double> coco_recall_thresholds() { return linspace(0.0, 1.0, 101); }

std::vector<bool> match_detections(const std::vector<BoundingBox>& detections, const std::vector<BoundingBox>& gt,
                                   double iou_threshold) {
  std::vector<bool> tp(detections.size(), false);
  std::vector<bool> taken(gt.size(), false);
  const double floor = std::min(iou_threshold, 1.0 - 1e-10);
  for (std::size_t d = 0; d < detections.size(); ++d) {
    double best = floor;
    int match = -1;
    for (std::size_t j = 0; j < gt.size(); ++j) {
      if (taken[j]) continue;
      const double o = iou(detections[d], gt[j]);
      if (o < best) continue;
      best = o;
      match = static_cast<int>(j);
    }
    if (match >= 0) {
      taken[static_cast<std::size_t>(match)] = true;
      tp[d] = true;
    }
  }
  return tp;
}

double average_precision(const std::vector<bool>& tp, const std::vector<double>& scores, int num_gt) {
  if (tp.size() != scores.size()) throw std::invalid_argument("average_precision: flags and scores differ in length");
  if (num_gt < 0) throw std::invalid_argument("average_precision: negative num_gt");
  if (num_gt == 0) return -1.0;
  const std::vector<int> order = order_by_score(scores);
  const std::size_t n = order.size();
  std::vector<double> recall(n), precision(n);
  double ctp = 0, cfp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (tp[static_cast<std::size_t>(order[i])]) {
      ctp += 1;
    } else {
      cfp += 1;
    }
    recall[i] = ctp / num_gt;
    precision[i] = ctp / (ctp + cfp + std::numeric_limits<double>::epsilon());
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0;
  const std::vector<double> thresholds = coco_recall_thresholds();
  for (double r : thresholds) {
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / static_cast<double>(thresholds.size());
}

EvalResult evaluate_detections(const std::vector<std::vector<BoundingBox>>& gt,
                               const std::vector<std::vector<BoundingBox>>& detections,
                               const std::vector<Category>& categories, const EvalOptions& opts) {
  if (gt.size() != detections.size()) throw std::invalid_argument("evaluate: gt and detection lists differ in length");
  if (opts.iou_thresholds.empty()) throw std::invalid_argument("evaluate: no IoU thresholds");
  EvalResult res;
  res.iou_thresholds = opts.iou_thresholds;
  res.images = static_cast<int>(gt.size());

  for (std::size_t i = 0; i < detections.size(); ++i) {
    res.detections += static_cast<int>(detections[i].size());
    res.gt_boxes += static_cast<int>(gt[i].size());
  }

  const auto is_50 = [](double t) { return std::abs(t - 0.5) < 1e-12; };
  double sum_coco = 0, sum_50 = 0;
  int classes = 0, classes_50 = 0;
  for (std::size_t k = 0; k < categories.size(); ++k) {
    const int label = static_cast<int>(k) + 1;
    int num_gt = 0;
    std::vector<std::vector<BoundingBox>> cls_gt(gt.size()), cls_det(gt.size());
    for (std::size_t i = 0; i < gt.size(); ++i) {
      for (const auto& b : gt[i]) {
        if (b.label == label) cls_gt[i].push_back(b);
      }
      // Per image and class: sorted by score and truncated, as in the public COCO tool.
      std::vector<double> s;
      for (const auto& b : detections[i]) s.push_back(b.label == label ? score_of(b) : -1.0);
      for (int d : order_by_score(s)) {
        const BoundingBox& b = detections[i][static_cast<std::size_t>(d)];
        if (b.label != label || static_cast<int>(cls_det[i].size()) >= opts.max_detections) continue;
        cls_det[i].push_back(b);
      }
      num_gt += static_cast<int>(cls_gt[i].size());
    }
    if (num_gt == 0) continue;  // COCO skips classes without ground truth

    double ap_sum = 0;
    for (double thr : opts.iou_thresholds) {
      std::vector<bool> tp;
      std::vector<double> scores;
      for (std::size_t i = 0; i < gt.size(); ++i) {
        const std::vector<bool> m = match_detections(cls_det[i], cls_gt[i], thr);
        for (std::size_t d = 0; d < m.size(); ++d) {
          tp.push_back(m[d]);
          scores.push_back(score_of(cls_det[i][d]));
        }
      }
      const double ap = average_precision(tp, scores, num_gt);
      ap_sum += ap;
      if (is_50(thr)) {
        res.per_class_ap50[categories[k].name] = ap;
        sum_50 += ap;
        ++classes_50;
      }
    }
    const double mean_ap = ap_sum / static_cast<double>(opts.iou_thresholds.size());
    res.per_class_ap[categories[k].name] = mean_ap;
    sum_coco += mean_ap;
    ++classes;
  }
  res.map_coco = classes > 0 ? sum_coco / classes : 0.0;
  res.map_50 = classes_50 > 0 ? sum_50 / classes_50 : 0.0;
  return res;
}

EvalResult evaluate(const DetectorFn& detector, const Dataset& dataset, const EvalOptions& opts) {
  if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
  std::vector<std::vector<BoundingBox>> gt, det;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    gt.push_back(dataset.eval_boxes(i));
    det.push_back(detector(dataset.samples[i]));
  }
  return evaluate_detections(gt, det, dataset.categories, opts);
}

std::string EvalResult::to_json() const {
  nlohmann::ordered_json j;
  const bool only_50 = iou_thresholds.size() == 1 && std::abs(iou_thresholds[0] - 0.5) < 1e-12;
  if (!only_50) j["map_coco"] = map_coco;
  j["map_50"] = map_50;
  j["per_class_ap"] = only_50 ? per_class_ap50 : per_class_ap;
  if (!only_50) j["per_class_ap50"] = per_class_ap50;
  j["iou_thresholds"] = iou_thresholds;
  j["counts"] = {{"images", images}, {"gt_boxes", gt_boxes}, {"detections", detections}};
  return j.dump(2);
}

std::string EvalResult::per_class_csv() const {
  std::ostringstream out;
  out.precision(6);
  out << std::fixed << "category,ap,ap50\n";
  for (const auto& [name, ap] : per_class_ap) {
    const auto it = per_class_ap50.find(name);
    out << name << "," << ap << ",";
    if (it != per_class_ap50.end()) out << it->second;
    out << "\n";
  }
  return out.str();
}

}  // namespace dadet
