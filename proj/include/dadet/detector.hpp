// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0
//
// Compact two-stage detector: residual backbone with three stages (optional SE banks),
// anchor-based region proposal network, ROI-align box head, and NMS post-processing.

#pragma once

#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dadet/autograd.hpp"
#include "dadet/boxes.hpp"
#include "dadet/params.hpp"

namespace dadet {

struct StageSpec {
  int width = 32;
  int blocks = 2;
  int stride = 2;                 // applied by the first block
  std::vector<bool> se_blocks;    // one flag per block
};

struct BackboneSpec {
  int in_channels = 3;
  int stem_width = 32;
  int stem_stride = 2;
  std::vector<StageSpec> stages;
  int se_bank_size = 2;
  int se_reduction = 16;

  int total_stride() const;
  int out_channels() const { return stages.empty() ? stem_width : stages.back().width; }
  bool has_bank(int stage, int block) const;  // 0-based indices
  std::set<int> placement() const;            // 1-based stage indices carrying banks
};

// Three stages of two residual blocks, widths 32/64/128, total stride 16.
BackboneSpec default_backbone();

// Appends an SE bank to every block of the listed stages (1-based). Other stages lose theirs.
BackboneSpec inject_banks(BackboneSpec spec, const std::set<int>& placement);

struct DetectorConfig {
  BackboneSpec backbone = default_backbone();
  AnchorSpec anchors;
  int num_classes = 3;  // foreground categories
  int rpn_channels = 128;
  int rpn_pre_nms_train = 1000;
  int rpn_post_nms_train = 300;
  int rpn_pre_nms_test = 600;
  int rpn_post_nms_test = 100;
  double rpn_nms = 0.7;
  double rpn_pos_iou = 0.7;
  double rpn_neg_iou = 0.3;
  double rpn_pos_fraction = 0.5;
  int roi_samples = 64;
  double roi_fg_fraction = 0.25;
  double roi_fg_iou = 0.5;
  int target_instances = 64;  // proposals per unlabeled image fed to the instance head
  int roi_pool = 4;
  int roi_sampling = 2;
  int fc_dim = 256;
  double min_box_size = 1.0;
  double score_threshold = 0.8;
  double nms_threshold = 0.3;
  int max_detections = 100;
};

inline const DeltaWeights kRoiDeltaWeights{10.0, 10.0, 5.0, 5.0};

template <typename T>
void init_detector_params(ParamStore<T>& params, const DetectorConfig& cfg, std::mt19937_64& rng);

// Number of scalars the backbone of `spec` owns.
std::size_t backbone_param_count(const BackboneSpec& spec);

// ---------------------------------------------------------------------------
// Forward pieces

struct BankTrace {
  std::string name;
  Var attention;
};

template <typename T>
Var backbone_forward_node(Graph<T>& g, const ParamStore<T>& params, const BackboneSpec& spec, Var image,
                          std::vector<BankTrace>* banks = nullptr);

// Throws std::invalid_argument when H or W is not divisible by the total stride.
template <typename T>
Tensor<T> backbone_forward(const ParamStore<T>& params, const BackboneSpec& spec, const Tensor<T>& image);

struct RpnNodes {
  Var objectness;  // [A, Hf, Wf] logits
  Var deltas;      // [4A, Hf, Wf]
  int feat_h = 0;
  int feat_w = 0;
};

template <typename T>
RpnNodes rpn_head_node(Graph<T>& g, const ParamStore<T>& params, const DetectorConfig& cfg, Var feat);

template <typename T>
struct ProposalSet {
  std::vector<BoundingBox> boxes;
  std::vector<double> objectness;
  Tensor<T> roi_features;  // [n, fc_dim] once the box head has run
};

// Ranks anchors by objectness (ties: lower anchor index first), decodes, clips, drops
// boxes smaller than cfg.min_box_size, runs NMS and keeps the top `post_nms`.
template <typename T>
ProposalSet<T> propose(const Tensor<T>& objectness, const Tensor<T>& deltas, const std::vector<BoundingBox>& anchors,
                       double image_w, double image_h, int pre_nms, int post_nms, const DetectorConfig& cfg);

// Runs the RPN head on a feature map and returns proposals (inference settings).
template <typename T>
ProposalSet<T> rpn_forward(const ParamStore<T>& params, const DetectorConfig& cfg, const Tensor<T>& features,
                           double image_w, double image_h);

struct RpnTargets {
  std::vector<int> indices;  // sampled anchor indices
  std::vector<int> labels;   // 1 positive, 0 negative
  std::vector<BoxDeltas> targets;
};

RpnTargets assign_rpn_targets(const std::vector<BoundingBox>& anchors, const std::vector<BoundingBox>& gt,
                              const DetectorConfig& cfg, std::mt19937_64& rng);

struct RoiSample {
  std::vector<BoundingBox> boxes;
  std::vector<int> labels;  // 0 background
  std::vector<BoxDeltas> targets;
};

RoiSample sample_rois(const std::vector<BoundingBox>& proposals, const std::vector<BoundingBox>& gt,
                      const DetectorConfig& cfg, std::mt19937_64& rng);

struct RoiHeadNodes {
  Var instance_features;  // [n, fc_dim], input of the last layers
  Var class_logits;       // [n, K+1]
  Var box_deltas;         // [n, 4]
};

template <typename T>
RoiHeadNodes roi_head_node(Graph<T>& g, const ParamStore<T>& params, const DetectorConfig& cfg, Var feat,
                           const std::vector<BoundingBox>& rois);

// Sigmoid BCE over sampled anchors (mean) and smooth-L1 over positives / sampled count.
template <typename T>
std::pair<Var, Var> rpn_loss_node(Graph<T>& g, const RpnNodes& rpn, const RpnTargets& targets, int anchors_per_loc);

// Softmax CE over sampled ROIs (mean) and smooth-L1 over foreground / sampled count.
template <typename T>
std::pair<Var, Var> roi_loss_node(Graph<T>& g, const RoiHeadNodes& head, const RoiSample& sample);

// Score filter, per-class decoding, class-wise NMS, top max_detections.
std::vector<BoundingBox> postprocess_detections(const std::vector<BoundingBox>& rois,
                                                const std::vector<std::vector<double>>& class_probs,
                                                const std::vector<BoxDeltas>& deltas, double image_w,
                                                double image_h, const DetectorConfig& cfg);

// ---------------------------------------------------------------------------

template <typename T>
struct DetectionLoss {
  Var rpn_cls, rpn_box, roi_cls, roi_box, total;
};

template <typename T>
struct ImageForward {
  Var features;
  std::vector<BankTrace> banks;
  RpnNodes rpn;
  ProposalSet<T> proposals;
  std::vector<BoundingBox> rois;
  RoiHeadNodes head;
  std::optional<DetectionLoss<T>> loss;  // only when ground truth is supplied
};

// Training-mode forward of one image. With `gt` present the RPN/ROI sampling and
// detection loss are produced; without it the top proposals feed the box head only.
template <typename T>
ImageForward<T> forward_train_image(Graph<T>& g, const ParamStore<T>& params, const DetectorConfig& cfg,
                                    const Tensor<T>& image, const std::vector<BoundingBox>* gt, std::mt19937_64& rng);

// Inference: boxes with scores >= cfg.score_threshold after class-wise NMS.
template <typename T>
std::vector<BoundingBox> detect(const ParamStore<T>& params, const DetectorConfig& cfg, const Tensor<T>& image);

}  // namespace dadet
