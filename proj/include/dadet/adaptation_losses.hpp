// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0
//
// Domain-adaptation loss terms: center losses, per-pixel and per-proposal domain
// cross-entropy, image/instance consistency, the two-optimizer loss split, and the
// classifier-based domain distance. Each term has a pure value/gradient form and a
// graph form that wires the same gradient into the tape.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dadet/autograd.hpp"

namespace dadet {

enum class DomainTag : std::uint8_t { kSource = 0, kTarget = 1 };

DomainTag domain_tag_from_int(int v);
inline int to_int(DomainTag d) { return static_cast<int>(d); }

enum class AdaptLevel { kImage, kInstance };

// One learnable center per domain.
template <typename T>
struct ClassCenters {
  std::vector<T> source_center;
  std::vector<T> target_center;
  AdaptLevel level = AdaptLevel::kImage;

  ClassCenters() = default;
  ClassCenters(int d, AdaptLevel lvl);  // zero-initialized
  int dim() const { return static_cast<int>(source_center.size()); }
  const std::vector<T>& for_tag(DomainTag t) const {
    return t == DomainTag::kSource ? source_center : target_center;
  }
  void validate() const;
};

// Lower/upper clamp applied to probabilities before taking logs.
inline constexpr double kProbClamp = 1e-7;

// ---------------------------------------------------------------------------
// Center loss: 0.5 * sum_i ||x_i - c_{y_i}||^2 over the m rows of `features` ([m, d] row-major).

template <typename T>
T center_loss(std::span<const T> features, std::span<const DomainTag> tags, const ClassCenters<T>& centers);

template <typename T>
struct CenterLossGrad {
  std::vector<T> features;
  std::vector<T> source_center;
  std::vector<T> target_center;
};

template <typename T>
CenterLossGrad<T> center_loss_grad(std::span<const T> features, std::span<const DomainTag> tags,
                                   const ClassCenters<T>& centers);

// ---------------------------------------------------------------------------
// Domain cross-entropy (negative log-likelihood), averaged over all predictions.
// pixel_probs[i] holds the H*W probabilities of image i; instance_probs[i] the n_i
// proposal probabilities of image i.

template <typename T>
T domain_ce_image(const std::vector<std::vector<T>>& pixel_probs, std::span<const DomainTag> tags);

template <typename T>
std::vector<std::vector<T>> domain_ce_image_grad(const std::vector<std::vector<T>>& pixel_probs,
                                                 std::span<const DomainTag> tags);

template <typename T>
T domain_ce_instance(const std::vector<std::vector<T>>& instance_probs, std::span<const DomainTag> tags);

template <typename T>
std::vector<std::vector<T>> domain_ce_instance_grad(const std::vector<std::vector<T>>& instance_probs,
                                                    std::span<const DomainTag> tags);

// ---------------------------------------------------------------------------
// Consistency between the mean pixel probability of an image and each of its
// proposal probabilities: per image mean_j |pbar_i - p_ij|, averaged over images
// that have at least one proposal.

template <typename T>
T consistency_loss(const std::vector<std::vector<T>>& pixel_probs,
                   const std::vector<std::vector<T>>& instance_probs);

template <typename T>
struct ConsistencyGrad {
  std::vector<std::vector<T>> pixel;
  std::vector<std::vector<T>> instance;
};

template <typename T>
ConsistencyGrad<T> consistency_loss_grad(const std::vector<std::vector<T>>& pixel_probs,
                                         const std::vector<std::vector<T>>& instance_probs);

// ---------------------------------------------------------------------------

struct LossParts {
  double detection = 0;
  double image_ce = 0;
  double instance_ce = 0;
  double consistency = 0;
  double image_center = 0;
  double instance_center = 0;
};

struct LossBundle {
  double detection_loss = 0;
  double image_ce = 0;
  double instance_ce = 0;
  double consistency = 0;
  double image_center = 0;
  double instance_center = 0;
  double lambda_ce = 0;
  double lambda_center = 0;

  // Loss driving the main optimizer.
  double l1() const { return detection_loss + lambda_ce * (image_ce + instance_ce + consistency); }
  // Loss driving the center optimizer.
  double l2() const { return lambda_center * (image_center + instance_center); }
};

LossBundle compose_losses(const LossParts& parts, double lambda_ce, double lambda_center);

// 2 * (1 - (err_source + err_target)).
double h_divergence(double err_source, double err_target);

// ---------------------------------------------------------------------------
// Graph forms. Probability inputs are graph nodes holding sigmoid outputs.

// features [m, d]; centers are parameter nodes of shape [d].
template <typename T>
Var center_loss_node(Graph<T>& g, Var features, const std::vector<DomainTag>& tags, Var source_center,
                     Var target_center);

// One node per image, each holding that image's probabilities (any shape).
template <typename T>
Var domain_ce_image_node(Graph<T>& g, const std::vector<Var>& pixel_probs, const std::vector<DomainTag>& tags);

template <typename T>
Var domain_ce_instance_node(Graph<T>& g, const std::vector<Var>& instance_probs,
                            const std::vector<DomainTag>& tags);

template <typename T>
Var consistency_loss_node(Graph<T>& g, const std::vector<Var>& pixel_probs,
                          const std::vector<Var>& instance_probs);

}  // namespace dadet
