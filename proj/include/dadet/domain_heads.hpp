// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0
//
// Adversarial domain classifiers. Both sit behind a gradient reversal layer:
// the image head labels every feature-map location, the instance head every ROI.

#pragma once

#include <random>
#include <vector>

#include "dadet/autograd.hpp"
#include "dadet/grl.hpp"
#include "dadet/params.hpp"

namespace dadet {

struct DomainHeadConfig {
  int image_hidden = 64;
  int instance_hidden = 256;
  double init_std = 0.01;
};

// Registers img_head.conv{1,2}, inst_head.fc{1,2} and the zero-initialized centers
// centers.img.{source,target} [image_hidden], centers.inst.{source,target} [instance_hidden].
template <typename T>
void init_domain_head_params(ParamStore<T>& params, int feature_channels, int instance_dim,
                             const DomainHeadConfig& cfg, std::mt19937_64& rng);

struct ImageHeadNodes {
  Var probs;        // [Hf, Wf], probability of the target domain per location
  Var center_feat;  // [image_hidden], spatial mean of the hidden activation
};

struct InstanceHeadNodes {
  Var probs;   // [n]
  Var hidden;  // [n, instance_hidden]
};

template <typename T>
ImageHeadNodes image_domain_forward_node(Graph<T>& g, const ParamStore<T>& params, Var features,
                                         const GradientReversal& grl);

template <typename T>
InstanceHeadNodes instance_domain_forward_node(Graph<T>& g, const ParamStore<T>& params, Var roi_features,
                                               const GradientReversal& grl);

template <typename T>
Tensor<T> image_domain_forward(const ParamStore<T>& params, const Tensor<T>& features);

template <typename T>
std::vector<T> instance_domain_forward(const ParamStore<T>& params, const Tensor<T>& roi_features);

}  // namespace dadet
