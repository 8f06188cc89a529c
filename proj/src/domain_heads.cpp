// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0

#include "dadet/domain_heads.hpp"

#include <stdexcept>
#include <string>

namespace dadet {

template <typename T>
void init_domain_head_params(ParamStore<T>& p, int feature_channels, int instance_dim, const DomainHeadConfig& cfg,
                             std::mt19937_64& rng) {
  const double s = cfg.init_std;
  p.add("img_head.conv1.w", normal_tensor<T>({cfg.image_hidden, feature_channels, 1, 1}, s, rng));
  p.add("img_head.conv1.b", Tensor<T>({cfg.image_hidden}));
  p.add("img_head.conv2.w", normal_tensor<T>({1, cfg.image_hidden, 1, 1}, s, rng));
  p.add("img_head.conv2.b", Tensor<T>({1}));
  p.add("inst_head.fc1.w", normal_tensor<T>({cfg.instance_hidden, instance_dim}, s, rng));
  p.add("inst_head.fc1.b", Tensor<T>({cfg.instance_hidden}));
  p.add("inst_head.fc2.w", normal_tensor<T>({1, cfg.instance_hidden}, s, rng));
  p.add("inst_head.fc2.b", Tensor<T>({1}));
  p.add("centers.img.source", Tensor<T>({cfg.image_hidden}));
  p.add("centers.img.target", Tensor<T>({cfg.image_hidden}));
  p.add("centers.inst.source", Tensor<T>({cfg.instance_hidden}));
  p.add("centers.inst.target", Tensor<T>({cfg.instance_hidden}));
}

template <typename T>
ImageHeadNodes image_domain_forward_node(Graph<T>& g, const ParamStore<T>& p, Var features,
                                         const GradientReversal& grl) {
  Var x = gradient_reversal(g, features, grl);
  Var h = relu(g, conv2d(g, x, p.var(g, "img_head.conv1.w"), p.var(g, "img_head.conv1.b"), 1, 0));
  Var logit = conv2d(g, h, p.var(g, "img_head.conv2.w"), p.var(g, "img_head.conv2.b"), 1, 0);
  const std::vector<int> s = g.shape(logit);
  ImageHeadNodes out;
  out.probs = reshape(g, sigmoid(g, logit), {s[1], s[2]});
  out.center_feat = global_avg_pool(g, h);
  return out;
}

template <typename T>
InstanceHeadNodes instance_domain_forward_node(Graph<T>& g, const ParamStore<T>& p, Var roi_features,
                                               const GradientReversal& grl) {
  const std::vector<int> s = g.shape(roi_features);
  const int expected = p.at("inst_head.fc1.w").dim(1);
  if (s.size() != 2 || s[1] != expected) {
    throw std::invalid_argument("instance head expects [n, " + std::to_string(expected) + "] features, got " +
                                shape_str(s));
  }
  Var x = gradient_reversal(g, roi_features, grl);
  InstanceHeadNodes out;
  out.hidden = relu(g, linear(g, x, p.var(g, "inst_head.fc1.w"), p.var(g, "inst_head.fc1.b")));
  Var logit = linear(g, out.hidden, p.var(g, "inst_head.fc2.w"), p.var(g, "inst_head.fc2.b"));
  out.probs = reshape(g, sigmoid(g, logit), {s[0]});
  return out;
}

template <typename T>
Tensor<T> image_domain_forward(const ParamStore<T>& params, const Tensor<T>& features) {
  Graph<T> g;
  return g.value(image_domain_forward_node(g, params, g.input(features), GradientReversal{}).probs);
}

template <typename T>
std::vector<T> instance_domain_forward(const ParamStore<T>& params, const Tensor<T>& roi_features) {
  Graph<T> g;
  return g.value(instance_domain_forward_node(g, params, g.input(roi_features), GradientReversal{}).probs).values();
}

#define DADET_INSTANTIATE_HEADS(T)                                                                         \
  template void init_domain_head_params<T>(ParamStore<T>&, int, int, const DomainHeadConfig&,               \
                                           std::mt19937_64&);                                               \
  template ImageHeadNodes image_domain_forward_node<T>(Graph<T>&, const ParamStore<T>&, Var,                \
                                                       const GradientReversal&);                            \
  template InstanceHeadNodes instance_domain_forward_node<T>(Graph<T>&, const ParamStore<T>&, Var,          \
                                                             const GradientReversal&);                      \
  template Tensor<T> image_domain_forward<T>(const ParamStore<T>&, const Tensor<T>&);                       \
  template std::vector<T> instance_domain_forward<T>(const ParamStore<T>&, const Tensor<T>&);

DADET_INSTANTIATE_HEADS(float)
DADET_INSTANTIATE_HEADS(double)

}  // namespace dadet
