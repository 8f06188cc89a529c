// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0

#include "dadet/adaptation_losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dadet {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

template <typename T>
T clamp_prob(T p) {
  const T lo = static_cast<T>(kProbClamp);
  const T hi = static_cast<T>(1.0 - kProbClamp);
  return std::min(std::max(p, lo), hi);
}

template <typename T>
void check_probs(const std::vector<std::vector<T>>& probs, const char* what) {
  for (const auto& row : probs)
    for (T p : row)
      require(p >= T(0) && p <= T(1), std::string(what) + ": probability outside [0,1]");
}

// NLL of one prediction and its derivative (zero where the clamp is active).
template <typename T>
T nll(T p, DomainTag tag) {
  const T q = clamp_prob(p);
  return tag == DomainTag::kTarget ? -std::log(q) : -std::log(T(1) - q);
}

template <typename T>
T nll_grad(T p, DomainTag tag) {
  const T q = clamp_prob(p);
  if (q != p) return T(0);
  return tag == DomainTag::kTarget ? -T(1) / q : T(1) / (T(1) - q);
}

template <typename T>
T mean_nll(const std::vector<std::vector<T>>& probs, std::span<const DomainTag> tags, std::size_t& count) {
  require(probs.size() == tags.size(), "domain_ce: one tag per image required");
  T sum = 0;
  count = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    for (T p : probs[i]) sum += nll(p, tags[i]);
    count += probs[i].size();
  }
  return count ? sum / static_cast<T>(count) : T(0);
}

template <typename T>
std::vector<std::vector<T>> mean_nll_grad(const std::vector<std::vector<T>>& probs,
                                          std::span<const DomainTag> tags) {
  std::size_t count = 0;
  for (const auto& row : probs) count += row.size();
  std::vector<std::vector<T>> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    out[i].resize(probs[i].size());
    for (std::size_t j = 0; j < probs[i].size(); ++j)
      out[i][j] = nll_grad(probs[i][j], tags[i]) / static_cast<T>(count);
  }
  return out;
}

template <typename T>
T mean_of(const std::vector<T>& v) {
  T s = 0;
  for (T x : v) s += x;
  return s / static_cast<T>(v.size());
}

template <typename T>
T sign_of(T v) {
  return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
}

template <typename T>
std::vector<std::vector<T>> gather(const Graph<T>& g, const std::vector<Var>& vs) {
  std::vector<std::vector<T>> out;
  out.reserve(vs.size());
  for (Var v : vs) out.push_back(g.value(v).values());
  return out;
}

template <typename T>
void scatter_add(Graph<T>& g, const std::vector<Var>& vs, const std::vector<std::vector<T>>& grads, T scale) {
  for (std::size_t k = 0; k < vs.size(); ++k) {
    if (!g.requires_grad(vs[k]) || grads[k].empty()) continue;
    Tensor<T>& gx = g.grad(vs[k]);
    for (std::size_t i = 0; i < grads[k].size(); ++i) gx.data[i] += scale * grads[k][i];
  }
}

}  // namespace

DomainTag domain_tag_from_int(int v) {
  require(v == 0 || v == 1, "domain tag must be 0 (source) or 1 (target), got " + std::to_string(v));
  return static_cast<DomainTag>(v);
}

template <typename T>
ClassCenters<T>::ClassCenters(int d, AdaptLevel lvl)
    : source_center(static_cast<std::size_t>(d), T(0)), target_center(static_cast<std::size_t>(d), T(0)), level(lvl) {
  require(d > 0, "class centers need a positive dimension");
}

template <typename T>
void ClassCenters<T>::validate() const {
  require(!source_center.empty() && source_center.size() == target_center.size(),
          "class centers must share a positive dimension");
  for (std::size_t i = 0; i < source_center.size(); ++i)
    require(std::isfinite(source_center[i]) && std::isfinite(target_center[i]), "class centers must be finite");
}

// ---------------------------------------------------------------------------

template <typename T>
T center_loss(std::span<const T> features, std::span<const DomainTag> tags, const ClassCenters<T>& centers) {
  centers.validate();
  const std::size_t d = static_cast<std::size_t>(centers.dim());
  require(!tags.empty(), "center_loss: empty batch");
  require(features.size() == tags.size() * d, "center_loss: features do not match center dimension " +
                                                  std::to_string(d) + " for " + std::to_string(tags.size()) +
                                                  " samples");
  T total = 0;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const std::vector<T>& c = centers.for_tag(tags[i]);
    for (std::size_t k = 0; k < d; ++k) {
      const T diff = features[i * d + k] - c[k];
      total += diff * diff;
    }
  }
  return T(0.5) * total;
}

template <typename T>
CenterLossGrad<T> center_loss_grad(std::span<const T> features, std::span<const DomainTag> tags,
                                   const ClassCenters<T>& centers) {
  centers.validate();
  const std::size_t d = static_cast<std::size_t>(centers.dim());
  require(!tags.empty(), "center_loss: empty batch");
  require(features.size() == tags.size() * d, "center_loss: features do not match center dimension");
  CenterLossGrad<T> out;
  out.features.resize(features.size());
  out.source_center.assign(d, T(0));
  out.target_center.assign(d, T(0));
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const std::vector<T>& c = centers.for_tag(tags[i]);
    std::vector<T>& gc = tags[i] == DomainTag::kSource ? out.source_center : out.target_center;
    for (std::size_t k = 0; k < d; ++k) {
      const T diff = features[i * d + k] - c[k];
      out.features[i * d + k] = diff;
      gc[k] -= diff;
    }
  }
  return out;
}

template <typename T>
T domain_ce_image(const std::vector<std::vector<T>>& pixel_probs, std::span<const DomainTag> tags) {
  check_probs(pixel_probs, "domain_ce_image");
  std::size_t count = 0;
  const T v = mean_nll(pixel_probs, tags, count);
  require(count > 0, "domain_ce_image: no pixel predictions");
  return v;
}

template <typename T>
std::vector<std::vector<T>> domain_ce_image_grad(const std::vector<std::vector<T>>& pixel_probs,
                                                 std::span<const DomainTag> tags) {
  check_probs(pixel_probs, "domain_ce_image");
  require(pixel_probs.size() == tags.size(), "domain_ce_image: one tag per image required");
  return mean_nll_grad(pixel_probs, tags);
}

template <typename T>
T domain_ce_instance(const std::vector<std::vector<T>>& instance_probs, std::span<const DomainTag> tags) {
  check_probs(instance_probs, "domain_ce_instance");
  std::size_t count = 0;
  return mean_nll(instance_probs, tags, count);
}

template <typename T>
std::vector<std::vector<T>> domain_ce_instance_grad(const std::vector<std::vector<T>>& instance_probs,
                                                    std::span<const DomainTag> tags) {
  check_probs(instance_probs, "domain_ce_instance");
  require(instance_probs.size() == tags.size(), "domain_ce_instance: one tag per image required");
  return mean_nll_grad(instance_probs, tags);
}

template <typename T>
T consistency_loss(const std::vector<std::vector<T>>& pixel_probs,
                   const std::vector<std::vector<T>>& instance_probs) {
  require(pixel_probs.size() == instance_probs.size(), "consistency_loss: batch size mismatch");
  T total = 0;
  int images = 0;
  for (std::size_t i = 0; i < pixel_probs.size(); ++i) {
    if (instance_probs[i].empty()) continue;
    require(!pixel_probs[i].empty(), "consistency_loss: image without pixel predictions");
    const T pbar = mean_of(pixel_probs[i]);
    T s = 0;
    for (T p : instance_probs[i]) s += std::abs(pbar - p);
    total += s / static_cast<T>(instance_probs[i].size());
    ++images;
  }
  return images ? total / static_cast<T>(images) : T(0);
}

template <typename T>
ConsistencyGrad<T> consistency_loss_grad(const std::vector<std::vector<T>>& pixel_probs,
                                         const std::vector<std::vector<T>>& instance_probs) {
  require(pixel_probs.size() == instance_probs.size(), "consistency_loss: batch size mismatch");
  ConsistencyGrad<T> out;
  out.pixel.resize(pixel_probs.size());
  out.instance.resize(instance_probs.size());
  int images = 0;
  for (const auto& row : instance_probs) images += row.empty() ? 0 : 1;
  for (std::size_t i = 0; i < pixel_probs.size(); ++i) {
    out.pixel[i].assign(pixel_probs[i].size(), T(0));
    out.instance[i].assign(instance_probs[i].size(), T(0));
    if (instance_probs[i].empty()) continue;
    const T pbar = mean_of(pixel_probs[i]);
    const T w = T(1) / (static_cast<T>(images) * static_cast<T>(instance_probs[i].size()));
    T dpbar = 0;
    for (std::size_t j = 0; j < instance_probs[i].size(); ++j) {
      const T s = sign_of(pbar - instance_probs[i][j]) * w;
      out.instance[i][j] = -s;
      dpbar += s;
    }
    const T per_pixel = dpbar / static_cast<T>(pixel_probs[i].size());
    std::fill(out.pixel[i].begin(), out.pixel[i].end(), per_pixel);
  }
  return out;
}

LossBundle compose_losses(const LossParts& p, double lambda_ce, double lambda_center) {
  require(lambda_ce >= 0 && lambda_center >= 0, "compose_losses: loss weights must be nonnegative");
  for (double v : {p.detection, p.image_ce, p.instance_ce, p.consistency, p.image_center, p.instance_center})
    require(std::isfinite(v), "compose_losses: loss parts must be finite");
  LossBundle b;
  b.detection_loss = p.detection;
  b.image_ce = p.image_ce;
  b.instance_ce = p.instance_ce;
  b.consistency = p.consistency;
  b.image_center = p.image_center;
  b.instance_center = p.instance_center;
  b.lambda_ce = lambda_ce;
  b.lambda_center = lambda_center;
  return b;
}

double h_divergence(double err_source, double err_target) {
  require(err_source >= 0 && err_source <= 1 && err_target >= 0 && err_target <= 1,
          "h_divergence: error rates must lie in [0,1]");
  return 2.0 * (1.0 - (err_source + err_target));
}

// ---------------------------------------------------------------------------
// Graph forms

template <typename T>
Var center_loss_node(Graph<T>& g, Var features, const std::vector<DomainTag>& tags, Var source_center,
                     Var target_center) {
  ClassCenters<T> centers;
  centers.source_center = g.value(source_center).values();
  centers.target_center = g.value(target_center).values();
  const T v = center_loss<T>(g.value(features).data, tags, centers);
  const int id = static_cast<int>(g.size());
  return g.push(Tensor<T>({1}, v), {features, source_center, target_center},
                [=](Graph<T>& gr) {
                  ClassCenters<T> c;
                  c.source_center = gr.value(source_center).values();
                  c.target_center = gr.value(target_center).values();
                  const CenterLossGrad<T> d = center_loss_grad<T>(gr.value(features).data, tags, c);
                  const T go = gr.grad(Var{id}).data[0];
                  scatter_add(gr, {features}, {d.features}, go);
                  scatter_add(gr, {source_center}, {d.source_center}, go);
                  scatter_add(gr, {target_center}, {d.target_center}, go);
                });
}

template <typename T>
Var domain_ce_image_node(Graph<T>& g, const std::vector<Var>& pixel_probs, const std::vector<DomainTag>& tags) {
  const T v = domain_ce_image<T>(gather(g, pixel_probs), tags);
  const int id = static_cast<int>(g.size());
  return g.push(Tensor<T>({1}, v), pixel_probs, [=](Graph<T>& gr) {
    const auto d = domain_ce_image_grad<T>(gather(gr, pixel_probs), tags);
    scatter_add(gr, pixel_probs, d, gr.grad(Var{id}).data[0]);
  });
}

template <typename T>
Var domain_ce_instance_node(Graph<T>& g, const std::vector<Var>& instance_probs,
                            const std::vector<DomainTag>& tags) {
  const T v = domain_ce_instance<T>(gather(g, instance_probs), tags);
  const int id = static_cast<int>(g.size());
  return g.push(Tensor<T>({1}, v), instance_probs, [=](Graph<T>& gr) {
    const auto d = domain_ce_instance_grad<T>(gather(gr, instance_probs), tags);
    scatter_add(gr, instance_probs, d, gr.grad(Var{id}).data[0]);
  });
}

template <typename T>
Var consistency_loss_node(Graph<T>& g, const std::vector<Var>& pixel_probs,
                          const std::vector<Var>& instance_probs) {
  const T v = consistency_loss<T>(gather(g, pixel_probs), gather(g, instance_probs));
  std::vector<Var> parents = pixel_probs;
  parents.insert(parents.end(), instance_probs.begin(), instance_probs.end());
  const int id = static_cast<int>(g.size());
  return g.push(Tensor<T>({1}, v), parents, [=](Graph<T>& gr) {
    const auto d = consistency_loss_grad<T>(gather(gr, pixel_probs), gather(gr, instance_probs));
    const T go = gr.grad(Var{id}).data[0];
    scatter_add(gr, pixel_probs, d.pixel, go);
    scatter_add(gr, instance_probs, d.instance, go);
  });
}

#define DADET_INSTANTIATE_LOSSES(T)                                                                      \
  template struct ClassCenters<T>;                                                                        \
  template T center_loss<T>(std::span<const T>, std::span<const DomainTag>, const ClassCenters<T>&);      \
  template CenterLossGrad<T> center_loss_grad<T>(std::span<const T>, std::span<const DomainTag>,          \
                                                 const ClassCenters<T>&);                                 \
  template T domain_ce_image<T>(const std::vector<std::vector<T>>&, std::span<const DomainTag>);          \
  template std::vector<std::vector<T>> domain_ce_image_grad<T>(const std::vector<std::vector<T>>&,        \
                                                               std::span<const DomainTag>);               \
  template T domain_ce_instance<T>(const std::vector<std::vector<T>>&, std::span<const DomainTag>);       \
  template std::vector<std::vector<T>> domain_ce_instance_grad<T>(const std::vector<std::vector<T>>&,     \
                                                                  std::span<const DomainTag>);            \
  template T consistency_loss<T>(const std::vector<std::vector<T>>&, const std::vector<std::vector<T>>&); \
  template ConsistencyGrad<T> consistency_loss_grad<T>(const std::vector<std::vector<T>>&,                \
                                                       const std::vector<std::vector<T>>&);               \
  template Var center_loss_node<T>(Graph<T>&, Var, const std::vector<DomainTag>&, Var, Var);              \
  template Var domain_ce_image_node<T>(Graph<T>&, const std::vector<Var>&, const std::vector<DomainTag>&); \
  template Var domain_ce_instance_node<T>(Graph<T>&, const std::vector<Var>&,                             \
                                          const std::vector<DomainTag>&);                                 \
  template Var consistency_loss_node<T>(Graph<T>&, const std::vector<Var>&, const std::vector<Var>&);

DADET_INSTANTIATE_LOSSES(float)
DADET_INSTANTIATE_LOSSES(double)

}  // namespace dadet
