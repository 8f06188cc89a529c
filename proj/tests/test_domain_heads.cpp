// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0

#include "dadet/domain_heads.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <random>

#include "dadet/adaptation_losses.hpp"
#include "test_util.hpp"

namespace dadet {
namespace {

using testing::random_tensor;

constexpr int kChannels = 6;
constexpr int kInstanceDim = 5;

ParamStore<double> head_params(std::uint64_t seed, double stddev = 0.5) {
  std::mt19937_64 rng(seed);
  DomainHeadConfig cfg;
  cfg.image_hidden = 4;
  cfg.instance_hidden = 3;
  cfg.init_std = stddev;
  ParamStore<double> p;
  init_domain_head_params(p, kChannels, kInstanceDim, cfg, rng);
  for (const char* b : {"img_head.conv1.b", "img_head.conv2.b", "inst_head.fc1.b", "inst_head.fc2.b"}) {
    for (auto& v : p.at(b).data) v = std::normal_distribution<double>(0, stddev)(rng);
  }
  return p;
}

TEST(DomainHeads, ZeroHeadsPredictOneHalf) {
  auto p = head_params(1);
  for (auto& [name, t] : p.all()) std::fill(t.data.begin(), t.data.end(), 0.0);
  std::mt19937_64 rng(2);
  const auto probs = image_domain_forward(p, random_tensor({kChannels, 3, 5}, rng));
  EXPECT_EQ(probs.shape, (std::vector<int>{3, 5}));
  for (double v : probs.data) EXPECT_EQ(v, 0.5);
  for (double v : instance_domain_forward(p, random_tensor({7, kInstanceDim}, rng))) EXPECT_EQ(v, 0.5);
}

TEST(DomainHeads, OutputsStrictlyInsideUnitInterval) {
  const auto p = head_params(3, 0.3);
  std::mt19937_64 rng(4);
  for (int t = 0; t < 10; ++t) {
    for (double v : image_domain_forward(p, random_tensor({kChannels, 4, 4}, rng, -3, 3)).data) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
    for (double v : instance_domain_forward(p, random_tensor({6, kInstanceDim}, rng, -3, 3))) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(DomainHeads, InstanceEmptyAndWidthMismatch) {
  const auto p = head_params(5);
  EXPECT_TRUE(instance_domain_forward(p, Tensor<double>({0, kInstanceDim})).empty());
  EXPECT_THROW(instance_domain_forward(p, Tensor<double>({3, kInstanceDim + 1})), std::invalid_argument);

  Graph<double> g;
  const auto nodes = instance_domain_forward_node(g, p, g.input(Tensor<double>({0, kInstanceDim})), GradientReversal{});
  const Var loss = domain_ce_instance_node(g, {nodes.probs}, {DomainTag::kTarget});
  EXPECT_EQ(g.scalar(loss), 0.0);
}

TEST(DomainHeads, InstancePermutationEquivariant) {
  const auto p = head_params(6);
  std::mt19937_64 rng(7);
  const auto x = random_tensor({5, kInstanceDim}, rng);
  const std::vector<int> perm{3, 0, 4, 1, 2};
  Tensor<double> xp({5, kInstanceDim});
  for (int i = 0; i < 5; ++i)
    for (int k = 0; k < kInstanceDim; ++k) xp.data[i * kInstanceDim + k] = x.data[perm[i] * kInstanceDim + k];
  const auto a = instance_domain_forward(p, x), b = instance_domain_forward(p, xp);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(b[i], a[perm[i]]);
}

// Same layers without the reversal.
Var plain_image_head(Graph<double>& g, const ParamStore<double>& p, Var x) {
  Var h = relu(g, conv2d(g, x, p.var(g, "img_head.conv1.w"), p.var(g, "img_head.conv1.b"), 1, 0));
  Var logit = conv2d(g, h, p.var(g, "img_head.conv2.w"), p.var(g, "img_head.conv2.b"), 1, 0);
  return reshape(g, sigmoid(g, logit), {g.shape(logit)[1], g.shape(logit)[2]});
}

Var plain_instance_head(Graph<double>& g, const ParamStore<double>& p, Var x) {
  Var h = relu(g, linear(g, x, p.var(g, "inst_head.fc1.w"), p.var(g, "inst_head.fc1.b")));
  Var logit = linear(g, h, p.var(g, "inst_head.fc2.w"), p.var(g, "inst_head.fc2.b"));
  return reshape(g, sigmoid(g, logit), {g.shape(x)[0]});
}

struct HeadGrads {
  Tensor<double> feature_grad;
  std::map<std::string, Tensor<double>> params;
};

HeadGrads image_grads(const ParamStore<double>& p, const Tensor<double>& f, std::optional<double> lambda) {
  Graph<double> g;
  const Var x = g.input(f, true);
  const Var probs = lambda ? image_domain_forward_node(g, p, x, GradientReversal{*lambda}).probs : plain_image_head(g, p, x);
  g.backward(domain_ce_image_node(g, {probs}, {DomainTag::kSource}));
  return {g.grad(x), g.param_grads()};
}

HeadGrads instance_grads(const ParamStore<double>& p, const Tensor<double>& f, std::optional<double> lambda) {
  Graph<double> g;
  const Var x = g.input(f, true);
  const Var probs =
      lambda ? instance_domain_forward_node(g, p, x, GradientReversal{*lambda}).probs : plain_instance_head(g, p, x);
  g.backward(domain_ce_instance_node(g, {probs}, {DomainTag::kTarget}));
  return {g.grad(x), g.param_grads()};
}

TEST(DomainHeads, ReversedGradientExactAndHeadGradientsUnchanged) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto p = head_params(10 + s);
    std::mt19937_64 rng(20 + s);
    const auto fm = random_tensor({kChannels, 3, 4}, rng);
    const auto rois = random_tensor({4, kInstanceDim}, rng);
    for (auto grads : {image_grads, instance_grads}) {
      const auto& input = grads == image_grads ? fm : rois;
      const HeadGrads plain = grads(p, input, std::nullopt);
      for (double lambda : {1.0, 0.25, 0.0}) {
        const HeadGrads rev = grads(p, input, lambda);
        for (std::size_t i = 0; i < input.size(); ++i)
          ASSERT_EQ(rev.feature_grad.data[i], -lambda * plain.feature_grad.data[i]);
        for (const auto& [name, gt] : plain.params) {
          ASSERT_TRUE(rev.params.count(name));
          EXPECT_EQ(rev.params.at(name).data, gt.data) << name;
        }
      }
    }
  }
}

TEST(DomainHeads, ParameterFiniteDifferences) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto p = head_params(40 + s);
    std::mt19937_64 rng(50 + s);
    const auto fm = random_tensor({kChannels, 3, 3}, rng);
    const auto rois = random_tensor({4, kInstanceDim}, rng);
    auto loss = [&](const ParamStore<double>& q, Graph<double>& g) {
      const auto img = image_domain_forward_node(g, q, g.input(fm), GradientReversal{});
      const auto ins = instance_domain_forward_node(g, q, g.input(rois), GradientReversal{});
      const Var a = domain_ce_image_node(g, {img.probs}, {DomainTag::kTarget});
      const Var b = domain_ce_instance_node(g, {ins.probs}, {DomainTag::kTarget});
      const Var c = consistency_loss_node(g, {img.probs}, {ins.probs});
      return weighted_sum<double>(g, {a, b, c}, {1.0, 1.0, 1.0});
    };
    Graph<double> g;
    g.backward(loss(p, g));
    const auto grads = g.param_grads();
    const double h = 1e-6;
    for (const auto& [name, value] : p.all()) {
      if (name.rfind("centers.", 0) == 0) continue;
      for (std::size_t i = 0; i < value.size(); ++i) {
        ParamStore<double> plus = p, minus = p;
        plus.at(name).data[i] += h;
        minus.at(name).data[i] -= h;
        Graph<double> gp, gm;
        const double num = (gp.scalar(loss(plus, gp)) - gm.scalar(loss(minus, gm))) / (2 * h);
        const double ana = grads.at(name).data[i];
        EXPECT_LE(std::abs(ana - num), 1e-4 * std::max({std::abs(ana), std::abs(num), 1e-6})) << name << "[" << i << "]";
      }
    }
  }
}

TEST(DomainHeads, FeatureFiniteDifferencesThroughReversal) {
  const double lambda = 0.7, h = 1e-6;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto p = head_params(60 + s);
    std::mt19937_64 rng(70 + s);
    const auto fm = random_tensor({kChannels, 2, 3}, rng);
    const HeadGrads rev = image_grads(p, fm, lambda);
    for (std::size_t i = 0; i < fm.size(); ++i) {
      auto eval = [&](double d) {
        Tensor<double> x = fm;
        x.data[i] += d;
        Graph<double> g;
        return g.scalar(domain_ce_image_node(g, {plain_image_head(g, p, g.input(x))}, {DomainTag::kSource}));
      };
      const double num = -lambda * (eval(h) - eval(-h)) / (2 * h);
      EXPECT_LE(std::abs(rev.feature_grad.data[i] - num), 1e-4 * std::max(std::abs(num), 1e-6));
    }
  }
}

// Toy adversarial game: feature f = a * u, probability sigmoid(w f), loss = domain CE.
TEST(DomainHeads, AdversarialDirection) {
  const double u = 0.8, lr = 0.05;
  for (double a0 : {0.5, -1.2, 2.0}) {
    for (double w0 : {0.7, -0.3}) {
      for (DomainTag tag : {DomainTag::kSource, DomainTag::kTarget}) {
        auto ce = [&](double a, double w) {
          Graph<double> g;
          const Var f = g.input(Tensor<double>({1, 1}, a * u));
          const Var prob = sigmoid(g, linear(g, f, g.input(Tensor<double>({1, 1}, w)), g.input(Tensor<double>({1}))));
          return g.scalar(domain_ce_instance_node(g, {reshape(g, prob, {1})}, {tag}));
        };
        Graph<double> g;
        const Var a = g.param("a", Tensor<double>({1}, a0));
        const Var w = g.param("w", Tensor<double>({1, 1}, w0));
        const Var f = reshape(g, scale(g, a, u), {1, 1});
        const Var prob = sigmoid(g, linear(g, gradient_reversal(g, f, 1.0), w, g.input(Tensor<double>({1}))));
        g.backward(domain_ce_instance_node(g, {reshape(g, prob, {1})}, {tag}));
        const double ga = g.grad(a).data[0], gw = g.grad(w).data[0];
        const double before = ce(a0, w0);
        EXPECT_LE(ce(a0, w0 - lr * gw), before);  // the classifier improves
        EXPECT_GE(ce(a0 - lr * ga, w0), before);  // the features make it worse
      }
    }
  }
}

}  // namespace
}  // namespace dadet
