// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance gate. Prints one PASS/FAIL line per criterion and exits nonzero if any
// criterion fails. Pass criterion numbers as arguments to run a subset.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dadet/adaptation_losses.hpp"
#include "dadet/boxes.hpp"
#include "dadet/detector.hpp"
#include "dadet/domain_heads.hpp"
#include "dadet/evaluation.hpp"
#include "dadet/grl.hpp"
#include "dadet/se_bank.hpp"
#include "dadet/trainer.hpp"
#include "json.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace dadet {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using testing::random_tensor;

constexpr DomainTag kS = DomainTag::kSource;
constexpr DomainTag kT = DomainTag::kTarget;

// Collects failures; keeps the first few messages for the report.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    ++checks_;
    if (ok) return;
    ++failures_;
    if (messages_.size() < 5) messages_.push_back(what);
  }
  void note(const std::string& s) { notes_.push_back(s); }
  bool passed() const { return failures_ == 0 && checks_ > 0; }
  std::string summary() const {
    std::ostringstream out;
    out << checks_ << " checks";
    if (failures_) out << ", " << failures_ << " failed";
    for (const auto& n : notes_) out << "; " << n;
    for (const auto& m : messages_) out << "\n    " << m;
    return out.str();
  }

 private:
  int checks_ = 0;
  int failures_ = 0;
  std::vector<std::string> messages_;
  std::vector<std::string> notes_;
};

std::string fmt(double v, int digits = 6) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<DomainTag> random_tags(std::mt19937_64& rng, int n) {
  std::vector<DomainTag> t;
  for (int i = 0; i < n; ++i) t.push_back(rng() % 2 ? kT : kS);
  return t;
}

std::vector<int> as_ints(const std::vector<DomainTag>& t) {
  std::vector<int> out;
  for (DomainTag d : t) out.push_back(to_int(d));
  return out;
}

std::vector<std::vector<double>> ragged_probs(std::mt19937_64& rng, int n, int min_len, int max_len) {
  std::uniform_int_distribution<int> len(min_len, max_len);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<std::vector<double>> out(static_cast<std::size_t>(n));
  for (auto& v : out) {
    for (int k = len(rng); k > 0; --k) {
      // Occasional exact endpoints exercise the clamp.
      const int r = static_cast<int>(rng() % 40);
      v.push_back(r == 0 ? 0.0 : r == 1 ? 1.0 : u(rng));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// 1. Loss formulas against brute-force references.

void loss_oracles(Check& c) {
  const double tol = 1e-10;
  auto t0 = std::chrono::steady_clock::now();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    std::uniform_int_distribution<int> rows(1, 12), dims(1, 16);
    const int m = rows(rng), d = dims(rng);
    const auto x = random_tensor({m, d}, rng, -3, 3);
    const auto tags = random_tags(rng, m);
    ClassCenters<double> centers(d, AdaptLevel::kImage);
    centers.source_center = random_tensor({d}, rng, -3, 3).values();
    centers.target_center = random_tensor({d}, rng, -3, 3).values();
    std::vector<std::vector<double>> xr(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) xr[i].assign(x.data.begin() + i * d, x.data.begin() + (i + 1) * d);
    const double want = oracle::center_loss(xr, as_ints(tags), centers.source_center, centers.target_center);
    const double got = center_loss<double>(x.data, tags, centers);
    c.expect(std::abs(got - want) <= tol, "center_loss seed " + std::to_string(seed) + ": " + fmt(got, 17) + " vs " + fmt(want, 17));
    Graph<double> g;
    const double node = g.scalar(center_loss_node(g, g.input(x), tags, g.input(Tensor<double>({d}, centers.source_center)),
                                                  g.input(Tensor<double>({d}, centers.target_center))));
    c.expect(std::abs(node - want) <= tol, "center_loss_node seed " + std::to_string(seed));
  }
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(2000 + seed);
    const int n = 1 + static_cast<int>(rng() % 6);
    const auto tags = random_tags(rng, n);
    const auto img = ragged_probs(rng, n, 1, 30);
    const double want_img = oracle::domain_ce(img, as_ints(tags));
    c.expect(std::abs(domain_ce_image<double>(img, tags) - want_img) <= tol, "domain_ce_image seed " + std::to_string(seed));

    auto ins = ragged_probs(rng, n, 0, 12);
    if (seed % 10 == 0) ins[0].clear();
    bool any = false;
    for (const auto& v : ins) any = any || !v.empty();
    const double want_ins = any ? oracle::domain_ce(ins, as_ints(tags)) : 0.0;
    c.expect(std::abs(domain_ce_instance<double>(ins, tags) - want_ins) <= tol,
             "domain_ce_instance seed " + std::to_string(seed));

    const double want_cst = oracle::consistency(img, ins);
    c.expect(std::abs(consistency_loss<double>(img, ins) - want_cst) <= tol, "consistency_loss seed " + std::to_string(seed));

    // Graph forms agree with the same references.
    Graph<double> g;
    std::vector<Var> pv, iv;
    for (const auto& v : img) pv.push_back(g.input(Tensor<double>({static_cast<int>(v.size())}, v)));
    for (const auto& v : ins) iv.push_back(g.input(Tensor<double>({static_cast<int>(v.size())}, v)));
    c.expect(std::abs(g.scalar(domain_ce_image_node(g, pv, tags)) - want_img) <= tol, "domain_ce_image_node seed " + std::to_string(seed));
    c.expect(std::abs(g.scalar(domain_ce_instance_node(g, iv, tags)) - want_ins) <= tol,
             "domain_ce_instance_node seed " + std::to_string(seed));
    c.expect(std::abs(g.scalar(consistency_loss_node(g, pv, iv)) - want_cst) <= tol, "consistency_loss_node seed " + std::to_string(seed));
  }
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(3000 + seed);
    std::uniform_real_distribution<double> u(0, 5), w(0, 2);
    LossParts p{u(rng), u(rng), u(rng), u(rng), u(rng), u(rng)};
    const double lce = w(rng), lc = seed % 4 ? w(rng) : 0.0;
    const LossBundle b = compose_losses(p, lce, lc);
    const double l1 = p.detection + lce * p.image_ce + lce * p.instance_ce + lce * p.consistency;
    const double l2 = lc * p.image_center + lc * p.instance_center;
    c.expect(std::abs(b.l1() - l1) <= tol && std::abs(b.l2() - l2) <= tol, "compose_losses seed " + std::to_string(seed));

    const double es = rng() % 10 ? std::uniform_real_distribution<double>(0, 1)(rng) : 0.0;
    const double et = std::uniform_real_distribution<double>(0, 1)(rng);
    const double h = 2.0 - 2.0 * es - 2.0 * et;
    c.expect(std::abs(h_divergence(es, et) - h) <= tol, "h_divergence seed " + std::to_string(seed));
  }
  const double secs = seconds_since(t0);
  c.note("runtime " + fmt(secs, 3) + " s");
  c.expect(secs < 10, "runtime " + fmt(secs) + " s exceeds 10 s");
}

// ---------------------------------------------------------------------------
// 2. Analytic gradients against central finite differences.

constexpr double kFdTol = 1e-4;

void expect_fd(Check& c, const testing::GradCheck& r, const std::string& what) {
  c.expect(r.max_rel_error < kFdTol, what + ": " + r.worst);
}

// Perturbs every coordinate (or every `stride`-th) of every parameter in a store.
void expect_param_fd(Check& c, const ParamStore<double>& p,
                     const std::function<double(const ParamStore<double>&, Graph<double>&, bool)>& loss,
                     const std::string& what, std::size_t stride = 1, double floor = 1e-6,
                     const std::function<bool(const std::string&)>& skip = {}) {
  Graph<double> g;
  loss(p, g, true);
  const auto grads = g.param_grads();
  const double h = 1e-6;
  for (const auto& [name, value] : p.all()) {
    if (skip && skip(name)) continue;
    c.expect(grads.count(name) > 0, what + ": no gradient for " + name);
    if (!grads.count(name)) continue;
    for (std::size_t i = 0; i < value.size(); i += stride) {
      ParamStore<double> plus = p, minus = p;
      plus.at(name).data[i] += h;
      minus.at(name).data[i] -= h;
      Graph<double> gp, gm;
      const double num = (loss(plus, gp, false) - loss(minus, gm, false)) / (2 * h);
      const double ana = grads.at(name).data[i];
      c.expect(std::abs(ana - num) <= kFdTol * std::max({std::abs(ana), std::abs(num), floor}),
               what + ": " + name + "[" + std::to_string(i) + "] analytic " + fmt(ana, 10) + " vs numeric " + fmt(num, 10));
    }
  }
}

SEBank<double> random_bank(int n, int ch, int r, std::mt19937_64& rng) {
  SEBank<double> b(n, ch, r);
  for (auto& a : b.adaptors) a.randomize(rng, 0.4);
  b.attention_w = random_tensor({n, ch}, rng);
  b.attention_b = random_tensor({n}, rng);
  return b;
}

ParamStore<double> head_params(std::uint64_t seed, int channels, int instance_dim) {
  std::mt19937_64 rng(seed);
  DomainHeadConfig cfg;
  cfg.image_hidden = 4;
  cfg.instance_hidden = 3;
  cfg.init_std = 0.5;
  ParamStore<double> p;
  init_domain_head_params(p, channels, instance_dim, cfg, rng);
  for (const char* b : {"img_head.conv1.b", "img_head.conv2.b", "inst_head.fc1.b", "inst_head.fc2.b"})
    for (auto& v : p.at(b).data) v = std::normal_distribution<double>(0, 0.5)(rng);
  return p;
}

// Two stages of one block each, stride 8, an SE bank in stage 2.
DetectorConfig tiny_detector() {
  DetectorConfig cfg;
  cfg.backbone.stem_width = 4;
  cfg.backbone.stages = {{8, 1, 2, {false}}, {8, 1, 2, {false}}};
  cfg.backbone.se_reduction = 4;
  cfg.backbone = inject_banks(cfg.backbone, {2});
  cfg.anchors.sizes = {8, 16};
  cfg.anchors.ratios = {1.0};
  cfg.anchors.per_image_samples = 8;
  cfg.rpn_channels = 6;
  cfg.fc_dim = 8;
  cfg.roi_pool = 2;
  return cfg;
}

void gradient_checks(Check& c) {
  auto t0 = std::chrono::steady_clock::now();
  for (std::uint64_t s = 0; s < 10; ++s) {
    const std::string tag = " seed " + std::to_string(s);
    std::mt19937_64 rng(5000 + s);

    // Losses.
    const auto x = random_tensor({5, 4}, rng), cs = random_tensor({4}, rng), ct = random_tensor({4}, rng);
    const auto tags5 = random_tags(rng, 5);
    expect_fd(c, testing::check_gradients({x, cs, ct}, [&](Graph<double>& g, const std::vector<Var>& v) {
      return center_loss_node(g, v[0], tags5, v[1], v[2]);
    }, s), "center_loss" + tag);
    const auto pa = random_tensor({2, 3}, rng, 0.05, 0.95), pb = random_tensor({4}, rng, 0.05, 0.95);
    const std::vector<DomainTag> tags2{s % 2 ? kS : kT, kT};
    expect_fd(c, testing::check_gradients({pa, pb}, [&](Graph<double>& g, const std::vector<Var>& v) {
      return domain_ce_image_node(g, v, tags2);
    }, s), "domain_ce_image" + tag);
    expect_fd(c, testing::check_gradients({pa, pb}, [&](Graph<double>& g, const std::vector<Var>& v) {
      return domain_ce_instance_node(g, v, tags2);
    }, s), "domain_ce_instance" + tag);
    const auto i0 = random_tensor({4}, rng, 0, 1), i1 = random_tensor({2}, rng, 0, 1);
    expect_fd(c, testing::check_gradients({pa, pb, i0, i1}, [](Graph<double>& g, const std::vector<Var>& v) {
      return consistency_loss_node(g, {v[0], v[1]}, {v[2], v[3]});
    }, s), "consistency_loss" + tag);

    // SE block: one adaptor, input and all four weights.
    {
      const int ch = 8;
      SEAdaptor<double> a(ch, 2);
      a.randomize(rng, 0.5);
      const auto xin = random_tensor({ch, 3, 3}, rng);
      const auto w = random_tensor({1, ch * 9}, rng);
      expect_fd(c, testing::check_gradients({xin, a.fc1_w, a.fc1_b, a.fc2_w, a.fc2_b},
                                            [&](Graph<double>& g, const std::vector<Var>& v) {
        const Var e = se_excitation_node(g, global_avg_pool(g, v[0]), v[1], v[2], v[3], v[4]);
        const Var out = channel_scale(g, v[0], e);
        return linear(g, reshape(g, out, {ch * 9}), g.input(w), g.input(Tensor<double>({1})));
      }, s), "se_block" + tag);
    }

    // SE bank through the library's parameter-store graph form.
    {
      const int ch = 8, n = 2;
      ParamStore<double> store;
      register_bank(store, "bank", random_bank(n, ch, 2, rng));
      const auto xin = random_tensor({ch, 2, 3}, rng);
      const auto w = random_tensor({1, ch * 6}, rng);
      expect_param_fd(c, store, [&](const ParamStore<double>& p, Graph<double>& g, bool backward) {
        const auto nodes = bank_forward_node(g, p, "bank", g.input(xin), n);
        const Var out = linear(g, reshape(g, nodes.out, {ch * 6}), g.input(w), g.input(Tensor<double>({1})));
        if (backward) g.backward(out);
        return g.scalar(out);
      }, "se_bank params" + tag, 2);
      ParamStore<double> fixed = store;
      expect_fd(c, testing::check_gradients({xin}, [&](Graph<double>& g, const std::vector<Var>& v) {
        const auto nodes = bank_forward_node(g, fixed, "bank", v[0], n);
        return linear(g, reshape(g, nodes.out, {ch * 6}), g.input(w), g.input(Tensor<double>({1})));
      }, s), "se_bank input" + tag);
    }

    // Domain heads: every head parameter under the combined adaptation loss.
    {
      const int channels = 6, inst = 5;
      const auto p = head_params(5100 + s, channels, inst);
      const auto fm = random_tensor({channels, 3, 3}, rng);
      const auto rois = random_tensor({4, inst}, rng);
      expect_param_fd(c, p, [&](const ParamStore<double>& q, Graph<double>& g, bool backward) {
        const auto img = image_domain_forward_node(g, q, g.input(fm), GradientReversal{});
        const auto ins = instance_domain_forward_node(g, q, g.input(rois), GradientReversal{});
        const Var a = domain_ce_image_node(g, {img.probs}, {kT});
        const Var b = domain_ce_instance_node(g, {ins.probs}, {kT});
        const Var cst = consistency_loss_node(g, {img.probs}, {ins.probs});
        const Var total = weighted_sum<double>(g, {a, b, cst}, {1.0, 1.0, 1.0});
        if (backward) g.backward(total);
        return g.scalar(total);
      }, "domain_heads" + tag, 1, 1e-6, [](const std::string& name) { return name.rfind("centers.", 0) == 0; });
    }

    // GRL composite: forward ignores the reversal, so -lambda times the plain numeric gradient is the reference.
    {
      const double lambda = 0.5, h = 1e-6;
      const auto xg = random_tensor({5}, rng), w = random_tensor({3, 5}, rng);
      auto f = [&](Graph<double>& g, Var in) {
        const Var hid = sigmoid(g, linear(g, in, g.input(w), g.input(Tensor<double>({3}))));
        return linear(g, hid, g.input(Tensor<double>({1, 3}, 1.0)), g.input(Tensor<double>({1})));
      };
      Graph<double> g;
      const Var xv = g.input(xg, true);
      g.backward(f(g, gradient_reversal(g, xv, lambda)));
      for (std::size_t i = 0; i < xg.size(); ++i) {
        auto eval = [&](double d) {
          Tensor<double> xp = xg;
          xp.data[i] += d;
          Graph<double> ge;
          return ge.scalar(f(ge, ge.input(xp)));
        };
        const double num = -lambda * (eval(h) - eval(-h)) / (2 * h);
        const double ana = g.grad(xv).data[i];
        c.expect(std::abs(ana - num) <= kFdTol * std::max({std::abs(ana), std::abs(num), 1e-6}), "grl composite" + tag);
      }
    }

    // Detection heads: backbone with an SE bank, RPN and box head on fixed targets.
    {
      const DetectorConfig cfg = tiny_detector();
      ParamStore<double> p;
      init_detector_params(p, cfg, rng);
      const auto img = random_tensor({3, 32, 32}, rng, 0, 1);
      const std::vector<BoundingBox> gt{make_box(4, 6, 18, 20, 1), make_box(16, 12, 30, 28, 3)};
      const RpnTargets rpn_t = assign_rpn_targets(generate_anchors(cfg.anchors, 4, 4, 8), gt, cfg, rng);
      const std::vector<BoundingBox> props{make_box(3, 5, 17, 21), make_box(15, 13, 29, 27), make_box(1, 20, 12, 31)};
      const RoiSample roi = sample_rois(props, gt, cfg, rng);
      expect_param_fd(c, p, [&](const ParamStore<double>& q, Graph<double>& g, bool backward) {
        const Var feat = backbone_forward_node(g, q, cfg.backbone, g.input(img));
        const RpnNodes rpn = rpn_head_node(g, q, cfg, feat);
        const RoiHeadNodes head = roi_head_node(g, q, cfg, feat, roi.boxes);
        const auto [rc, rb] = rpn_loss_node(g, rpn, rpn_t, cfg.anchors.per_location());
        const auto [cc, cb] = roi_loss_node(g, head, roi);
        const Var total = weighted_sum<double>(g, {rc, rb, cc, cb}, {1, 1, 1, 1});
        if (backward) g.backward(total);
        return g.scalar(total);
      }, "detection_heads" + tag, 7, 1e-5);
    }
  }
  const double secs = seconds_since(t0);
  c.note("runtime " + fmt(secs, 3) + " s");
  c.expect(secs < 120, "runtime " + fmt(secs) + " s exceeds 2 min");
}

// ---------------------------------------------------------------------------
// 3. Gradient reversal is exactly -lambda times the plain gradient.

template <typename T>
Tensor<T> composite_grad(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::optional<T> lambda) {
  Graph<T> g;
  const Var xv = g.input(x, true);
  const Var in = lambda ? gradient_reversal(g, xv, *lambda) : xv;
  const Var h = sigmoid(g, linear(g, relu(g, in), g.input(w), g.input(b)));
  const Var out = linear(g, h, g.input(Tensor<T>({1, 6}, T(0.3))), g.input(Tensor<T>({1}, T(0))));
  g.backward(out);
  return g.grad(xv);
}

template <typename T>
Tensor<T> cast_tensor(const Tensor<double>& t) {
  Tensor<T> out(t.shape);
  for (std::size_t i = 0; i < t.size(); ++i) out.data[i] = static_cast<T>(t.data[i]);
  return out;
}

template <typename T>
void grl_exact_for(Check& c, const char* type) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(7000 + seed);
    const auto x = cast_tensor<T>(random_tensor({8}, rng));
    const auto w = cast_tensor<T>(random_tensor({6, 8}, rng));
    const auto b = cast_tensor<T>(random_tensor({6}, rng));
    const auto plain = composite_grad<T>(x, w, b, std::nullopt);
    for (T lambda : {T(1), T(0.5), T(0.37), T(0.1), T(0)}) {
      const auto rev = composite_grad<T>(x, w, b, lambda);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const T want = -lambda * plain.data[i];
        c.expect(rev.data[i] == want, std::string(type) + " composite seed " + std::to_string(seed) + " lambda " +
                                          fmt(lambda) + ": " + fmt(rev.data[i], 17) + " vs " + fmt(want, 17));
      }
    }
  }
}

void grl_exactness(Check& c) {
  grl_exact_for<double>(c, "double");
  grl_exact_for<float>(c, "float");
  // Through the real domain heads: the feature gradient flips exactly, head gradients are untouched.
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto p = head_params(7100 + s, 6, 5);
    std::mt19937_64 rng(7200 + s);
    const auto fm = random_tensor({6, 3, 4}, rng);
    auto run = [&](std::optional<double> lambda) {
      Graph<double> g;
      const Var x = g.input(fm, true);
      const Var probs = lambda ? image_domain_forward_node(g, p, x, GradientReversal{*lambda}).probs
                               : image_domain_forward_node(g, p, x, GradientReversal{1.0}).probs;
      g.backward(domain_ce_image_node(g, {probs}, {kS}));
      return std::pair{g.grad(x), g.param_grads()};
    };
    // The plain gradient is the lambda = 1 reversed gradient negated, so compare lambda against lambda = 1.
    const auto [unit_x, unit_p] = run(1.0);
    for (double lambda : {0.25, 0.7, 0.0}) {
      const auto [gx, gp] = run(lambda);
      for (std::size_t i = 0; i < fm.size(); ++i) c.expect(gx.data[i] == lambda * unit_x.data[i], "image head feature gradient");
      for (const auto& [name, t] : unit_p) c.expect(gp.count(name) && gp.at(name).data == t.data, "head gradient " + name);
    }
  }
}

// ---------------------------------------------------------------------------
// 4. The center loss never reaches detector parameters.

void center_masking(Check& c) {
  auto t0 = std::chrono::steady_clock::now();
  SyntheticConfig sc;
  sc.source_train = 2;
  sc.target_train = 2;
  sc.target_eval = 0;
  const SyntheticSplits d = generate_synthetic(sc);
  const Batch batch{{&d.source_train.samples[0]}, {&d.target_train.samples[0]}};
  TrainConfig with = desk_train_config();
  with.lambda_center = 1.0;
  TrainConfig without = with;
  without.lambda_center = 0.0;
  TrainState sa = init_train_state(with), sb = init_train_state(without);
  const StepReport a = train_step(sa, batch, 0, true);
  const StepReport b = train_step(sb, batch, 0, true);

  int detector = 0, adaptation = 0, adaptation_differs = 0;
  for (const auto& [name, ga] : a.grad_l1) {
    if (in_center_partition(name)) {
      ++adaptation;
      adaptation_differs += a.delta.at(name).data != b.delta.at(name).data;
      continue;
    }
    ++detector;
    c.expect(ga.data == b.grad_l1.at(name).data, "main gradient differs for " + name);
    c.expect(a.delta.at(name).data == b.delta.at(name).data, "update differs for " + name);
    c.expect(sa.params.at(name).data == sb.params.at(name).data, "weights differ for " + name);
  }
  for (const auto& [name, g] : a.grad_l2) c.expect(in_center_partition(name), "center gradient reached " + name);
  for (const char* centre : {"centers.img.source", "centers.img.target", "centers.inst.source", "centers.inst.target"}) {
    c.expect(a.delta.count(centre) > 0, std::string("no update for ") + centre);
    if (a.delta.count(centre)) c.expect(a.delta.at(centre).data != b.delta.at(centre).data, std::string("center unchanged: ") + centre);
  }
  c.expect(detector > 0 && adaptation > 0, "parameter partition is empty");
  c.expect(adaptation_differs > 0, "no domain-head or center parameter moved differently");
  const double secs = seconds_since(t0);
  c.note(std::to_string(detector) + " detector tensors bit-identical, " + std::to_string(adaptation_differs) + "/" +
         std::to_string(adaptation) + " adaptation tensors differ, runtime " + fmt(secs, 3) + " s");
  c.expect(secs < 60, "runtime " + fmt(secs) + " s exceeds 1 min");
}

// ---------------------------------------------------------------------------
// 5. SE bank degeneracies.

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

void se_degeneracies(Check& c) {
  double worst_single = 0, worst_pair = 0, worst_sum = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    std::mt19937_64 rng(8000 + s);
    const int ch = 8 << (s % 3);
    const auto one = random_bank(1, ch, 4, rng);
    const auto x = random_tensor({ch, 4, 5}, rng, -2, 2);
    worst_single = std::max(worst_single, max_abs_diff(bank_forward(x, one), se_forward(x, one.adaptors[0])));
    SEBank<double> two = random_bank(2, ch, 4, rng);
    two.adaptors = {one.adaptors[0], one.adaptors[0]};
    worst_pair = std::max(worst_pair, max_abs_diff(bank_forward(x, two), bank_forward(x, one)));
    for (int n = 1; n <= 5; ++n) {
      auto bank = random_bank(n, ch, 4, rng);
      for (auto& w : bank.attention_w.data) w *= 10;
      double sum = 0;
      for (double p : bank_attention(x, bank)) {
        c.expect(p >= 0, "negative attention weight");
        sum += p;
      }
      worst_sum = std::max(worst_sum, std::abs(sum - 1));
    }
  }
  c.expect(worst_single <= 1e-6, "N=1 bank vs SE block: " + fmt(worst_single));
  c.expect(worst_pair <= 1e-6, "identical N=2 bank vs N=1: " + fmt(worst_pair));
  c.expect(worst_sum <= 1e-6, "attention sum off by " + fmt(worst_sum));
  c.note("max deviations " + fmt(worst_single, 3) + ", " + fmt(worst_pair, 3) + ", " + fmt(worst_sum, 3));
}

// ---------------------------------------------------------------------------
// 6. NMS and mAP references.

std::vector<BoundingBox> random_boxes(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> pos(0, 50), len(2, 25);
  std::vector<BoundingBox> out;
  for (int i = 0; i < n; ++i) {
    const double x = pos(rng), y = pos(rng);
    out.push_back(make_box(x, y, x + len(rng), y + len(rng)));
  }
  return out;
}

void nms_and_map(Check& c) {
  std::mt19937_64 rng(9000);
  std::uniform_int_distribution<int> count(0, 10);
  std::uniform_real_distribution<double> score(0, 1), thr(0, 1);
  for (int t = 0; t < 1000; ++t) {
    const auto boxes = random_boxes(rng, count(rng));
    std::vector<double> scores;
    // Every fifth instance uses coarse scores so ties occur.
    for (std::size_t i = 0; i < boxes.size(); ++i) scores.push_back(t % 5 ? score(rng) : std::round(score(rng) * 3));
    const double th = thr(rng);
    c.expect(nms(boxes, scores, th) == oracle::nms(boxes, scores, th), "nms instance " + std::to_string(t));
  }

  std::ifstream in(std::string(DADET_TEST_DATA) + "/ap_golden.json");
  const json doc = json::parse(in);
  std::vector<Category> cats;
  for (const auto& k : doc["categories"]) cats.push_back({k["id"].get<int>(), k["name"].get<std::string>()});
  std::vector<std::vector<BoundingBox>> gt(5), dt(5);
  for (const auto& g : doc["gt"])
    gt[g[0].get<int>() - 1].push_back(
        make_box(g[2].get<double>(), g[3].get<double>(), g[4].get<double>(), g[5].get<double>(), g[1].get<int>()));
  for (const auto& d : doc["detections"])
    dt[d[0].get<int>() - 1].push_back(make_box(d[2].get<double>(), d[3].get<double>(), d[4].get<double>(),
                                               d[5].get<double>(), d[1].get<int>(), d[6].get<double>()));
  const EvalResult r = evaluate_detections(gt, dt, cats);
  double worst = std::max(std::abs(r.map_coco - doc["map_coco"].get<double>()), std::abs(r.map_50 - doc["map_50"].get<double>()));
  for (const auto& [name, ap] : doc["per_class_ap"].items()) worst = std::max(worst, std::abs(r.per_class_ap.at(name) - ap.get<double>()));
  for (const auto& [name, ap] : doc["per_class_ap50"].items())
    worst = std::max(worst, std::abs(r.per_class_ap50.at(name) - ap.get<double>()));
  // Exact means equal to the last place of a double sum of 101 terms.
  c.expect(worst <= 1e-12, "golden AP fixture deviates by " + fmt(worst));
  c.note("golden fixture max deviation " + fmt(worst, 3) + ", map_coco " + fmt(r.map_coco, 17) + ", map_50 " + fmt(r.map_50, 17));
}

// ---------------------------------------------------------------------------
// 7. Probe endpoints.

std::vector<std::vector<double>> gaussian_cloud(std::mt19937_64& rng, int n, int dim, double offset) {
  std::normal_distribution<double> z(0, 1);
  std::vector<std::vector<double>> out(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(dim)));
  for (auto& v : out)
    for (auto& x : v) x = z(rng) + offset;
  return out;
}

void probe_endpoints(Check& c) {
  const int dim = 8;
  double worst_same = -2, worst_split = 2;
  for (std::uint64_t s = 0; s < 5; ++s) {
    std::mt19937_64 rng(9500 + s);
    const auto a = gaussian_cloud(rng, 40, dim, 0);
    const double identical = probe_h_divergence(a, a);
    const auto big_a = gaussian_cloud(rng, 1000, dim, 0), big_b = gaussian_cloud(rng, 1000, dim, 0);
    const double same = probe_h_divergence(big_a, big_b);
    // 10 sigma between cluster means: offset 10 / sqrt(dim) along every axis.
    const auto far = gaussian_cloud(rng, 40, dim, 10.0 / std::sqrt(static_cast<double>(dim)));
    const double split = probe_h_divergence(a, far);
    c.expect(identical <= 0.3, "identical sets: " + fmt(identical));
    c.expect(same <= 0.3, "same distribution: " + fmt(same));
    c.expect(split >= 1.8, "separated clusters: " + fmt(split));
    worst_same = std::max({worst_same, identical, same});
    worst_split = std::min(worst_split, split);
  }
  c.note("max same-distribution h " + fmt(worst_same, 3) + ", min separated h " + fmt(worst_split, 3));
}

// ---------------------------------------------------------------------------
// 8. Adaptation beats the source-only baseline on the fogged target.

void directional(Check& c) {
  auto t0 = std::chrono::steady_clock::now();
  double base_sum = 0, adapt_sum = 0;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    SyntheticConfig sc;  // 500 + 500 train, 100 eval
    sc.seed = seed;
    const SyntheticSplits d = generate_synthetic(sc);
    double map[2] = {0, 0};
    for (int adapted = 0; adapted < 2; ++adapted) {
      TrainConfig cfg = desk_train_config();
      cfg.seed = seed;
      cfg.lambda_ce = adapted ? 0.1 : 0.0;
      cfg.lambda_center = 0.0;
      cfg.eval_interval = cfg.total_iters;
      cfg.probe_samples = 0;
      FitOptions opts;
      opts.write_checkpoints = false;
      const TrainingLog log = fit(cfg, d.source_train, d.target_train, &d.target_eval, opts);
      c.expect(!log.evals.empty(), "no evaluation record");
      if (!log.evals.empty()) map[adapted] = log.evals.back().result.map_50;
      std::cout << "  seed " << seed << (adapted ? " adapted " : " baseline ") << "target mAP@0.5 " << fmt(map[adapted], 4)
                << " (" << fmt(seconds_since(t0), 4) << " s)" << std::endl;
    }
    base_sum += map[0];
    adapt_sum += map[1];
    per_seed += (per_seed.empty() ? "" : ", ") + fmt(map[0], 3) + "/" + fmt(map[1], 3);
  }
  const double base = base_sum / 3, adapt = adapt_sum / 3;
  c.expect(adapt > base, "adapted mean " + fmt(adapt, 4) + " is not above baseline mean " + fmt(base, 4));
  c.note("baseline/adapted per seed " + per_seed + "; means " + fmt(base, 4) + " vs " + fmt(adapt, 4) + ", runtime " +
         fmt(seconds_since(t0) / 60, 3) + " min");
}

// ---------------------------------------------------------------------------
// 9 and 10 drive the command-line tool.

struct RunResult {
  int code = -1;
  std::string out;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch() {
  static const fs::path root = [] {
    const fs::path p = fs::temp_directory_path() / "dadet_acceptance";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

RunResult run_cli(const std::string& args) {
  static int counter = 0;
  const fs::path out = scratch() / ("stdout_" + std::to_string(counter++));
  const std::string cmd = std::string(DA_DETECT_BIN) + " " + args + " > " + out.string() + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out)};
}

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

// Small scenes and a narrow model so each CLI run takes seconds.
std::string small_setup(const std::string& name) {
  const fs::path cfg = scratch() / (name + ".cfg");
  std::ofstream(cfg) << "image_width = 64\nimage_height = 64\nmin_size = 12\nmax_size = 24\nmax_objects = 2\n"
                     << "anchor_sizes = 16,32\nrpn_batch = 32\nroi_samples = 16\ntarget_instances = 8\n"
                     << "image_hidden = 8\ninstance_hidden = 16\nprobe_samples = 0\n";
  return cfg.string();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    bool quoted = false;
    for (char ch : line) {
      if (ch == '"') {
        quoted = !quoted;
      } else if (ch == ',' && !quoted) {
        cells.push_back(cell);
        cell.clear();
      } else {
        cell += ch;
      }
    }
    cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

void ablation_tables(Check& c) {
  const std::string cfg = small_setup("ablate");
  const RunResult gen = run_cli("generate --n 4 --seed 11 --config " + cfg + " --out " + (scratch() / "ablate_data").string());
  c.expect(gen.code == 0, "generate failed");
  if (gen.code != 0) return;
  const std::string data = first_line(gen.out);
  for (const auto& [sweep, rows] : {std::pair{std::string("se"), 3}, std::pair{std::string("center"), 2}}) {
    std::string tables[2];
    for (int rep = 0; rep < 2; ++rep) {
      const RunResult r = run_cli("ablate --sweep " + sweep + " --data " + data + " --config " + cfg + " --iters 4 --seed 11 --out " +
                                  (scratch() / ("ablate_" + sweep + std::to_string(rep))).string());
      c.expect(r.code == 0, "ablate " + sweep + " failed");
      if (r.code != 0) return;
      const fs::path dir = first_line(r.out);
      tables[rep] = slurp(dir / "ablation.csv");
      const auto table = read_csv(dir / "ablation.csv");
      c.expect(!table.empty() && table[0].size() == 7, sweep + ": bad header");
      c.expect(static_cast<int>(table.size()) == rows + 1, sweep + ": expected " + std::to_string(rows) + " rows");
      std::set<std::string> hashes;
      for (std::size_t i = 1; i < table.size(); ++i) {
        c.expect(table[i].size() == 7, sweep + ": malformed row");
        if (table[i].size() != 7) continue;
        hashes.insert(table[i][4]);
        // Each row is attributable: its resolved config and logs sit next to the table.
        c.expect(fs::exists(dir / table[i][0] / "config.txt"), sweep + ": missing config for " + table[i][0]);
        c.expect(fs::exists(dir / table[i][0] / "metrics.jsonl"), sweep + ": missing metrics for " + table[i][0]);
      }
      c.expect(static_cast<int>(hashes.size()) == rows, sweep + ": config hashes not unique");
      c.expect(fs::exists(dir / "curves.csv"), sweep + ": missing curves.csv");
    }
    c.expect(tables[0] == tables[1], sweep + ": repeated sweep gave a different table");
  }
}

std::vector<json> read_jsonl(const fs::path& p) {
  std::vector<json> out;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

// Every number in `a` agrees with `b` to six decimals.
void compare_to_6dp(Check& c, const json& a, const json& b, const std::string& where) {
  if (a.is_number() && b.is_number()) {
    c.expect(std::round(a.get<double>() * 1e6) == std::round(b.get<double>() * 1e6), where + ": " + a.dump() + " vs " + b.dump());
  } else if (a.is_object() && b.is_object()) {
    c.expect(a.size() == b.size(), where + ": key sets differ");
    for (const auto& [k, v] : a.items()) {
      c.expect(b.contains(k), where + ": missing " + k);
      if (b.contains(k)) compare_to_6dp(c, v, b[k], where + "." + k);
    }
  } else if (a.is_array() && b.is_array()) {
    c.expect(a.size() == b.size(), where + ": lengths differ");
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) compare_to_6dp(c, a[i], b[i], where + "[" + std::to_string(i) + "]");
  } else {
    c.expect(a == b, where + ": " + a.dump() + " vs " + b.dump());
  }
}

void train_determinism(Check& c) {
  const std::string cfg = small_setup("determinism");
  const RunResult gen = run_cli("generate --n 6 --seed 12 --config " + cfg + " --out " + (scratch() / "det_data").string());
  c.expect(gen.code == 0, "generate failed");
  if (gen.code != 0) return;
  const std::string args = "train --data " + first_line(gen.out) + " --config " + cfg +
                           " --iters 12 --seed 12 --use-se --se-stages 1,2,3 --use-center --lambda-center 0.5 --out ";
  const RunResult a = run_cli(args + (scratch() / "det_a").string());
  const RunResult b = run_cli(args + (scratch() / "det_b").string());
  c.expect(a.code == 0 && b.code == 0, "train failed");
  if (a.code != 0 || b.code != 0) return;
  const auto ma = read_jsonl(fs::path(first_line(a.out)) / "metrics.jsonl");
  const auto mb = read_jsonl(fs::path(first_line(b.out)) / "metrics.jsonl");
  c.expect(!ma.empty() && ma.size() == mb.size(), "metric logs differ in length");
  for (std::size_t i = 0; i < std::min(ma.size(), mb.size()); ++i) compare_to_6dp(c, ma[i], mb[i], "metrics line " + std::to_string(i));
  const std::string la = slurp(fs::path(first_line(a.out)) / "train_log.csv");
  c.expect(!la.empty() && la == slurp(fs::path(first_line(b.out)) / "train_log.csv"), "train_log.csv differs");
  c.note(std::to_string(ma.size()) + " metric records compared");
}

}  // namespace
}  // namespace dadet

int main(int argc, char** argv) {
  using namespace dadet;
  const std::vector<std::pair<const char*, std::function<void(Check&)>>> criteria{
      {"loss formulas match brute-force references", loss_oracles},
      {"analytic gradients match finite differences", gradient_checks},
      {"gradient reversal is exact", grl_exactness},
      {"center loss is masked from detector parameters", center_masking},
      {"SE bank degeneracies", se_degeneracies},
      {"NMS and mAP references", nms_and_map},
      {"H-divergence probe endpoints", probe_endpoints},
      {"adaptation beats source-only on the fogged target", directional},
      {"ablation tables", ablation_tables},
      {"training determinism", train_determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Check c;
    try {
      criteria[i].second(c);
    } catch (const std::exception& e) {
      c.expect(false, std::string("exception: ") + e.what());
    }
    failed += !c.passed();
    std::cout << "CRITERION " << id << " " << (c.passed() ? "PASS" : "FAIL") << " " << criteria[i].first << " ("
              << c.summary() << ")" << std::endl;
  }
  return failed ? 1 : 0;
}
