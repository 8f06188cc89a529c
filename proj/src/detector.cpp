// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0

#include "dadet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dadet/se_bank.hpp"

namespace dadet {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

std::string block_prefix(int stage, int block) {
  return "backbone.s" + std::to_string(stage + 1) + ".b" + std::to_string(block);
}

bool needs_projection(const BackboneSpec& spec, int stage, int block) {
  if (block != 0) return false;
  const int in_w = stage == 0 ? spec.stem_width : spec.stages[static_cast<std::size_t>(stage - 1)].width;
  return spec.stages[static_cast<std::size_t>(stage)].stride != 1 || in_w != spec.stages[static_cast<std::size_t>(stage)].width;
}

template <typename T>
void add_conv(ParamStore<T>& p, const std::string& name, int out, int in, int k, double stddev,
              std::mt19937_64& rng) {
  p.add(name + ".w", normal_tensor<T>({out, in, k, k}, stddev, rng));
  p.add(name + ".b", Tensor<T>({out}));
}

template <typename T>
void add_fc(ParamStore<T>& p, const std::string& name, int out, int in, double stddev, std::mt19937_64& rng) {
  p.add(name + ".w", normal_tensor<T>({out, in}, stddev, rng));
  p.add(name + ".b", Tensor<T>({out}));
}

double he_std(int fan_in) { return std::sqrt(2.0 / fan_in); }

template <typename T>
Var conv(Graph<T>& g, const ParamStore<T>& p, const std::string& name, Var x, int stride, int pad) {
  return conv2d(g, x, p.var(g, name + ".w"), p.var(g, name + ".b"), stride, pad);
}

template <typename T>
Var fc(Graph<T>& g, const ParamStore<T>& p, const std::string& name, Var x) {
  return linear(g, x, p.var(g, name + ".w"), p.var(g, name + ".b"));
}

double smooth_l1(double x, double beta, double* grad) {
  const double a = std::abs(x);
  if (a < beta) {
    if (grad) *grad = x / beta;
    return 0.5 * x * x / beta;
  }
  if (grad) *grad = x > 0 ? 1.0 : -1.0;
  return a - 0.5 * beta;
}

constexpr double kRpnBeta = 1.0 / 9.0;
constexpr double kRoiBeta = 1.0;

}  // namespace

// ---------------------------------------------------------------------------
// Backbone description

int BackboneSpec::total_stride() const {
  int s = stem_stride;
  for (const auto& st : stages) s *= st.stride;
  return s;
}

bool BackboneSpec::has_bank(int stage, int block) const {
  if (stage < 0 || stage >= static_cast<int>(stages.size())) return false;
  const auto& flags = stages[static_cast<std::size_t>(stage)].se_blocks;
  return block >= 0 && block < static_cast<int>(flags.size()) && flags[static_cast<std::size_t>(block)];
}

std::set<int> BackboneSpec::placement() const {
  std::set<int> out;
  for (int s = 0; s < static_cast<int>(stages.size()); ++s)
    for (int b = 0; b < stages[static_cast<std::size_t>(s)].blocks; ++b)
      if (has_bank(s, b)) out.insert(s + 1);
  return out;
}

BackboneSpec default_backbone() {
  BackboneSpec spec;
  for (int w : {32, 64, 128}) spec.stages.push_back({w, 2, 2, std::vector<bool>(2, false)});
  return spec;
}

BackboneSpec inject_banks(BackboneSpec spec, const std::set<int>& placement) {
  for (int s : placement) {
    require(s >= 1 && s <= static_cast<int>(spec.stages.size()),
            "inject_banks: stage " + std::to_string(s) + " outside backbone range 1.." +
                std::to_string(spec.stages.size()));
  }
  for (int s = 0; s < static_cast<int>(spec.stages.size()); ++s) {
    auto& st = spec.stages[static_cast<std::size_t>(s)];
    st.se_blocks.assign(static_cast<std::size_t>(st.blocks), placement.count(s + 1) > 0);
  }
  return spec;
}

std::size_t backbone_param_count(const BackboneSpec& spec) {
  std::size_t n = static_cast<std::size_t>(spec.stem_width) * spec.in_channels * 9 + spec.stem_width;
  int in_w = spec.stem_width;
  for (int s = 0; s < static_cast<int>(spec.stages.size()); ++s) {
    const auto& st = spec.stages[static_cast<std::size_t>(s)];
    for (int b = 0; b < st.blocks; ++b) {
      const int cin = b == 0 ? in_w : st.width;
      n += static_cast<std::size_t>(st.width) * cin * 9 + st.width;
      n += static_cast<std::size_t>(st.width) * st.width * 9 + st.width;
      if (needs_projection(spec, s, b)) n += static_cast<std::size_t>(st.width) * cin + st.width;
      if (spec.has_bank(s, b)) {
        const std::size_t c = static_cast<std::size_t>(st.width), h = c / spec.se_reduction;
        n += spec.se_bank_size * (h * c + h + c * h + c) + spec.se_bank_size * c + spec.se_bank_size;
      }
    }
    in_w = st.width;
  }
  return n;
}

template <typename T>
void init_detector_params(ParamStore<T>& p, const DetectorConfig& cfg, std::mt19937_64& rng) {
  const BackboneSpec& bb = cfg.backbone;
  add_conv(p, "backbone.stem", bb.stem_width, bb.in_channels, 3, he_std(bb.in_channels * 9), rng);
  int in_w = bb.stem_width;
  for (int s = 0; s < static_cast<int>(bb.stages.size()); ++s) {
    const auto& st = bb.stages[static_cast<std::size_t>(s)];
    require(st.width % bb.se_reduction == 0 || st.se_blocks.empty() ||
                std::none_of(st.se_blocks.begin(), st.se_blocks.end(), [](bool b) { return b; }),
            "stage width must be divisible by the SE reduction");
    for (int b = 0; b < st.blocks; ++b) {
      const std::string pre = block_prefix(s, b);
      const int cin = b == 0 ? in_w : st.width;
      add_conv(p, pre + ".conv1", st.width, cin, 3, he_std(cin * 9), rng);
      add_conv(p, pre + ".conv2", st.width, st.width, 3, 0.5 * he_std(st.width * 9), rng);
      if (needs_projection(bb, s, b)) add_conv(p, pre + ".proj", st.width, cin, 1, he_std(cin), rng);
      if (bb.has_bank(s, b)) {
        SEBank<T> bank(bb.se_bank_size, st.width, bb.se_reduction);
        for (auto& a : bank.adaptors) {
          a.fc1_w = normal_tensor<T>(a.fc1_w.shape, he_std(st.width), rng);
          a.fc2_w = normal_tensor<T>(a.fc2_w.shape, he_std(a.hidden()), rng);
        }
        bank.attention_w = normal_tensor<T>(bank.attention_w.shape, 0.01, rng);
        register_bank(p, pre + ".se", bank);
      }
    }
    in_w = st.width;
  }
  const int c = bb.out_channels();
  const int A = cfg.anchors.per_location();
  add_conv(p, "rpn.conv", cfg.rpn_channels, c, 3, he_std(c * 9), rng);
  add_conv(p, "rpn.obj", A, cfg.rpn_channels, 1, 0.01, rng);
  add_conv(p, "rpn.delta", 4 * A, cfg.rpn_channels, 1, 0.01, rng);
  const int pooled = c * cfg.roi_pool * cfg.roi_pool;
  add_fc(p, "roi.fc6", cfg.fc_dim, pooled, he_std(pooled), rng);
  add_fc(p, "roi.fc7", cfg.fc_dim, cfg.fc_dim, he_std(cfg.fc_dim), rng);
  add_fc(p, "roi.cls", cfg.num_classes + 1, cfg.fc_dim, 0.01, rng);
  add_fc(p, "roi.box", 4, cfg.fc_dim, 0.001, rng);
}

// ---------------------------------------------------------------------------
// Backbone

template <typename T>
Var backbone_forward_node(Graph<T>& g, const ParamStore<T>& p, const BackboneSpec& spec, Var image,
                          std::vector<BankTrace>* banks) {
  const std::vector<int> shp = g.shape(image);
  require(shp.size() == 3 && shp[0] == spec.in_channels, "backbone: image must be [3,H,W]");
  const int stride = spec.total_stride();
  require(shp[1] % stride == 0 && shp[2] % stride == 0,
          "backbone: input " + std::to_string(shp[1]) + "x" + std::to_string(shp[2]) +
              " is not divisible by the total stride " + std::to_string(stride));
  Var x = relu(g, conv(g, p, "backbone.stem", image, spec.stem_stride, 1));
  for (int s = 0; s < static_cast<int>(spec.stages.size()); ++s) {
    const auto& st = spec.stages[static_cast<std::size_t>(s)];
    for (int b = 0; b < st.blocks; ++b) {
      const std::string pre = block_prefix(s, b);
      const int bs = b == 0 ? st.stride : 1;
      Var h = relu(g, conv(g, p, pre + ".conv1", x, bs, 1));
      h = conv(g, p, pre + ".conv2", h, 1, 1);
      if (spec.has_bank(s, b)) {
        BankNodes<T> bank = bank_forward_node(g, p, pre + ".se", h, spec.se_bank_size);
        h = bank.out;
        if (banks) banks->push_back({pre + ".se", bank.attention});
      }
      Var shortcut = needs_projection(spec, s, b) ? conv(g, p, pre + ".proj", x, bs, 0) : x;
      x = relu(g, add(g, h, shortcut));
    }
  }
  return x;
}

template <typename T>
Tensor<T> backbone_forward(const ParamStore<T>& params, const BackboneSpec& spec, const Tensor<T>& image) {
  Graph<T> g;
  return g.value(backbone_forward_node(g, params, spec, g.input(image)));
}

// ---------------------------------------------------------------------------
// RPN

template <typename T>
RpnNodes rpn_head_node(Graph<T>& g, const ParamStore<T>& p, const DetectorConfig& /*cfg*/, Var feat) {
  Var h = relu(g, conv(g, p, "rpn.conv", feat, 1, 1));
  RpnNodes out;
  out.objectness = conv(g, p, "rpn.obj", h, 1, 0);
  out.deltas = conv(g, p, "rpn.delta", h, 1, 0);
  out.feat_h = g.shape(feat)[1];
  out.feat_w = g.shape(feat)[2];
  return out;
}

template <typename T>
ProposalSet<T> propose(const Tensor<T>& objectness, const Tensor<T>& deltas, const std::vector<BoundingBox>& anchors,
                       double image_w, double image_h, int pre_nms, int post_nms, const DetectorConfig& cfg) {
  const int A = objectness.dim(0), Hf = objectness.dim(1), Wf = objectness.dim(2);
  const std::size_t plane = static_cast<std::size_t>(Hf) * Wf;
  require(anchors.size() == plane * A, "propose: anchor count does not match the objectness map");
  std::vector<double> scores(anchors.size());
  for (int y = 0; y < Hf; ++y)
    for (int x = 0; x < Wf; ++x)
      for (int a = 0; a < A; ++a)
        scores[(static_cast<std::size_t>(y) * Wf + x) * A + a] = objectness.at(a, y, x);
  std::vector<int> order(anchors.size());
  std::iota(order.begin(), order.end(), 0);
  const auto by_score = [&](int a, int b) { return scores[a] != scores[b] ? scores[a] > scores[b] : a < b; };
  const std::size_t keep_n = std::min(order.size(), static_cast<std::size_t>(std::max(pre_nms, 0)));
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep_n), order.end(), by_score);
  order.resize(keep_n);

  std::vector<BoundingBox> boxes;
  std::vector<double> sc;
  for (int idx : order) {
    const int a = idx % A;
    const int cell = idx / A;
    const int y = cell / Wf, x = cell % Wf;
    const BoxDeltas d{deltas.at(4 * a, y, x), deltas.at(4 * a + 1, y, x), deltas.at(4 * a + 2, y, x),
                      deltas.at(4 * a + 3, y, x)};
    BoundingBox b = clip_box(decode_box(d, anchors[static_cast<std::size_t>(idx)]), image_w, image_h);
    if (b.width() < cfg.min_box_size || b.height() < cfg.min_box_size) continue;
    b.score = 1.0 / (1.0 + std::exp(-scores[static_cast<std::size_t>(idx)]));
    boxes.push_back(b);
    sc.push_back(scores[static_cast<std::size_t>(idx)]);
  }
  ProposalSet<T> out;
  for (int k : nms(boxes, sc, cfg.rpn_nms)) {
    if (static_cast<int>(out.boxes.size()) >= post_nms) break;
    out.boxes.push_back(boxes[static_cast<std::size_t>(k)]);
    out.objectness.push_back(sc[static_cast<std::size_t>(k)]);
  }
  return out;
}

template <typename T>
ProposalSet<T> rpn_forward(const ParamStore<T>& params, const DetectorConfig& cfg, const Tensor<T>& features,
                           double image_w, double image_h) {
  Graph<T> g;
  const RpnNodes rpn = rpn_head_node(g, params, cfg, g.input(features));
  const double stride = image_w / rpn.feat_w;
  const auto anchors = generate_anchors(cfg.anchors, rpn.feat_h, rpn.feat_w, stride);
  return propose(g.value(rpn.objectness), g.value(rpn.deltas), anchors, image_w, image_h, cfg.rpn_pre_nms_test,
                 cfg.rpn_post_nms_test, cfg);
}

RpnTargets assign_rpn_targets(const std::vector<BoundingBox>& anchors, const std::vector<BoundingBox>& gt,
                              const DetectorConfig& cfg, std::mt19937_64& rng) {
  const std::size_t n = anchors.size();
  std::vector<int> label(n, -1);
  std::vector<int> match(n, -1);
  std::vector<double> best(n, 0.0);
  std::vector<double> gt_best(gt.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < gt.size(); ++j) {
      const double v = iou(anchors[i], gt[j]);
      if (v > best[i]) {
        best[i] = v;
        match[i] = static_cast<int>(j);
      }
      gt_best[j] = std::max(gt_best[j], v);
    }
    if (best[i] < cfg.rpn_neg_iou) label[i] = 0;
    if (best[i] >= cfg.rpn_pos_iou) label[i] = 1;
  }
  // Every ground-truth box keeps its best-overlapping anchors as positives.
  for (std::size_t j = 0; j < gt.size(); ++j) {
    if (gt_best[j] <= 0) continue;
    for (std::size_t i = 0; i < n; ++i) {
      if (iou(anchors[i], gt[j]) == gt_best[j]) {
        label[i] = 1;
        match[i] = static_cast<int>(j);
      }
    }
  }
  std::vector<int> pos, neg;
  for (std::size_t i = 0; i < n; ++i) {
    if (label[i] == 1) pos.push_back(static_cast<int>(i));
    if (label[i] == 0) neg.push_back(static_cast<int>(i));
  }
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  const int total = cfg.anchors.per_image_samples;
  const int max_pos = static_cast<int>(total * cfg.rpn_pos_fraction);
  pos.resize(std::min<std::size_t>(pos.size(), static_cast<std::size_t>(max_pos)));
  neg.resize(std::min<std::size_t>(neg.size(), static_cast<std::size_t>(total) - pos.size()));

  RpnTargets out;
  for (int i : pos) {
    out.indices.push_back(i);
    out.labels.push_back(1);
    out.targets.push_back(encode_box(gt[static_cast<std::size_t>(match[static_cast<std::size_t>(i)])],
                                     anchors[static_cast<std::size_t>(i)]));
  }
  for (int i : neg) {
    out.indices.push_back(i);
    out.labels.push_back(0);
    out.targets.push_back({0, 0, 0, 0});
  }
  return out;
}

RoiSample sample_rois(const std::vector<BoundingBox>& proposals, const std::vector<BoundingBox>& gt,
                      const DetectorConfig& cfg, std::mt19937_64& rng) {
  std::vector<BoundingBox> cand = proposals;
  cand.insert(cand.end(), gt.begin(), gt.end());
  std::vector<int> fg, bg;
  std::vector<int> match(cand.size(), -1);
  for (std::size_t i = 0; i < cand.size(); ++i) {
    double best = 0;
    for (std::size_t j = 0; j < gt.size(); ++j) {
      const double v = iou(cand[i], gt[j]);
      if (v > best) {
        best = v;
        match[i] = static_cast<int>(j);
      }
    }
    (best >= cfg.roi_fg_iou ? fg : bg).push_back(static_cast<int>(i));
  }
  std::shuffle(fg.begin(), fg.end(), rng);
  std::shuffle(bg.begin(), bg.end(), rng);
  const int max_fg = static_cast<int>(cfg.roi_samples * cfg.roi_fg_fraction);
  fg.resize(std::min<std::size_t>(fg.size(), static_cast<std::size_t>(max_fg)));
  bg.resize(std::min<std::size_t>(bg.size(), static_cast<std::size_t>(cfg.roi_samples) - fg.size()));
  RoiSample out;
  for (int i : fg) {
    BoundingBox b = cand[static_cast<std::size_t>(i)];
    const BoundingBox& m = gt[static_cast<std::size_t>(match[static_cast<std::size_t>(i)])];
    b.label = m.label;
    b.score.reset();
    out.boxes.push_back(b);
    out.labels.push_back(m.label);
    out.targets.push_back(encode_box(m, b, kRoiDeltaWeights));
  }
  for (int i : bg) {
    BoundingBox b = cand[static_cast<std::size_t>(i)];
    b.label = 0;
    b.score.reset();
    out.boxes.push_back(b);
    out.labels.push_back(0);
    out.targets.push_back({0, 0, 0, 0});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Box head

template <typename T>
RoiHeadNodes roi_head_node(Graph<T>& g, const ParamStore<T>& p, const DetectorConfig& cfg, Var feat,
                           const std::vector<BoundingBox>& rois) {
  std::vector<std::array<double, 4>> coords;
  coords.reserve(rois.size());
  for (const auto& b : rois) coords.push_back(b.coords());
  const double scale = 1.0 / cfg.backbone.total_stride();
  Var pooled = roi_align(g, feat, coords, cfg.roi_pool, scale, cfg.roi_sampling);
  RoiHeadNodes out;
  Var h = relu(g, fc(g, p, "roi.fc6", pooled));
  out.instance_features = relu(g, fc(g, p, "roi.fc7", h));
  out.class_logits = fc(g, p, "roi.cls", out.instance_features);
  out.box_deltas = fc(g, p, "roi.box", out.instance_features);
  return out;
}

template <typename T>
std::pair<Var, Var> rpn_loss_node(Graph<T>& g, const RpnNodes& rpn, const RpnTargets& t, int A) {
  const int Wf = rpn.feat_w;
  const std::size_t plane = static_cast<std::size_t>(rpn.feat_h) * Wf;
  const double count = std::max<std::size_t>(t.indices.size(), 1);
  auto obj_offset = [=](int idx) {
    const int a = idx % A, cell = idx / A;
    return static_cast<std::size_t>(a) * plane + static_cast<std::size_t>(cell);
  };
  auto delta_offset = [=](int idx, int k) {
    const int a = idx % A, cell = idx / A;
    return static_cast<std::size_t>(4 * a + k) * plane + static_cast<std::size_t>(cell);
  };
  const Tensor<T>& obj = g.value(rpn.objectness);
  const Tensor<T>& del = g.value(rpn.deltas);
  double cls = 0, box = 0;
  for (std::size_t s = 0; s < t.indices.size(); ++s) {
    const double z = obj.data[obj_offset(t.indices[s])];
    const double y = t.labels[s];
    cls += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    if (t.labels[s] == 1)
      for (int k = 0; k < 4; ++k)
        box += smooth_l1(del.data[delta_offset(t.indices[s], k)] - t.targets[s][static_cast<std::size_t>(k)],
                         kRpnBeta, nullptr);
  }
  const int cls_id = static_cast<int>(g.size());
  Var cls_var = g.push(Tensor<T>({1}, static_cast<T>(cls / count)), {rpn.objectness}, [=](Graph<T>& gr) {
    const double go = gr.grad(Var{cls_id}).data[0];
    const Tensor<T>& o = gr.value(rpn.objectness);
    Tensor<T>& gobj = gr.grad(rpn.objectness);
    for (std::size_t s = 0; s < t.indices.size(); ++s) {
      const std::size_t off = obj_offset(t.indices[s]);
      const double z = o.data[off];
      const double sig = 1.0 / (1.0 + std::exp(-z));
      gobj.data[off] += static_cast<T>(go * (sig - t.labels[s]) / count);
    }
  });
  const int box_id = static_cast<int>(g.size());
  Var box_var = g.push(Tensor<T>({1}, static_cast<T>(box / count)), {rpn.deltas}, [=](Graph<T>& gr) {
    const double go = gr.grad(Var{box_id}).data[0];
    const Tensor<T>& d = gr.value(rpn.deltas);
    Tensor<T>& gd = gr.grad(rpn.deltas);
    for (std::size_t s = 0; s < t.indices.size(); ++s) {
      if (t.labels[s] != 1) continue;
      for (int k = 0; k < 4; ++k) {
        const std::size_t off = delta_offset(t.indices[s], k);
        double dg = 0;
        smooth_l1(d.data[off] - t.targets[s][static_cast<std::size_t>(k)], kRpnBeta, &dg);
        gd.data[off] += static_cast<T>(go * dg / count);
      }
    }
  });
  return {cls_var, box_var};
}

template <typename T>
std::pair<Var, Var> roi_loss_node(Graph<T>& g, const RoiHeadNodes& head, const RoiSample& sample) {
  const Tensor<T>& logits = g.value(head.class_logits);
  const Tensor<T>& deltas = g.value(head.box_deltas);
  const int n = logits.dim(0), K1 = logits.dim(1);
  require(static_cast<int>(sample.labels.size()) == n, "roi_loss: label count does not match ROI count");
  const double count = std::max(n, 1);
  // Softmax probabilities are kept for the backward pass.
  std::vector<double> probs(static_cast<std::size_t>(n) * K1);
  double cls = 0, box = 0;
  for (int i = 0; i < n; ++i) {
    const T* row = logits.data.data() + static_cast<std::size_t>(i) * K1;
    const double mx = *std::max_element(row, row + K1);
    double z = 0;
    for (int c = 0; c < K1; ++c) z += std::exp(row[c] - mx);
    for (int c = 0; c < K1; ++c) probs[static_cast<std::size_t>(i) * K1 + c] = std::exp(row[c] - mx) / z;
    cls += -(row[sample.labels[static_cast<std::size_t>(i)]] - mx - std::log(z));
    if (sample.labels[static_cast<std::size_t>(i)] > 0)
      for (int k = 0; k < 4; ++k)
        box += smooth_l1(deltas.data[static_cast<std::size_t>(i) * 4 + k] -
                             sample.targets[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)],
                         kRoiBeta, nullptr);
  }
  const auto labels = sample.labels;
  const auto targets = sample.targets;
  const Var lv = head.class_logits, dv = head.box_deltas;
  const int cls_id = static_cast<int>(g.size());
  Var cls_var = g.push(Tensor<T>({1}, static_cast<T>(cls / count)), {lv}, [=](Graph<T>& gr) {
    const double go = gr.grad(Var{cls_id}).data[0];
    Tensor<T>& gl = gr.grad(lv);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < K1; ++c) {
        const double y = labels[static_cast<std::size_t>(i)] == c ? 1.0 : 0.0;
        gl.data[static_cast<std::size_t>(i) * K1 + c] +=
            static_cast<T>(go * (probs[static_cast<std::size_t>(i) * K1 + c] - y) / count);
      }
  });
  const int box_id = static_cast<int>(g.size());
  Var box_var = g.push(Tensor<T>({1}, static_cast<T>(box / count)), {dv}, [=](Graph<T>& gr) {
    const double go = gr.grad(Var{box_id}).data[0];
    const Tensor<T>& d = gr.value(dv);
    Tensor<T>& gd = gr.grad(dv);
    for (int i = 0; i < n; ++i) {
      if (labels[static_cast<std::size_t>(i)] <= 0) continue;
      for (int k = 0; k < 4; ++k) {
        double dg = 0;
        smooth_l1(d.data[static_cast<std::size_t>(i) * 4 + k] - targets[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)],
                  kRoiBeta, &dg);
        gd.data[static_cast<std::size_t>(i) * 4 + k] += static_cast<T>(go * dg / count);
      }
    }
  });
  return {cls_var, box_var};
}

std::vector<BoundingBox> postprocess_detections(const std::vector<BoundingBox>& rois,
                                                const std::vector<std::vector<double>>& class_probs,
                                                const std::vector<BoxDeltas>& deltas, double image_w,
                                                double image_h, const DetectorConfig& cfg) {
  std::vector<BoundingBox> cand;
  for (std::size_t i = 0; i < rois.size(); ++i) {
    for (int c = 1; c < static_cast<int>(class_probs[i].size()); ++c) {
      const double s = class_probs[i][static_cast<std::size_t>(c)];
      if (s < cfg.score_threshold) continue;
      BoundingBox b = clip_box(decode_box(deltas[i], rois[i], kRoiDeltaWeights), image_w, image_h);
      if (b.width() < cfg.min_box_size || b.height() < cfg.min_box_size) continue;
      b.label = c;
      b.score = s;
      cand.push_back(b);
    }
  }
  std::vector<BoundingBox> out;
  for (int k : nms_per_class(cand, cfg.nms_threshold)) {
    if (static_cast<int>(out.size()) >= cfg.max_detections) break;
    out.push_back(cand[static_cast<std::size_t>(k)]);
  }
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
ImageForward<T> forward_train_image(Graph<T>& g, const ParamStore<T>& p, const DetectorConfig& cfg,
                                    const Tensor<T>& image, const std::vector<BoundingBox>* gt,
                                    std::mt19937_64& rng) {
  ImageForward<T> out;
  const double W = image.dim(2), H = image.dim(1);
  out.features = backbone_forward_node(g, p, cfg.backbone, g.input(image), &out.banks);
  out.rpn = rpn_head_node(g, p, cfg, out.features);
  const double stride = cfg.backbone.total_stride();
  const auto anchors = generate_anchors(cfg.anchors, out.rpn.feat_h, out.rpn.feat_w, stride);
  out.proposals = propose(g.value(out.rpn.objectness), g.value(out.rpn.deltas), anchors, W, H,
                          cfg.rpn_pre_nms_train, cfg.rpn_post_nms_train, cfg);
  if (gt) {
    const RpnTargets rt = assign_rpn_targets(anchors, *gt, cfg, rng);
    const RoiSample rs = sample_rois(out.proposals.boxes, *gt, cfg, rng);
    out.rois = rs.boxes;
    out.head = roi_head_node(g, p, cfg, out.features, out.rois);
    DetectionLoss<T> loss;
    std::tie(loss.rpn_cls, loss.rpn_box) = rpn_loss_node(g, out.rpn, rt, cfg.anchors.per_location());
    std::tie(loss.roi_cls, loss.roi_box) = roi_loss_node(g, out.head, rs);
    loss.total = weighted_sum<T>(g, {loss.rpn_cls, loss.rpn_box, loss.roi_cls, loss.roi_box}, {1, 1, 1, 1});
    out.loss = loss;
  } else {
    const std::size_t n = std::min(out.proposals.boxes.size(), static_cast<std::size_t>(cfg.target_instances));
    out.rois.assign(out.proposals.boxes.begin(), out.proposals.boxes.begin() + static_cast<std::ptrdiff_t>(n));
    for (auto& b : out.rois) b.score.reset();
    out.head = roi_head_node(g, p, cfg, out.features, out.rois);
  }
  out.proposals.roi_features = g.value(out.head.instance_features);
  return out;
}

template <typename T>
std::vector<BoundingBox> detect(const ParamStore<T>& p, const DetectorConfig& cfg, const Tensor<T>& image) {
  Graph<T> g;
  const double W = image.dim(2), H = image.dim(1);
  Var feat = backbone_forward_node(g, p, cfg.backbone, g.input(image));
  const RpnNodes rpn = rpn_head_node(g, p, cfg, feat);
  const auto anchors = generate_anchors(cfg.anchors, rpn.feat_h, rpn.feat_w, cfg.backbone.total_stride());
  ProposalSet<T> props = propose(g.value(rpn.objectness), g.value(rpn.deltas), anchors, W, H, cfg.rpn_pre_nms_test,
                                 cfg.rpn_post_nms_test, cfg);
  if (props.boxes.empty()) return {};
  const RoiHeadNodes head = roi_head_node(g, p, cfg, feat, props.boxes);
  const Tensor<T>& logits = g.value(head.class_logits);
  const Tensor<T>& deltas = g.value(head.box_deltas);
  const int n = logits.dim(0), K1 = logits.dim(1);
  std::vector<std::vector<double>> probs(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(K1)));
  std::vector<BoxDeltas> dl(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const T* row = logits.data.data() + static_cast<std::size_t>(i) * K1;
    const double mx = *std::max_element(row, row + K1);
    double z = 0;
    for (int c = 0; c < K1; ++c) z += std::exp(row[c] - mx);
    for (int c = 0; c < K1; ++c) probs[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] = std::exp(row[c] - mx) / z;
    for (int k = 0; k < 4; ++k) dl[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] = deltas.data[static_cast<std::size_t>(i) * 4 + k];
  }
  return postprocess_detections(props.boxes, probs, dl, W, H, cfg);
}

#define DADET_INSTANTIATE_DETECTOR(T)                                                                            \
  template void init_detector_params<T>(ParamStore<T>&, const DetectorConfig&, std::mt19937_64&);                 \
  template Var backbone_forward_node<T>(Graph<T>&, const ParamStore<T>&, const BackboneSpec&, Var,                \
                                        std::vector<BankTrace>*);                                                  \
  template Tensor<T> backbone_forward<T>(const ParamStore<T>&, const BackboneSpec&, const Tensor<T>&);            \
  template RpnNodes rpn_head_node<T>(Graph<T>&, const ParamStore<T>&, const DetectorConfig&, Var);                 \
  template ProposalSet<T> propose<T>(const Tensor<T>&, const Tensor<T>&, const std::vector<BoundingBox>&, double, \
                                     double, int, int, const DetectorConfig&);                                     \
  template ProposalSet<T> rpn_forward<T>(const ParamStore<T>&, const DetectorConfig&, const Tensor<T>&, double,   \
                                         double);                                                                  \
  template RoiHeadNodes roi_head_node<T>(Graph<T>&, const ParamStore<T>&, const DetectorConfig&, Var,             \
                                         const std::vector<BoundingBox>&);                                         \
  template std::pair<Var, Var> rpn_loss_node<T>(Graph<T>&, const RpnNodes&, const RpnTargets&, int);              \
  template std::pair<Var, Var> roi_loss_node<T>(Graph<T>&, const RoiHeadNodes&, const RoiSample&);                \
  template ImageForward<T> forward_train_image<T>(Graph<T>&, const ParamStore<T>&, const DetectorConfig&,          \
                                                  const Tensor<T>&, const std::vector<BoundingBox>*,               \
                                                  std::mt19937_64&);                                               \
  template std::vector<BoundingBox> detect<T>(const ParamStore<T>&, const DetectorConfig&, const Tensor<T>&);

DADET_INSTANTIATE_DETECTOR(float)
DADET_INSTANTIATE_DETECTOR(double)

}  // namespace dadet
