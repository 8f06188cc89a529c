// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0

#include "dadet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dadet/checkpoint.hpp"
#include "dadet/config.hpp"
#include "dadet/grl.hpp"
#include "json.hpp"

namespace dadet {

namespace {

namespace fs = std::filesystem;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return mix(mix(a) ^ (b + 0x632be59bd9b4e019ULL)); }

std::string csv_row(const IterLog& r) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(8) << r.iter << "," << r.lr << "," << r.losses.detection_loss << ","
      << r.losses.image_ce << "," << r.losses.instance_ce << "," << r.losses.consistency << ","
      << r.losses.image_center << "," << r.losses.instance_center << "," << r.losses.l1() << "," << r.losses.l2();
  return out.str();
}

constexpr const char* kCsvHeader =
    "iter,lr,detection,image_ce,instance_ce,consistency,image_center,instance_center,l1,l2";

}  // namespace

void TrainConfig::validate() const {
  require(lr_initial > 0 && lr_decayed > 0, "train: learning rates must be positive");
  require(momentum >= 0 && momentum < 1, "train: momentum must lie in [0, 1)");
  require(batch_size >= 2 && batch_size % 2 == 0, "train: batch_size must be even and >= 2");
  require(total_iters > 0, "train: total_iters must be positive");
  require(decay_at_iter >= 0, "train: decay_at_iter must be >= 0");
  require(lambda_ce >= 0 && lambda_center >= 0 && lambda_grl >= 0, "train: loss weights must be >= 0");
  require(eval_interval > 0 && checkpoint_interval > 0, "train: intervals must be positive");
  require(probe_samples == 0 || probe_samples >= 20, "train: probe_samples must be 0 or >= 20");
}

TrainConfig desk_train_config() {
  TrainConfig cfg;
  cfg.lr_initial = 0.01;
  cfg.lr_decayed = 0.001;
  cfg.total_iters = 2000;
  cfg.decay_at_iter = 1500;
  cfg.eval_interval = 250;
  cfg.checkpoint_interval = 500;
  return cfg;
}

double lr_schedule(int iter, const TrainConfig& cfg) {
  require(iter >= 0 && iter < cfg.total_iters,
          "lr_schedule: iteration " + std::to_string(iter) + " outside [0, " + std::to_string(cfg.total_iters) + ")");
  return iter < cfg.decay_at_iter ? cfg.lr_initial : cfg.lr_decayed;
}

OptimizerPartition OptimizerPartition::of(const ParamStore<float>& params) {
  OptimizerPartition p;
  for (const auto& [name, value] : params.all()) {
    p.main_params.push_back(name);
    if (in_center_partition(name)) p.center_params.push_back(name);
  }
  return p;
}

std::map<std::string, Tensor<float>> MomentumBuffers::step(const std::vector<std::string>& names,
                                                           const std::map<std::string, Tensor<float>>& grads,
                                                           double lr, double momentum) {
  std::map<std::string, Tensor<float>> deltas;
  const float mu = static_cast<float>(momentum);
  const float eta = static_cast<float>(lr);
  for (const auto& name : names) {
    const Tensor<float>& g = grads.at(name);
    auto [it, fresh] = velocity.try_emplace(name, Tensor<float>(g.shape));
    Tensor<float>& v = it->second;
    require(v.shape == g.shape, "optimizer: velocity shape mismatch for " + name);
    Tensor<float> d(g.shape);
    for (std::size_t i = 0; i < g.size(); ++i) {
      v.data[i] = mu * v.data[i] + g.data[i];
      d.data[i] = -eta * v.data[i];
    }
    deltas.emplace(name, std::move(d));
  }
  return deltas;
}

TrainState init_train_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  s.config = cfg;
  std::mt19937_64 rng(mix(cfg.seed, 0xC0FFEE));
  init_detector_params(s.params, cfg.detector, rng);
  init_domain_head_params(s.params, cfg.detector.backbone.out_channels(), cfg.detector.fc_dim, cfg.heads, rng);
  return s;
}

StepReport train_step(TrainState& state, const Batch& batch, int iter, bool keep_gradients) {
  const TrainConfig& cfg = state.config;
  require(!batch.source.empty() && !batch.target.empty(),
          "train_step: batch must contain both source and target samples");
  for (const ImageSample* s : batch.source) {
    require(s && s->boxes.has_value(), "train_step: source samples must carry annotations");
  }
  for (const ImageSample* s : batch.target) require(s != nullptr, "train_step: null target sample");

  StepReport report;
  report.lr = lr_schedule(iter, cfg);
  std::mt19937_64 rng(mix(cfg.seed, static_cast<std::uint64_t>(iter) + 1));
  const bool adapt = cfg.adaptation_enabled();
  const GradientReversal grl{cfg.lambda_grl};

  Graph<float> g;
  std::vector<Var> det_terms;
  std::vector<Var> img_probs, inst_probs, img_centers, inst_hidden;
  std::vector<DomainTag> tags, inst_tags;

  auto run = [&](const ImageSample& s, DomainTag tag) {
    const std::vector<BoundingBox>* gt = tag == DomainTag::kSource ? &*s.boxes : nullptr;
    if (!gt && !adapt) return;
    ImageForward<float> f = forward_train_image(g, state.params, cfg.detector, s.image, gt, rng);
    if (f.loss) det_terms.push_back(f.loss->total);
    if (!adapt) return;
    const ImageHeadNodes ih = image_domain_forward_node(g, state.params, f.features, grl);
    const InstanceHeadNodes in = instance_domain_forward_node(g, state.params, f.head.instance_features, grl);
    img_probs.push_back(ih.probs);
    img_centers.push_back(ih.center_feat);
    inst_probs.push_back(in.probs);
    tags.push_back(tag);
    const int n = g.shape(in.hidden)[0];
    if (n > 0) inst_hidden.push_back(in.hidden);
    inst_tags.insert(inst_tags.end(), static_cast<std::size_t>(n), tag);
  };
  for (const ImageSample* s : batch.source) run(*s, DomainTag::kSource);
  for (const ImageSample* s : batch.target) run(*s, DomainTag::kTarget);

  const Var det = weighted_sum<float>(g, det_terms, std::vector<float>(det_terms.size(), 1.0f / det_terms.size()));
  LossParts parts;
  parts.detection = g.scalar(det);
  Var l1 = det;
  Var l2{};
  if (adapt) {
    const Var img_ce = domain_ce_image_node(g, img_probs, tags);
    const Var inst_ce = domain_ce_instance_node(g, inst_probs, tags);
    const Var cst = consistency_loss_node(g, img_probs, inst_probs);
    parts.image_ce = g.scalar(img_ce);
    parts.instance_ce = g.scalar(inst_ce);
    parts.consistency = g.scalar(cst);

    const Var img_c = center_loss_node(g, stack(g, img_centers), tags, state.params.var(g, "centers.img.source"),
                                       state.params.var(g, "centers.img.target"));
    const float img_norm = 1.0f / static_cast<float>(tags.size());
    parts.image_center = g.scalar(img_c) * img_norm;
    std::vector<Var> l2_terms{img_c};
    std::vector<float> l2_weights{static_cast<float>(cfg.lambda_center) * img_norm};
    if (!inst_tags.empty()) {
      const Var inst_c = center_loss_node(g, concat_rows(g, inst_hidden), inst_tags,
                                          state.params.var(g, "centers.inst.source"),
                                          state.params.var(g, "centers.inst.target"));
      const float inst_norm = 1.0f / static_cast<float>(inst_tags.size());
      parts.instance_center = g.scalar(inst_c) * inst_norm;
      l2_terms.push_back(inst_c);
      l2_weights.push_back(static_cast<float>(cfg.lambda_center) * inst_norm);
    }
    if (cfg.lambda_ce > 0) {
      const float w = static_cast<float>(cfg.lambda_ce);
      l1 = weighted_sum<float>(g, {det, img_ce, inst_ce, cst}, {1.0f, w, w, w});
    }
    if (cfg.lambda_center > 0) l2 = weighted_sum<float>(g, l2_terms, l2_weights);
  }
  report.losses = compose_losses(parts, cfg.lambda_ce, cfg.lambda_center);

  // Both gradients are read off the same forward graph before any weight changes.
  g.backward(l1);
  std::map<std::string, Tensor<float>> grad_l1 = g.param_grads();
  std::map<std::string, Tensor<float>> grad_l2;
  if (l2.valid()) {
    g.backward(l2);
    grad_l2 = g.param_grads();
  }
  const OptimizerPartition part = OptimizerPartition::of(state.params);
  for (const auto& name : part.main_params) {
    if (!grad_l1.count(name)) grad_l1.emplace(name, Tensor<float>(state.params.at(name).shape));
  }
  std::map<std::string, Tensor<float>> center_grads;
  for (const auto& name : part.center_params) {
    auto it = grad_l2.find(name);
    center_grads.emplace(name, it != grad_l2.end() ? it->second : Tensor<float>(state.params.at(name).shape));
  }

  std::map<std::string, Tensor<float>> main_delta = state.main_opt.step(part.main_params, grad_l1, report.lr,
                                                                        cfg.momentum);
  std::map<std::string, Tensor<float>> center_delta;
  if (l2.valid()) center_delta = state.center_opt.step(part.center_params, center_grads, report.lr, cfg.momentum);

  for (auto& [name, d] : main_delta) {
    Tensor<float>& p = state.params.at(name);
    auto c = center_delta.find(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      p.data[i] += d.data[i];
      if (c != center_delta.end()) p.data[i] += c->second.data[i];
    }
    if (keep_gradients && c != center_delta.end()) {
      for (std::size_t i = 0; i < d.size(); ++i) d.data[i] += c->second.data[i];
    }
  }
  if (keep_gradients) {
    report.grad_l1 = std::move(grad_l1);
    report.grad_l2 = std::move(center_grads);
    report.delta = std::move(main_delta);
  }
  ++state.completed_iters;
  return report;
}

std::vector<BoundingBox> detect_image(const ParamStore<float>& params, const DetectorConfig& cfg,
                                      const ImageSample& sample) {
  return detect(params, cfg, sample.image);
}

// ---------------------------------------------------------------------------

std::string EvalRecord::to_json() const {
  nlohmann::ordered_json j;
  j["iter"] = iter;
  j["detection_loss"] = losses.detection_loss;
  j["image_ce"] = losses.image_ce;
  j["instance_ce"] = losses.instance_ce;
  j["consistency"] = losses.consistency;
  j["image_center"] = losses.image_center;
  j["instance_center"] = losses.instance_center;
  j["lambda_ce"] = losses.lambda_ce;
  j["lambda_center"] = losses.lambda_center;
  j["l1"] = losses.l1();
  j["l2"] = losses.l2();
  j["map_coco"] = result.map_coco;
  j["map_50"] = result.map_50;
  j["per_class_ap"] = result.per_class_ap;
  j["per_class_ap50"] = result.per_class_ap50;
  j["detections"] = result.detections;
  if (h_divergence) {
    j["h_divergence"] = *h_divergence;
  } else {
    j["h_divergence"] = nullptr;
  }
  return j.dump();
}

std::size_t sample_index(std::uint64_t seed, std::uint64_t stream, int iter, int pair, int pairs, std::size_t n) {
  require(n > 0, "sample_index: empty dataset");
  const std::uint64_t k = static_cast<std::uint64_t>(iter) * static_cast<std::uint64_t>(pairs) +
                          static_cast<std::uint64_t>(pair);
  const std::uint64_t epoch = k / n;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(mix(mix(seed, stream), epoch));
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm[static_cast<std::size_t>(k % n)];
}

std::vector<std::vector<double>> pooled_features(const ParamStore<float>& params, const DetectorConfig& cfg,
                                                 const Dataset& dataset, int limit) {
  std::vector<std::vector<double>> out;
  const std::size_t n = std::min(dataset.size(), static_cast<std::size_t>(std::max(limit, 0)));
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor<float> f = backbone_forward(params, cfg.backbone, dataset.samples[i].image);
    const int C = f.dim(0);
    const std::size_t hw = f.size() / static_cast<std::size_t>(C);
    std::vector<double> row(static_cast<std::size_t>(C), 0.0);
    for (int c = 0; c < C; ++c) {
      double s = 0;
      for (std::size_t j = 0; j < hw; ++j) s += f.data[static_cast<std::size_t>(c) * hw + j];
      row[static_cast<std::size_t>(c)] = s / static_cast<double>(hw);
    }
    out.push_back(std::move(row));
  }
  return out;
}

double probe_h_divergence(const std::vector<std::vector<double>>& source,
                          const std::vector<std::vector<double>>& target, const ProbeOptions& opts) {
  require(source.size() >= 20 && target.size() >= 20, "probe: need at least 20 feature vectors per domain");
  const std::size_t d = source.front().size();
  require(d > 0, "probe: empty feature vectors");
  for (const auto* set : {&source, &target}) {
    for (const auto& v : *set) require(v.size() == d, "probe: inconsistent feature dimensions");
  }

  // Fixed-seed 70/30 split within each domain. Both domains use the same seed, so
  // identical feature sets give identical splits and a probe that cannot learn.
  auto split = [&](std::size_t n) {
    std::mt19937_64 rng(opts.seed);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t cut = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(opts.train_fraction * n)), 1, n - 1);
    return std::pair{std::vector<std::size_t>(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cut)),
                     std::vector<std::size_t>(idx.begin() + static_cast<std::ptrdiff_t>(cut), idx.end())};
  };
  const auto [src_train, src_test] = split(source.size());
  const auto [tgt_train, tgt_test] = split(target.size());

  std::vector<const std::vector<double>*> xs;
  std::vector<double> ys;
  for (std::size_t i : src_train) {
    xs.push_back(&source[i]);
    ys.push_back(0.0);
  }
  for (std::size_t i : tgt_train) {
    xs.push_back(&target[i]);
    ys.push_back(1.0);
  }

  // Standardize with training statistics.
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (const auto* x : xs) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += (*x)[j];
  }
  for (auto& m : mean) m /= static_cast<double>(xs.size());
  for (const auto* x : xs) {
    for (std::size_t j = 0; j < d; ++j) sd[j] += ((*x)[j] - mean[j]) * ((*x)[j] - mean[j]);
  }
  for (auto& s : sd) s = std::sqrt(s / static_cast<double>(xs.size())) + 1e-12;
  auto standard = [&](const std::vector<double>& x) {
    std::vector<double> z(d);
    for (std::size_t j = 0; j < d; ++j) z[j] = (x[j] - mean[j]) / sd[j];
    return z;
  };
  std::vector<std::vector<double>> zs;
  for (const auto* x : xs) zs.push_back(standard(*x));

  std::vector<double> w(d, 0.0);
  double b = 0.0;
  const double n = static_cast<double>(zs.size());
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::vector<double> gw(d, 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < zs.size(); ++i) {
      double s = b;
      for (std::size_t j = 0; j < d; ++j) s += w[j] * zs[i][j];
      const double err = 1.0 / (1.0 + std::exp(-s)) - ys[i];
      for (std::size_t j = 0; j < d; ++j) gw[j] += err * zs[i][j];
      gb += err;
    }
    for (std::size_t j = 0; j < d; ++j) w[j] -= opts.learning_rate * gw[j] / n;
    b -= opts.learning_rate * gb / n;
  }
  auto predicts_target = [&](const std::vector<double>& x) {
    const std::vector<double> z = standard(x);
    double s = b;
    for (std::size_t j = 0; j < d; ++j) s += w[j] * z[j];
    return s > 0;
  };
  double wrong_s = 0, wrong_t = 0;
  for (std::size_t i : src_test) wrong_s += predicts_target(source[i]) ? 1 : 0;
  for (std::size_t i : tgt_test) wrong_t += predicts_target(target[i]) ? 0 : 1;
  double err_s = wrong_s / static_cast<double>(src_test.size());
  double err_t = wrong_t / static_cast<double>(tgt_test.size());
  // The hypothesis class is closed under complement; a worse-than-chance probe flips.
  if (err_s + err_t > 1.0) {
    err_s = 1.0 - err_s;
    err_t = 1.0 - err_t;
  }
  return h_divergence(err_s, err_t);
}

// ---------------------------------------------------------------------------

TrainingLog fit(const TrainConfig& cfg, const Dataset& source, const Dataset& target, const Dataset* target_eval,
                const FitOptions& opts) {
  cfg.validate();
  require(!source.empty() && !target.empty(), "fit: source and target datasets must be non-empty");
  for (const auto& s : source.samples) require(s.boxes.has_value(), "fit: source samples must carry annotations");

  TrainState state = init_train_state(cfg);
  if (opts.resume_from) {
    const Checkpoint ck = load_checkpoint(*opts.resume_from);
    restore_train_state(state, ck);
  }

  const bool to_disk = !opts.out_dir.empty();
  std::ofstream csv, jsonl;
  if (to_disk) {
    fs::create_directories(opts.out_dir);
    const bool append = opts.resume_from.has_value();
    const auto mode = append ? std::ios::app : std::ios::trunc;
    csv.open(opts.out_dir / "train_log.csv", std::ios::out | mode);
    jsonl.open(opts.out_dir / "metrics.jsonl", std::ios::out | mode);
    if (!csv || !jsonl) throw std::runtime_error("fit: cannot write logs under " + opts.out_dir.string());
    if (!append) csv << kCsvHeader << "\n";
    if (opts.write_checkpoints) fs::create_directories(opts.out_dir / "checkpoints");
  }

  auto save = [&](const std::string& name) {
    if (!to_disk || !opts.write_checkpoints) return;
    save_checkpoint(opts.out_dir / "checkpoints" / name, make_checkpoint(state));
  };

  TrainingLog log;
  const int pairs = cfg.pairs();
  while (state.completed_iters < cfg.total_iters) {
    if (opts.stop_after >= 0 && state.completed_iters >= opts.stop_after) break;
    const int iter = state.completed_iters;
    Batch batch;
    for (int p = 0; p < pairs; ++p) {
      batch.source.push_back(&source.samples[sample_index(cfg.seed, 1, iter, p, pairs, source.size())]);
      batch.target.push_back(&target.samples[sample_index(cfg.seed, 2, iter, p, pairs, target.size())]);
    }
    const StepReport rep = train_step(state, batch, iter);
    IterLog row{iter, rep.lr, rep.losses};
    log.iters.push_back(row);
    if (csv.is_open()) csv << csv_row(row) << "\n" << std::flush;
    if (opts.on_iter) opts.on_iter(row);

    const int done = state.completed_iters;
    const bool last = done == cfg.total_iters;
    if (target_eval && (done % cfg.eval_interval == 0 || last)) {
      EvalRecord rec;
      rec.iter = iter;
      rec.losses = rep.losses;
      rec.result = evaluate(
          [&](const ImageSample& s) { return detect_image(state.params, cfg.detector, s); }, *target_eval);
      if (cfg.probe_samples > 0 && static_cast<int>(source.size()) >= 20 && static_cast<int>(target.size()) >= 20) {
        rec.h_divergence = probe_h_divergence(pooled_features(state.params, cfg.detector, source, cfg.probe_samples),
                                              pooled_features(state.params, cfg.detector, target, cfg.probe_samples));
      }
      log.evals.push_back(rec);
      if (jsonl.is_open()) jsonl << rec.to_json() << "\n" << std::flush;
      if (opts.on_eval) opts.on_eval(rec);
    }
    if (done % cfg.checkpoint_interval == 0 || last) {
      save("iter_" + std::to_string(done) + ".ckpt");
      save("last.ckpt");
    }
  }
  return log;
}

}  // namespace dadet
