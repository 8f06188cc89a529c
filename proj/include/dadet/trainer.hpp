// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dual-optimizer adaptation training. One forward graph per step yields
//   L1 = L_det + lambda_ce (L_img + L_ins + L_cst)    main optimizer, every parameter
//   L2 = lambda_center (C_img + C_ins)                  center optimizer, domain heads + centers
// Both gradients are taken at the pre-step weights before either update is applied.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dadet/adaptation_losses.hpp"
#include "dadet/datasets.hpp"
#include "dadet/detector.hpp"
#include "dadet/domain_heads.hpp"
#include "dadet/evaluation.hpp"
#include "dadet/params.hpp"

namespace dadet {

struct TrainConfig {
  double lr_initial = 0.001;
  double lr_decayed = 0.0001;
  int decay_at_iter = 50000;
  int total_iters = 70000;
  double momentum = 0.9;
  int batch_size = 2;  // source/target pairs of 2
  double lambda_ce = 0.1;
  double lambda_center = 0.0;
  double lambda_grl = 1.0;
  int eval_interval = 5000;
  int checkpoint_interval = 5000;
  int probe_samples = 40;  // per domain, for the H-divergence diagnostic (0 disables)
  std::uint64_t seed = 1;
  DetectorConfig detector;
  DomainHeadConfig heads;

  void validate() const;
  int pairs() const { return batch_size / 2; }
  bool adaptation_enabled() const { return lambda_ce > 0 || lambda_center > 0; }
};

// 2000 iterations at a 10x higher rate, decay at 1500, evaluation every 250.
TrainConfig desk_train_config();

// lr_initial before decay_at_iter, lr_decayed from it on. Throws outside [0, total_iters).
double lr_schedule(int iter, const TrainConfig& cfg);

struct OptimizerPartition {
  std::vector<std::string> main_params;    // every trainable parameter
  std::vector<std::string> center_params;  // domain-head weights and centers

  static OptimizerPartition of(const ParamStore<float>& params);
};

// SGD with momentum: v <- mu v + g, theta <- theta - lr v.
struct MomentumBuffers {
  std::map<std::string, Tensor<float>> velocity;

  // Updates velocities for the named parameters and returns the resulting step -lr v.
  std::map<std::string, Tensor<float>> step(const std::vector<std::string>& names,
                                            const std::map<std::string, Tensor<float>>& grads, double lr,
                                            double momentum);
};

struct TrainState {
  TrainConfig config;
  ParamStore<float> params;
  MomentumBuffers main_opt;
  MomentumBuffers center_opt;
  int completed_iters = 0;
};

// Fresh detector + domain-head parameters drawn from cfg.seed.
TrainState init_train_state(const TrainConfig& cfg);

struct Batch {
  std::vector<const ImageSample*> source;
  std::vector<const ImageSample*> target;
};

struct StepReport {
  LossBundle losses;
  double lr = 0;
  std::map<std::string, Tensor<float>> grad_l1;  // d L1 / d theta at the pre-step weights
  std::map<std::string, Tensor<float>> grad_l2;  // d L2 / d theta, center partition only
  std::map<std::string, Tensor<float>> delta;    // applied parameter change
};

// One synchronized dual-optimizer step. `iter` selects the learning rate and the
// sampling stream. Throws std::invalid_argument unless the batch has labeled source
// and unlabeled-or-labeled target samples.
StepReport train_step(TrainState& state, const Batch& batch, int iter, bool keep_gradients = false);

std::vector<BoundingBox> detect_image(const ParamStore<float>& params, const DetectorConfig& cfg,
                                      const ImageSample& sample);

// ---------------------------------------------------------------------------

struct IterLog {
  int iter = 0;
  double lr = 0;
  LossBundle losses;
};

struct EvalRecord {
  int iter = 0;
  LossBundle losses;  // of the step that completed at `iter`
  EvalResult result;
  std::optional<double> h_divergence;

  std::string to_json() const;
};

struct TrainingLog {
  std::vector<IterLog> iters;
  std::vector<EvalRecord> evals;
};

struct FitOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  bool write_checkpoints = true;
  std::optional<std::filesystem::path> resume_from;
  int stop_after = -1;  // stop once this many iterations are complete (testing resume)
  std::function<void(const IterLog&)> on_iter;
  std::function<void(const EvalRecord&)> on_eval;
};

// Trains for cfg.total_iters. Writes train_log.csv, metrics.jsonl and checkpoints under
// out_dir. `target_eval` may be null, which disables evaluation records.
TrainingLog fit(const TrainConfig& cfg, const Dataset& source, const Dataset& target, const Dataset* target_eval,
                const FitOptions& opts = {});

// Index of the source or target sample consumed by pair `pair` of iteration `iter`.
std::size_t sample_index(std::uint64_t seed, std::uint64_t stream, int iter, int pair, int pairs, std::size_t n);

// Pooled backbone features (global average of the final stage), one row per sample.
std::vector<std::vector<double>> pooled_features(const ParamStore<float>& params, const DetectorConfig& cfg,
                                                 const Dataset& dataset, int limit);

struct ProbeOptions {
  int epochs = 200;
  double learning_rate = 0.5;
  double train_fraction = 0.7;
  std::uint64_t seed = 17;
};

// Logistic probe between the two feature sets; returns h_divergence(err_S, err_T)
// measured on the held-out split. Needs >= 20 vectors per domain.
double probe_h_divergence(const std::vector<std::vector<double>>& source,
                          const std::vector<std::vector<double>>& target, const ProbeOptions& opts = {});

}  // namespace dadet
