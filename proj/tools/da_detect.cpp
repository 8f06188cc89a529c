// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0
//
// da_detect: generate synthetic clean/foggy data, train and evaluate adaptive
// detectors, and run the SE-placement and center-weight ablations.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "dadet/checkpoint.hpp"
#include "dadet/config.hpp"
#include "dadet/datasets.hpp"
#include "dadet/evaluation.hpp"
#include "dadet/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace dadet;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
};

struct TrainFlags {
  std::string data;
  bool use_se = false;
  std::string se_stages;
  bool use_center = false;
  std::optional<double> lambda_center;
  std::optional<double> lambda_ce;
  std::optional<int> iters;
};

fs::path output_root(const Common& c) {
  if (!c.out.empty()) return c.out;
  if (const char* env = std::getenv("DA_DETECT_OUT"); env && *env) return env;
  return "runs";
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  const auto us = std::chrono::duration_cast<std::chrono::microseconds>(now.time_since_epoch()).count() % 1000000;
  std::ostringstream out;
  out << std::put_time(&tm, "%Y%m%d-%H%M%S") << "-" << std::setw(6) << std::setfill('0') << us;
  return out.str();
}

// <root>/<command>-<timestamp>-<hash>, with the resolved config persisted inside.
fs::path make_run_dir(const Common& c, const std::string& command, const KeyValues& resolved) {
  const fs::path dir = output_root(c) / (command + "-" + timestamp() + "-" + config_hash(resolved));
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create run directory " + dir.string() + ": " + ec.message());
  std::ofstream cfg(dir / "config.txt");
  if (!cfg) throw std::runtime_error("cannot write " + (dir / "config.txt").string());
  cfg << format_key_values(resolved);
  return dir;
}

RunConfig base_config(const Common& c) {
  RunConfig rc;
  if (!c.config_path.empty()) apply_key_values(rc, read_config_file(c.config_path));
  if (c.seed) {
    rc.train.seed = *c.seed;
    rc.data.seed = *c.seed;
  }
  return rc;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// Applies train flags on top of the file config. Flag combinations that cannot
// describe one of the four model variants raise UsageError.
void apply_train_flags(RunConfig& rc, const TrainFlags& f) {
  if (!f.se_stages.empty() && !f.use_se) throw UsageError("--se-stages requires --use-se");
  if (f.lambda_center && *f.lambda_center > 0 && !f.use_center) {
    throw UsageError("--lambda-center > 0 requires --use-center");
  }
  if (f.use_center && f.lambda_center && *f.lambda_center <= 0) {
    throw UsageError("--use-center needs a positive --lambda-center");
  }
  if (f.use_se) {
    const std::set<int> stages = parse_stages(f.se_stages.empty() ? "3" : f.se_stages);
    if (stages.empty()) throw UsageError("--use-se needs at least one stage in --se-stages");
    rc.train.detector.backbone = inject_banks(rc.train.detector.backbone, stages);
  }
  if (f.use_center) rc.train.lambda_center = f.lambda_center.value_or(1.0);
  if (f.lambda_center && !f.use_center) rc.train.lambda_center = *f.lambda_center;
  if (f.lambda_ce) rc.train.lambda_ce = *f.lambda_ce;
  if (f.iters) {
    if (*f.iters <= 0) throw UsageError("--iters must be positive");
    // Keep the schedule shape: decay at three quarters, eight evaluations.
    rc.train.total_iters = *f.iters;
    rc.train.decay_at_iter = *f.iters * 3 / 4;
    rc.train.eval_interval = std::max(1, *f.iters / 8);
    rc.train.checkpoint_interval = std::max(1, *f.iters / 4);
  }
  if (!f.data.empty()) rc.data_dir = f.data;
  rc.train.validate();
}

struct Splits {
  Dataset source, target, eval;
};

Splits load_splits(const RunConfig& rc) {
  Splits s;
  if (rc.data_dir.empty()) {
    std::cerr << "no --data given; generating the synthetic splits in memory\n";
    SyntheticSplits syn = generate_synthetic(rc.data);
    s.source = std::move(syn.source_train);
    s.target = std::move(syn.target_train);
    s.eval = std::move(syn.target_eval);
    return s;
  }
  const fs::path root = rc.data_dir;
  for (const char* split : {"source_train", "target_train", "target_eval"}) {
    if (!fs::exists(root / split / "annotations.json")) {
      throw std::runtime_error("dataset split " + (root / split).string() + " not found (run `da_detect generate`)");
    }
  }
  s.source = load_coco_detection(root / "source_train" / "annotations.json", root / "source_train" / "images",
                                 {DomainTag::kSource, false});
  s.target = load_coco_detection(root / "target_train" / "annotations.json", root / "target_train" / "images",
                                 {DomainTag::kTarget, true});
  s.eval = load_coco_detection(root / "target_eval" / "annotations.json", root / "target_eval" / "images",
                               {DomainTag::kTarget, false});
  return s;
}

EvalResult train_into(const RunConfig& rc, const Splits& data, const fs::path& dir, bool quiet) {
  FitOptions opts;
  opts.out_dir = dir;
  opts.on_iter = [&](const IterLog& r) {
    if (!quiet && (r.iter + 1) % 50 == 0) {
      std::cerr << "iter " << r.iter + 1 << "/" << rc.train.total_iters << " lr " << r.lr << " det "
                << r.losses.detection_loss << " l1 " << r.losses.l1() << " l2 " << r.losses.l2() << "\n";
    }
  };
  opts.on_eval = [&](const EvalRecord& e) {
    if (!quiet) std::cerr << "eval @" << e.iter + 1 << ": mAP " << e.result.map_coco << " mAP50 " << e.result.map_50 << "\n";
  };
  const TrainingLog log = fit(rc.train, data.source, data.target, &data.eval, opts);
  const EvalResult final_eval = log.evals.empty() ? EvalResult{} : log.evals.back().result;
  write_text(dir / "final_eval.json", final_eval.to_json() + "\n");
  return final_eval;
}

// ---------------------------------------------------------------------------

int cmd_generate(const Common& c, std::optional<int> per_split, std::optional<double> fog_beta) {
  RunConfig rc = base_config(c);
  if (per_split) {
    if (*per_split < 0) throw UsageError("--n must be >= 0");
    rc.data.source_train = rc.data.target_train = rc.data.target_eval = *per_split;
  }
  if (fog_beta) rc.data.fog_beta = *fog_beta;
  if (rc.data.fog_beta <= 0) {
    throw UsageError("fog_beta must be > 0 for the target split; with no fog the two domains coincide");
  }
  const SyntheticSplits splits = generate_synthetic(rc.data);
  const fs::path dir = make_run_dir(c, "generate", to_key_values(rc));
  write_coco_detection(dir / "source_train", splits.source_train);
  write_coco_detection(dir / "target_train", splits.target_train);
  write_coco_detection(dir / "target_eval", splits.target_eval);
  std::cout << dir.string() << "\n";
  return 0;
}

int cmd_train(const Common& c, const TrainFlags& f) {
  RunConfig rc = base_config(c);
  apply_train_flags(rc, f);
  const Splits data = load_splits(rc);
  const fs::path dir = make_run_dir(c, "train", to_key_values(rc));
  const EvalResult res = train_into(rc, data, dir, false);
  std::cout << dir.string() << "\n" << res.to_json() << "\n";
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& data, const std::string& annotations,
             const std::string& images, std::optional<double> iou, std::optional<double> score_threshold) {
  if (checkpoint.empty()) throw UsageError("--checkpoint is required");
  if (!fs::exists(checkpoint)) throw std::runtime_error("checkpoint " + checkpoint + " not found");
  const Checkpoint ck = load_checkpoint(checkpoint);
  TrainState state = train_state_from_checkpoint(ck);
  if (score_threshold) state.config.detector.score_threshold = *score_threshold;

  fs::path ann, img;
  if (!annotations.empty()) {
    ann = annotations;
    img = images.empty() ? fs::path(annotations).parent_path() / "images" : fs::path(images);
  } else if (!data.empty()) {
    ann = fs::path(data) / "target_eval" / "annotations.json";
    img = fs::path(data) / "target_eval" / "images";
  } else {
    throw UsageError("eval needs --data DIR or --annotations FILE");
  }
  const Dataset ds = load_coco_detection(ann, img, {DomainTag::kTarget, false});
  EvalOptions opts;
  if (iou) {
    if (*iou <= 0 || *iou > 1) throw UsageError("--iou must lie in (0, 1]");
    opts.iou_thresholds = {*iou};
  }
  const EvalResult res = evaluate(
      [&](const ImageSample& s) { return detect_image(state.params, state.config.detector, s); }, ds, opts);

  KeyValues resolved = train_key_values(state.config);
  resolved["eval.checkpoint"] = checkpoint;
  resolved["eval.annotations"] = ann.string();
  resolved["eval.iou"] = iou ? format_number(*iou) : "coco";
  const fs::path dir = make_run_dir(c, "eval", resolved);
  write_text(dir / "eval.json", res.to_json() + "\n");
  write_text(dir / "per_class_ap.csv", res.per_class_csv());
  std::cout << res.to_json() << "\n";
  return 0;
}

int cmd_ablate(const Common& c, const std::string& sweep, const TrainFlags& f, int parallel_runs) {
  struct Variant {
    std::string name;
    RunConfig rc;
  };
  RunConfig base = base_config(c);
  TrainFlags shared = f;
  shared.use_se = false;
  shared.se_stages.clear();
  shared.use_center = false;
  shared.lambda_center.reset();
  apply_train_flags(base, shared);

  std::vector<Variant> variants;
  if (sweep == "se") {
    for (std::string stages : {"none", "3", "1,2,3"}) {
      std::string label = stages;
      std::replace(label.begin(), label.end(), ',', '-');  // keeps CSV cells and directory names plain
      Variant v{"se_" + label, base};
      v.rc.train.detector.backbone = inject_banks(v.rc.train.detector.backbone, parse_stages(stages));
      variants.push_back(v);
    }
  } else if (sweep == "center") {
    for (double lc : {1.0, 0.5}) {
      Variant v{"center_" + format_number(lc), base};
      v.rc.train.lambda_center = lc;
      variants.push_back(v);
    }
  } else {
    throw UsageError("--sweep must be 'se' or 'center'");
  }
  if (variants.empty()) throw UsageError("empty sweep");

  const Splits data = load_splits(base);
  KeyValues resolved = to_key_values(base);
  resolved["ablate.sweep"] = sweep;
  const fs::path dir = make_run_dir(c, "ablate-" + sweep, resolved);

  std::vector<EvalResult> results(variants.size());
  auto run_one = [&](std::size_t i) {
    const fs::path vdir = dir / variants[i].name;
    fs::create_directories(vdir);
    write_text(vdir / "config.txt", format_key_values(to_key_values(variants[i].rc)));
    std::cerr << "ablation run " << variants[i].name << "\n";
    results[i] = train_into(variants[i].rc, data, vdir, parallel_runs > 1);
  };
  if (parallel_runs > 1) {
    for (std::size_t start = 0; start < variants.size(); start += static_cast<std::size_t>(parallel_runs)) {
      std::vector<std::future<void>> jobs;
      for (std::size_t i = start; i < std::min(variants.size(), start + static_cast<std::size_t>(parallel_runs)); ++i) {
        jobs.push_back(std::async(std::launch::async, run_one, i));
      }
      for (auto& j : jobs) j.get();
    }
  } else {
    for (std::size_t i = 0; i < variants.size(); ++i) run_one(i);
  }

  std::ostringstream table;
  table << std::fixed << std::setprecision(6);
  table << "variant,se_stages,lambda_center,lambda_ce,config_hash,map_coco,map_50\n";
  for (std::size_t i = 0; i < variants.size(); ++i) {
    const TrainConfig& t = variants[i].rc.train;
    table << variants[i].name << ",\"" << format_stages(t.detector.backbone.placement()) << "\","
          << format_number(t.lambda_center) << "," << format_number(t.lambda_ce) << ","
          << config_hash(to_key_values(variants[i].rc)) << "," << results[i].map_coco << "," << results[i].map_50
          << "\n";
  }
  write_text(dir / "ablation.csv", table.str());

  // Plot-ready curves: one row per (variant, evaluation).
  std::ostringstream curves;
  curves << "variant,iter,map_coco,map_50,l1,l2\n";
  for (const auto& v : variants) {
    std::ifstream in(dir / v.name / "metrics.jsonl");
    std::string line;
    while (std::getline(in, line)) {
      const auto j = nlohmann::json::parse(line);
      curves << v.name << "," << j["iter"].get<int>() << "," << format_number(j["map_coco"].get<double>()) << ","
             << format_number(j["map_50"].get<double>()) << "," << format_number(j["l1"].get<double>()) << ","
             << format_number(j["l2"].get<double>()) << "\n";
    }
  }
  write_text(dir / "curves.csv", curves.str());
  std::cout << dir.string() << "\n" << table.str();
  return 0;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "Flat key = value config file (flags override it)")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "Seed for data generation and training");
  app->add_option("--out", c.out, "Output root (default: $DA_DETECT_OUT, else ./runs)");
}

void add_train_flags(CLI::App* app, TrainFlags& f, bool variant_flags) {
  app->add_option("--data", f.data, "Dataset root written by `generate` (default: generate in memory)");
  if (variant_flags) {
    app->add_flag("--use-se", f.use_se, "Insert SE adaptor banks into the backbone");
    app->add_option("--se-stages", f.se_stages, "Comma-separated backbone stages (1-3) carrying banks; default 3");
    app->add_flag("--use-center", f.use_center, "Enable the center-loss optimizer");
    app->add_option("--lambda-center", f.lambda_center, "Center-loss weight (default 1.0 with --use-center)");
  }
  app->add_option("--lambda-ce", f.lambda_ce, "Domain cross-entropy and consistency weight (0 disables adaptation)");
  app->add_option("--iters", f.iters, "Training iterations (decay at 3/4, eight evaluations)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"da_detect: domain-adaptive two-stage detection on clean->foggy data"};
  app.require_subcommand(1);
  Common common;

  std::optional<int> per_split;
  std::optional<double> fog_beta;
  auto* gen = app.add_subcommand("generate", "Write synthetic clean source and foggy target splits (COCO JSON + PNG)");
  add_common(gen, common);
  gen->add_option("--n", per_split, "Images per split (overrides source_train/target_train/target_eval)");
  gen->add_option("--fog-beta", fog_beta, "Fog attenuation coefficient of the target domain (> 0)");

  TrainFlags train_flags;
  auto* train = app.add_subcommand("train", "Train one detector variant and log metrics");
  add_common(train, common);
  add_train_flags(train, train_flags, true);

  std::string checkpoint, eval_data, annotations, images;
  std::optional<double> iou, score_threshold;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on an annotated split");
  add_common(ev, common);
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file");
  ev->add_option("--data", eval_data, "Dataset root; evaluates its target_eval split");
  ev->add_option("--annotations", annotations, "COCO annotation file (instead of --data)");
  ev->add_option("--images", images, "Image directory for --annotations (default: <dir>/images)");
  ev->add_option("--iou", iou, "Single IoU threshold (reports mAP at that IoU only)");
  ev->add_option("--score-threshold", score_threshold, "Detection confidence cut-off (default from checkpoint, 0.8)");

  std::string sweep;
  int parallel_runs = 1;
  TrainFlags ablate_flags;
  auto* abl = app.add_subcommand("ablate", "Run the SE-placement or center-weight sweep");
  add_common(abl, common);
  abl->add_option("--sweep", sweep, "'se' (stages none, 3, 1-3) or 'center' (lambda_center 1.0, 0.5)")->required();
  add_train_flags(abl, ablate_flags, false);
  abl->add_option("--parallel-runs", parallel_runs, "Variants trained concurrently (default 1)")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) return cmd_generate(common, per_split, fog_beta);
    if (*train) return cmd_train(common, train_flags);
    if (*ev) return cmd_eval(common, checkpoint, eval_data, annotations, images, iou, score_threshold);
    if (*abl) return cmd_ablate(common, sweep, ablate_flags, parallel_runs);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const SchemaMismatch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
