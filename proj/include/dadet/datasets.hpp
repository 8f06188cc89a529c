// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic clean/foggy scene generation and COCO-format detection I/O.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dadet/adaptation_losses.hpp"
#include "dadet/boxes.hpp"
#include "dadet/tensor.hpp"

namespace dadet {

struct ImageSample {
  Tensor<float> image;  // [3, H, W] in [0, 1]
  DomainTag domain = DomainTag::kSource;
  std::optional<std::vector<BoundingBox>> boxes;  // absent for unlabeled target samples
  std::string id;

  int height() const { return image.dim(1); }
  int width() const { return image.dim(2); }
};

struct Category {
  int id = 0;  // id as stored in the annotation file
  std::string name;
};

struct Dataset {
  std::vector<ImageSample> samples;
  std::vector<Category> categories;  // sorted by id; label k (1-based) is categories[k-1]
  // Annotations held back from the trainer (unlabeled target splits), aligned with samples.
  std::vector<std::vector<BoundingBox>> withheld;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  // Ground truth for evaluation: sample boxes, or the withheld ones.
  const std::vector<BoundingBox>& eval_boxes(std::size_t i) const;
};

// ---------------------------------------------------------------------------
// Synthetic scenes

enum class ShapeKind { kCircle = 1, kSquare = 2, kTriangle = 3 };  // values are category ids

std::vector<Category> shape_categories();

struct SceneObject {
  ShapeKind shape = ShapeKind::kSquare;
  int x = 0, y = 0;  // top-left corner of the bounding square
  int size = 16;
  std::array<float, 3> color{1, 0, 0};
};

struct SceneSpec {
  int width = 256;
  int height = 256;
  int min_objects = 1;
  int max_objects = 4;
  int min_size = 16;
  int max_size = 56;
  std::vector<std::array<float, 3>> palette{{0.85f, 0.15f, 0.15f}, {0.15f, 0.7f, 0.2f}, {0.2f, 0.3f, 0.9f},
                                           {0.9f, 0.8f, 0.1f},   {0.8f, 0.2f, 0.8f}, {0.1f, 0.8f, 0.8f}};
  std::uint64_t texture_seed = 7;  // mixed with the per-scene seed
  double fog_beta = 0.0;           // 0 renders a clean scene
  double airlight = 0.8;
  std::optional<std::vector<SceneObject>> fixed_objects;

  void validate() const;
};

// Vertical depth ramp d(y) = y / H * d_max.
struct DepthModel {
  double d_max = 50.0;
  double depth(int y, int height) const { return static_cast<double>(y) / height * d_max; }
};

ImageSample generate_scene(const SceneSpec& spec, std::uint64_t seed);

// I' = I t + A (1 - t), t = exp(-beta d). Boxes are preserved; the domain becomes target.
ImageSample apply_fog(const ImageSample& clean, double fog_beta, double airlight,
                      const DepthModel& depth = DepthModel{});

double fog_transmittance(double fog_beta, double depth);

struct SyntheticSplits {
  Dataset source_train;
  Dataset target_train;  // foggy, annotations withheld
  Dataset target_eval;   // foggy, annotated
};

struct SyntheticConfig {
  SceneSpec scene;
  int source_train = 500;
  int target_train = 500;
  int target_eval = 100;
  double fog_beta = 0.04;
  double airlight = 0.8;
  std::uint64_t seed = 1;
};

// Disjoint seed ranges per split. Throws when fog_beta is 0 (domains would coincide).
SyntheticSplits generate_synthetic(const SyntheticConfig& cfg);

// ---------------------------------------------------------------------------
// PNG and COCO I/O

void write_png(const std::filesystem::path& path, const Tensor<float>& image);
Tensor<float> read_png(const std::filesystem::path& path);

struct CocoLoadOptions {
  DomainTag domain = DomainTag::kSource;
  bool withhold_annotations = false;  // move boxes into Dataset::withheld
};

// Reads a COCO detection file. Images missing on disk are skipped with a warning on
// stderr; malformed JSON throws std::runtime_error.
Dataset load_coco_detection(const std::filesystem::path& annotation_file, const std::filesystem::path& image_dir,
                            const CocoLoadOptions& opts = {});

// Writes <dir>/images/<id>.png and <dir>/annotations.json. Withheld boxes are written
// as annotations so the split can be reloaded with labels.
void write_coco_detection(const std::filesystem::path& dir, const Dataset& dataset);

// Serialized annotation JSON (deterministic key order) without touching images.
std::string coco_annotation_json(const Dataset& dataset);

}  // namespace dadet
