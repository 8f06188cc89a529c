// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0

#include "dadet/datasets.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace dadet {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

bool inside_shape(ShapeKind kind, double px, double py, const SceneObject& o) {
  const double s = o.size;
  const double lx = px - o.x;
  const double ly = py - o.y;
  if (lx < 0 || ly < 0 || lx >= s || ly >= s) return false;
  switch (kind) {
    case ShapeKind::kSquare:
      return true;
    case ShapeKind::kCircle: {
      const double r = s / 2;
      return (lx - r) * (lx - r) + (ly - r) * (ly - r) <= r * r;
    }
    case ShapeKind::kTriangle:
      // Apex at the top centre, base along the bottom edge.
      return std::abs(lx - s / 2) <= ly / 2;
  }
  return false;
}

std::string image_name(const ImageSample& s, std::size_t index) {
  return s.id.empty() ? ("img_" + std::to_string(index)) : s.id;
}

}  // namespace

const std::vector<BoundingBox>& Dataset::eval_boxes(std::size_t i) const {
  const ImageSample& s = samples.at(i);
  if (s.boxes) return *s.boxes;
  return withheld.at(i);
}

std::vector<Category> shape_categories() { return {{1, "circle"}, {2, "square"}, {3, "triangle"}}; }

void SceneSpec::validate() const {
  require(width > 0 && height > 0, "scene: canvas dimensions must be positive");
  require(min_objects >= 0 && min_objects <= max_objects, "scene: invalid object count range");
  require(min_size > 0 && min_size <= max_size, "scene: invalid object size range");
  require(max_size <= std::min(width, height),
          "scene: object size " + std::to_string(max_size) + " too large for " + std::to_string(width) + "x" +
              std::to_string(height) + " canvas");
  require(!palette.empty(), "scene: empty colour palette");
  require(fog_beta >= 0, "scene: fog_beta must be >= 0");
  require(airlight >= 0 && airlight <= 1, "scene: airlight must lie in [0, 1]");
  if (fixed_objects) {
    for (const auto& o : *fixed_objects) {
      require(o.size > 0 && o.size <= std::min(width, height), "scene: object too large for canvas");
      require(o.x >= 0 && o.y >= 0 && o.x + o.size <= width && o.y + o.size <= height,
              "scene: object does not fit inside the canvas");
    }
  }
}

ImageSample generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(splitmix(seed ^ splitmix(spec.texture_seed)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int H = spec.height;
  const int W = spec.width;

  Tensor<float> img({3, H, W});
  // Background: per-channel base level plus a few low-frequency waves and pixel noise.
  for (int c = 0; c < 3; ++c) {
    const double base = 0.35 + 0.25 * unit(rng);
    double fx[3], fy[3], ph[3];
    for (int k = 0; k < 3; ++k) {
      fx[k] = (0.5 + 3.0 * unit(rng)) * 2 * M_PI / W;
      fy[k] = (0.5 + 3.0 * unit(rng)) * 2 * M_PI / H;
      ph[k] = 2 * M_PI * unit(rng);
    }
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        double v = base;
        for (int k = 0; k < 3; ++k) v += 0.05 * std::sin(fx[k] * x + fy[k] * y + ph[k]);
        v += 0.06 * (unit(rng) - 0.5);
        img.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }

  std::vector<SceneObject> objects;
  if (spec.fixed_objects) {
    objects = *spec.fixed_objects;
  } else {
    const int count = std::uniform_int_distribution<int>(spec.min_objects, spec.max_objects)(rng);
    std::vector<BoundingBox> placed;
    for (int i = 0; i < count; ++i) {
      SceneObject o;
      o.shape = static_cast<ShapeKind>(std::uniform_int_distribution<int>(1, 3)(rng));
      o.size = std::uniform_int_distribution<int>(spec.min_size, spec.max_size)(rng);
      o.color = spec.palette[std::uniform_int_distribution<std::size_t>(0, spec.palette.size() - 1)(rng)];
      for (auto& ch : o.color) ch = std::clamp(ch + static_cast<float>(0.1 * (unit(rng) - 0.5)), 0.0f, 1.0f);
      bool ok = false;
      for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
        o.x = std::uniform_int_distribution<int>(0, W - o.size)(rng);
        o.y = std::uniform_int_distribution<int>(0, H - o.size)(rng);
        const BoundingBox b = make_box(o.x, o.y, o.x + o.size, o.y + o.size);
        ok = std::none_of(placed.begin(), placed.end(), [&](const BoundingBox& p) { return iou(p, b) > 0.1; });
        if (ok) placed.push_back(b);
      }
      if (ok) objects.push_back(o);
    }
  }

  std::vector<BoundingBox> boxes;
  for (const auto& o : objects) {
    for (int y = o.y; y < o.y + o.size; ++y) {
      for (int x = o.x; x < o.x + o.size; ++x) {
        if (!inside_shape(o.shape, x + 0.5, y + 0.5, o)) continue;
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = o.color[static_cast<std::size_t>(c)];
      }
    }
    boxes.push_back(make_box(o.x, o.y, o.x + o.size, o.y + o.size, static_cast<int>(o.shape)));
  }

  ImageSample s;
  s.image = std::move(img);
  s.domain = DomainTag::kSource;
  s.boxes = std::move(boxes);
  s.id = "scene_" + std::to_string(seed);
  if (spec.fog_beta > 0) s = apply_fog(s, spec.fog_beta, spec.airlight);
  return s;
}

double fog_transmittance(double fog_beta, double depth) { return std::exp(-fog_beta * depth); }

ImageSample apply_fog(const ImageSample& clean, double fog_beta, double airlight, const DepthModel& depth) {
  require(fog_beta >= 0, "apply_fog: fog_beta must be >= 0");
  ImageSample out = clean;
  out.domain = DomainTag::kTarget;
  const int C = clean.image.dim(0);
  const int H = clean.height();
  const int W = clean.width();
  for (int y = 0; y < H; ++y) {
    const double t = fog_transmittance(fog_beta, depth.depth(y, H));
    for (int c = 0; c < C; ++c) {
      for (int x = 0; x < W; ++x) {
        const double v = clean.image.at(c, y, x) * t + airlight * (1.0 - t);
        out.image.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

SyntheticSplits generate_synthetic(const SyntheticConfig& cfg) {
  require(cfg.fog_beta > 0, "generate: target fog_beta must be > 0, otherwise source and target domains coincide");
  require(cfg.source_train >= 0 && cfg.target_train >= 0 && cfg.target_eval >= 0, "generate: negative split size");
  SceneSpec clean = cfg.scene;
  clean.fog_beta = 0.0;
  clean.validate();

  // Split-specific seed ranges never overlap for split sizes below 2^32.
  auto scene_seed = [&](std::uint64_t split, int i) {
    return splitmix(cfg.seed) ^ (split << 32) ^ static_cast<std::uint64_t>(i);
  };

  SyntheticSplits out;
  for (Dataset* d : {&out.source_train, &out.target_train, &out.target_eval}) d->categories = shape_categories();

  for (int i = 0; i < cfg.source_train; ++i) {
    ImageSample s = generate_scene(clean, scene_seed(1, i));
    s.id = "src_" + std::to_string(i);
    out.source_train.samples.push_back(std::move(s));
    out.source_train.withheld.emplace_back();
  }
  for (int i = 0; i < cfg.target_train; ++i) {
    ImageSample s = apply_fog(generate_scene(clean, scene_seed(2, i)), cfg.fog_beta, cfg.airlight);
    s.id = "tgt_" + std::to_string(i);
    out.target_train.withheld.push_back(*s.boxes);
    s.boxes.reset();
    out.target_train.samples.push_back(std::move(s));
  }
  for (int i = 0; i < cfg.target_eval; ++i) {
    ImageSample s = apply_fog(generate_scene(clean, scene_seed(3, i)), cfg.fog_beta, cfg.airlight);
    s.id = "eval_" + std::to_string(i);
    out.target_eval.samples.push_back(std::move(s));
    out.target_eval.withheld.emplace_back();
  }
  return out;
}

// ---------------------------------------------------------------------------

void write_png(const fs::path& path, const Tensor<float>& image) {
  require(image.ndim() == 3 && image.dim(0) == 3, "write_png: expected a [3,H,W] image");
  const int H = image.dim(1);
  const int W = image.dim(2);
  std::vector<png_byte> buf(static_cast<std::size_t>(H) * W * 3);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(image.at(c, y, x), 0.0f, 1.0f);
        buf[(static_cast<std::size_t>(y) * W + x) * 3 + c] = static_cast<png_byte>(std::lround(v * 255.0f));
      }
    }
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(W);
  img.height = static_cast<png_uint_32>(H);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw std::runtime_error("write_png: cannot write " + path.string() + ": " + img.message);
  }
}

Tensor<float> read_png(const fs::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw std::runtime_error("read_png: cannot open " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw std::runtime_error("read_png: cannot decode " + path.string() + ": " + img.message);
  }
  const int H = static_cast<int>(img.height);
  const int W = static_cast<int>(img.width);
  Tensor<float> out({3, H, W});
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < 3; ++c) {
        out.at(c, y, x) = buf[(static_cast<std::size_t>(y) * W + x) * 3 + c] / 255.0f;
      }
    }
  }
  return out;
}

Dataset load_coco_detection(const fs::path& annotation_file, const fs::path& image_dir, const CocoLoadOptions& opts) {
  std::ifstream in(annotation_file);
  if (!in) throw std::runtime_error("load_coco_detection: cannot open " + annotation_file.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("load_coco_detection: malformed JSON in " + annotation_file.string() + ": " + e.what());
  }
  for (const char* key : {"images", "annotations", "categories"}) {
    if (!doc.contains(key) || !doc[key].is_array()) {
      throw std::runtime_error(std::string("load_coco_detection: missing array '") + key + "' in " +
                               annotation_file.string());
    }
  }

  Dataset ds;
  try {
    for (const auto& c : doc["categories"]) ds.categories.push_back({c.at("id").get<int>(), c.at("name").get<std::string>()});
    std::sort(ds.categories.begin(), ds.categories.end(), [](const Category& a, const Category& b) { return a.id < b.id; });
    std::map<int, int> label_of;
    for (std::size_t k = 0; k < ds.categories.size(); ++k) label_of[ds.categories[k].id] = static_cast<int>(k) + 1;

    std::map<long long, std::vector<BoundingBox>> boxes_of;
    for (const auto& a : doc["annotations"]) {
      if (a.value("iscrowd", 0) != 0) continue;
      const auto& bb = a.at("bbox");
      if (!bb.is_array() || bb.size() != 4) throw std::runtime_error("annotation bbox must have four numbers");
      const int cat = a.at("category_id").get<int>();
      auto it = label_of.find(cat);
      if (it == label_of.end()) throw std::runtime_error("annotation references unknown category " + std::to_string(cat));
      const double x = bb[0].get<double>(), y = bb[1].get<double>(), w = bb[2].get<double>(), h = bb[3].get<double>();
      boxes_of[a.at("image_id").get<long long>()].push_back(make_box(x, y, x + w, y + h, it->second));
    }

    for (const auto& im : doc["images"]) {
      const long long id = im.at("id").get<long long>();
      const fs::path file = image_dir / im.at("file_name").get<std::string>();
      if (!fs::exists(file)) {
        std::cerr << "warning: skipping image " << id << ": file " << file.string() << " not found\n";
        continue;
      }
      ImageSample s;
      s.image = read_png(file);
      s.domain = opts.domain;
      s.id = fs::path(im.at("file_name").get<std::string>()).stem().string();
      auto found = boxes_of.find(id);
      std::vector<BoundingBox> boxes = found == boxes_of.end() ? std::vector<BoundingBox>{} : found->second;
      if (opts.withhold_annotations) {
        ds.withheld.push_back(std::move(boxes));
      } else {
        s.boxes = std::move(boxes);
        ds.withheld.emplace_back();
      }
      ds.samples.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw std::runtime_error("load_coco_detection: malformed COCO record in " + annotation_file.string() + ": " +
                             e.what());
  }
  return ds;
}

std::string coco_annotation_json(const Dataset& dataset) {
  json images = json::array();
  json annotations = json::array();
  json categories = json::array();
  for (const auto& c : dataset.categories) categories.push_back({{"id", c.id}, {"name", c.name}});
  long long ann_id = 1;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const ImageSample& s = dataset.samples[i];
    const long long image_id = static_cast<long long>(i) + 1;
    images.push_back({{"id", image_id},
                      {"file_name", image_name(s, i) + ".png"},
                      {"width", s.width()},
                      {"height", s.height()}});
    const auto& boxes = s.boxes ? *s.boxes : (i < dataset.withheld.size() ? dataset.withheld[i] : std::vector<BoundingBox>{});
    for (const auto& b : boxes) {
      require(b.label >= 1 && static_cast<std::size_t>(b.label) <= dataset.categories.size(),
              "coco writer: box label outside the category list");
      annotations.push_back({{"id", ann_id++},
                             {"image_id", image_id},
                             {"category_id", dataset.categories[static_cast<std::size_t>(b.label) - 1].id},
                             {"bbox", {b.x1, b.y1, b.x2 - b.x1, b.y2 - b.y1}},
                             {"area", b.area()},
                             {"iscrowd", 0}});
    }
  }
  json doc{{"images", images}, {"annotations", annotations}, {"categories", categories}};
  return doc.dump(1);
}

void write_coco_detection(const fs::path& dir, const Dataset& dataset) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw std::runtime_error("cannot create " + (dir / "images").string() + ": " + ec.message());
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    write_png(dir / "images" / (image_name(dataset.samples[i], i) + ".png"), dataset.samples[i].image);
  }
  std::ofstream out(dir / "annotations.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "annotations.json").string());
  out << coco_annotation_json(dataset) << "\n";
}

}  // namespace dadet
