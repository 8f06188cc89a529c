// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0

#include "dadet/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace dadet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw std::invalid_argument("config: " + key + " expects a number, got '" + v + "'");
  }
  return out;
}

long long to_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw std::invalid_argument("config: " + key + " expects an integer, got '" + v + "'");
  }
  return out;
}

std::vector<double> to_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_double(key, trim(item)));
  if (out.empty()) throw std::invalid_argument("config: " + key + " expects a comma-separated list");
  return out;
}

std::string format_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_number(v[i]);
  return out;
}

struct Field {
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

template <typename N>
Field int_field(const std::string& key, N& ref) {
  return {[&ref] { return std::to_string(ref); }, [&ref, key](const std::string& v) { ref = static_cast<N>(to_int(key, v)); }};
}

Field real_field(const std::string& key, double& ref) {
  return {[&ref] { return format_number(ref); }, [&ref, key](const std::string& v) { ref = to_double(key, v); }};
}

std::map<std::string, Field> train_fields(TrainConfig& c) {
  std::map<std::string, Field> f;
  f["lr_initial"] = real_field("lr_initial", c.lr_initial);
  f["lr_decayed"] = real_field("lr_decayed", c.lr_decayed);
  f["decay_at_iter"] = int_field("decay_at_iter", c.decay_at_iter);
  f["total_iters"] = int_field("total_iters", c.total_iters);
  f["momentum"] = real_field("momentum", c.momentum);
  f["batch_size"] = int_field("batch_size", c.batch_size);
  f["lambda_ce"] = real_field("lambda_ce", c.lambda_ce);
  f["lambda_center"] = real_field("lambda_center", c.lambda_center);
  f["lambda_grl"] = real_field("lambda_grl", c.lambda_grl);
  f["eval_interval"] = int_field("eval_interval", c.eval_interval);
  f["checkpoint_interval"] = int_field("checkpoint_interval", c.checkpoint_interval);
  f["probe_samples"] = int_field("probe_samples", c.probe_samples);
  f["seed"] = int_field("seed", c.seed);
  DetectorConfig& d = c.detector;
  f["se_stages"] = {[&d] { return format_stages(d.backbone.placement()); },
                    [&d](const std::string& v) { d.backbone = inject_banks(d.backbone, parse_stages(v)); }};
  f["se_bank_size"] = int_field("se_bank_size", d.backbone.se_bank_size);
  f["se_reduction"] = int_field("se_reduction", d.backbone.se_reduction);
  f["anchor_sizes"] = {[&d] { return format_list(d.anchors.sizes); },
                       [&d](const std::string& v) { d.anchors.sizes = to_list("anchor_sizes", v); }};
  f["anchor_ratios"] = {[&d] { return format_list(d.anchors.ratios); },
                        [&d](const std::string& v) { d.anchors.ratios = to_list("anchor_ratios", v); }};
  f["rpn_batch"] = int_field("rpn_batch", d.anchors.per_image_samples);
  f["roi_samples"] = int_field("roi_samples", d.roi_samples);
  f["target_instances"] = int_field("target_instances", d.target_instances);
  f["score_threshold"] = real_field("score_threshold", d.score_threshold);
  f["nms_threshold"] = real_field("nms_threshold", d.nms_threshold);
  f["image_hidden"] = int_field("image_hidden", c.heads.image_hidden);
  f["instance_hidden"] = int_field("instance_hidden", c.heads.instance_hidden);
  return f;
}

std::map<std::string, Field> data_fields(RunConfig& c) {
  std::map<std::string, Field> f;
  SyntheticConfig& s = c.data;
  f["image_width"] = int_field("image_width", s.scene.width);
  f["image_height"] = int_field("image_height", s.scene.height);
  f["min_objects"] = int_field("min_objects", s.scene.min_objects);
  f["max_objects"] = int_field("max_objects", s.scene.max_objects);
  f["min_size"] = int_field("min_size", s.scene.min_size);
  f["max_size"] = int_field("max_size", s.scene.max_size);
  f["texture_seed"] = int_field("texture_seed", s.scene.texture_seed);
  f["source_train"] = int_field("source_train", s.source_train);
  f["target_train"] = int_field("target_train", s.target_train);
  f["target_eval"] = int_field("target_eval", s.target_eval);
  f["fog_beta"] = real_field("fog_beta", s.fog_beta);
  f["airlight"] = real_field("airlight", s.airlight);
  f["data_seed"] = int_field("data_seed", s.seed);
  f["data_dir"] = {[&c] { return c.data_dir; }, [&c](const std::string& v) { c.data_dir = v; }};
  return f;
}

KeyValues collect(const std::map<std::string, Field>& fields) {
  KeyValues kv;
  for (const auto& [k, f] : fields) kv[k] = f.get();
  return kv;
}

}  // namespace

std::string format_number(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw std::runtime_error("format_number failed");
  return std::string(buf, ptr);
}

std::string format_stages(const std::set<int>& stages) {
  if (stages.empty()) return "none";
  std::string out;
  for (int s : stages) out += (out.empty() ? "" : ",") + std::to_string(s);
  return out;
}

std::set<int> parse_stages(const std::string& text) {
  const std::string t = trim(text);
  std::set<int> out;
  if (t.empty() || t == "none") return out;
  std::stringstream ss(t);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const long long s = to_int("se_stages", trim(item));
    if (s < 1 || s > 3) throw std::invalid_argument("config: se_stages entries must be 1, 2 or 3, got " + item);
    out.insert(static_cast<int>(s));
  }
  return out;
}

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_key_values(buf.str());
}

std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

KeyValues train_key_values(const TrainConfig& cfg) {
  TrainConfig copy = cfg;
  return collect(train_fields(copy));
}

void apply_train_key_values(TrainConfig& cfg, const KeyValues& kv) {
  auto fields = train_fields(cfg);
  for (const auto& [k, v] : kv) {
    auto it = fields.find(k);
    if (it == fields.end()) throw std::invalid_argument("config: unknown key '" + k + "'");
    it->second.set(v);
  }
}

KeyValues to_key_values(const RunConfig& cfg) {
  RunConfig copy = cfg;
  KeyValues kv = collect(train_fields(copy.train));
  for (const auto& [k, v] : collect(data_fields(copy))) kv[k] = v;
  return kv;
}

void apply_key_values(RunConfig& cfg, const KeyValues& kv) {
  auto tf = train_fields(cfg.train);
  auto df = data_fields(cfg);
  for (const auto& [k, v] : kv) {
    if (auto it = tf.find(k); it != tf.end()) {
      it->second.set(v);
    } else if (auto jt = df.find(k); jt != df.end()) {
      jt->second.set(v);
    } else {
      throw std::invalid_argument("config: unknown key '" + k + "'");
    }
  }
}

std::string config_hash(const KeyValues& kv) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : format_key_values(kv)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace dadet
