// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0

#include "dadet/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "dadet/config.hpp"

namespace dadet {

namespace {

constexpr char kMagic[8] = {'D', 'A', 'D', 'E', 'T', 'C', 'K', 'P'};

template <typename U>
void put(std::ostream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& in, const std::string& what) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!in) throw std::runtime_error("checkpoint truncated while reading " + what);
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in, const std::string& what) {
  const auto n = get<std::uint64_t>(in, what);
  if (n > (1ULL << 30)) throw std::runtime_error("checkpoint corrupt: oversized " + what);
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("checkpoint truncated while reading " + what);
  return s;
}

void put_table(std::ostream& out, const TensorTable& t) {
  put<std::uint64_t>(out, t.size());
  for (const auto& [name, v] : t) {
    put_string(out, name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(v.shape.size()));
    for (int d : v.shape) put<std::int32_t>(out, d);
    out.write(reinterpret_cast<const char*>(v.data.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  }
}

TensorTable get_table(std::istream& in, const std::string& what) {
  TensorTable t;
  const auto n = get<std::uint64_t>(in, what);
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::string name = get_string(in, what + " name");
    const auto nd = get<std::uint32_t>(in, name);
    if (nd > 8) throw std::runtime_error("checkpoint corrupt: tensor " + name + " has rank " + std::to_string(nd));
    std::vector<int> shape(nd);
    for (auto& d : shape) d = get<std::int32_t>(in, name);
    Tensor<float> v(shape);
    in.read(reinterpret_cast<char*>(v.data.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
    if (!in) throw std::runtime_error("checkpoint truncated while reading tensor " + name);
    t.emplace(name, std::move(v));
  }
  return t;
}

}  // namespace

SchemaMismatch::SchemaMismatch(std::uint32_t f, std::uint32_t e)
    : std::runtime_error("checkpoint schema version " + std::to_string(f) + " does not match supported version " +
                         std::to_string(e)),
      found(f),
      expected(e) {}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, ck.schema);
    put_string(out, ck.config_text);
    put<std::int64_t>(out, ck.completed_iters);
    put_table(out, ck.params);
    put_table(out, ck.main_velocity);
    put_table(out, ck.center_velocity);
    if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error(path.string() + " is not a checkpoint file");
  }
  Checkpoint ck;
  ck.schema = get<std::uint32_t>(in, "schema version");
  if (ck.schema != kCheckpointSchema) throw SchemaMismatch(ck.schema, kCheckpointSchema);
  ck.config_text = get_string(in, "config");
  ck.completed_iters = static_cast<int>(get<std::int64_t>(in, "iteration"));
  ck.params = get_table(in, "parameters");
  ck.main_velocity = get_table(in, "main optimizer state");
  ck.center_velocity = get_table(in, "center optimizer state");
  return ck;
}

Checkpoint make_checkpoint(const TrainState& state) {
  Checkpoint ck;
  ck.config_text = format_key_values(train_key_values(state.config));
  ck.completed_iters = state.completed_iters;
  ck.params = state.params.all();
  ck.main_velocity = state.main_opt.velocity;
  ck.center_velocity = state.center_opt.velocity;
  return ck;
}

void restore_train_state(TrainState& state, const Checkpoint& ck) {
  for (const auto& [name, v] : ck.params) {
    if (!state.params.contains(name)) throw std::runtime_error("checkpoint parameter " + name + " unknown to model");
    Tensor<float>& dst = state.params.at(name);
    if (dst.shape != v.shape) {
      throw std::runtime_error("checkpoint parameter " + name + " has shape " + shape_str(v.shape) + ", model expects " +
                               shape_str(dst.shape));
    }
    dst = v;
  }
  if (ck.params.size() != state.params.all().size()) {
    throw std::runtime_error("checkpoint holds " + std::to_string(ck.params.size()) + " parameters, model has " +
                             std::to_string(state.params.all().size()));
  }
  state.main_opt.velocity = ck.main_velocity;
  state.center_opt.velocity = ck.center_velocity;
  state.completed_iters = ck.completed_iters;
}

TrainState train_state_from_checkpoint(const Checkpoint& ck) {
  TrainConfig cfg = desk_train_config();
  apply_train_key_values(cfg, parse_key_values(ck.config_text));
  TrainState state = init_train_state(cfg);
  restore_train_state(state, ck);
  return state;
}

}  // namespace dadet
