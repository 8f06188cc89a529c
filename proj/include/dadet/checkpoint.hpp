// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint: magic, schema version, resolved config text, iteration count and
// three named tensor tables (parameters, main and center optimizer velocities).
// Values are stored as raw IEEE-754 float32, so a save/load round trip is bit-exact.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

#include "dadet/tensor.hpp"
#include "dadet/trainer.hpp"

namespace dadet {

inline constexpr std::uint32_t kCheckpointSchema = 1;

class SchemaMismatch : public std::runtime_error {
 public:
  SchemaMismatch(std::uint32_t found, std::uint32_t expected);
  std::uint32_t found;
  std::uint32_t expected;
};

using TensorTable = std::map<std::string, Tensor<float>>;

struct Checkpoint {
  std::uint32_t schema = kCheckpointSchema;
  std::string config_text;  // key = value lines
  int completed_iters = 0;
  TensorTable params;
  TensorTable main_velocity;
  TensorTable center_velocity;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);

// Throws SchemaMismatch when the stored schema differs from kCheckpointSchema and
// std::runtime_error for missing or truncated files.
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint make_checkpoint(const TrainState& state);

// Replaces parameters, optimizer state and iteration count. Every stored parameter must
// exist in `state` with the same shape.
void restore_train_state(TrainState& state, const Checkpoint& ck);

// Config stored in the checkpoint, with parameters loaded.
TrainState train_state_from_checkpoint(const Checkpoint& ck);

}  // namespace dadet
