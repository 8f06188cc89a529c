// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0
//
// Flat `key = value` configuration shared by the CLI and checkpoints.

#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>

#include "dadet/datasets.hpp"
#include "dadet/trainer.hpp"

namespace dadet {

using KeyValues = std::map<std::string, std::string>;

// Lines of `key = value`; `#` starts a comment. Malformed lines throw std::invalid_argument.
KeyValues parse_key_values(const std::string& text);
KeyValues read_config_file(const std::filesystem::path& path);
std::string format_key_values(const KeyValues& kv);

KeyValues train_key_values(const TrainConfig& cfg);
// Unknown keys and unparsable values throw std::invalid_argument.
void apply_train_key_values(TrainConfig& cfg, const KeyValues& kv);

struct RunConfig {
  TrainConfig train = desk_train_config();
  SyntheticConfig data;
  std::string data_dir;  // generated dataset root (source_train/, target_train/, target_eval/)
};

KeyValues to_key_values(const RunConfig& cfg);
void apply_key_values(RunConfig& cfg, const KeyValues& kv);

// 16 hex digits of FNV-1a over the formatted key-values.
std::string config_hash(const KeyValues& kv);

std::string format_number(double v);
std::string format_stages(const std::set<int>& stages);  // "none" or "1,2,3"
std::set<int> parse_stages(const std::string& text);

}  // namespace dadet
