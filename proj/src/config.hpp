// Copyright 2026 The d2lora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <string_view>

#include <json.hpp>

#include "adapter.hpp"
#include "optim.hpp"
#include "train.hpp"

namespace d2lora {

/// A full run description: {"task": {...}, "adapter": {...}, "optim": {...},
/// "run": {...}}. Every section and key is optional; unknown keys are
/// rejected.
///
/// run.seed is the only seed: task and adapter seeds are copied from it by
/// resolve().
struct CliConfig {
  TaskSpec task;
  AdapterConfig adapter;
  OptimConfig optim;
  RunConfig run;

  /// Copies run.seed into task.seed and adapter.seed and validates.
  void resolve();
  bool operator==(const CliConfig&) const = default;
};

/// Throws ConfigError on malformed JSON, unknown keys or wrong types.
CliConfig parse_config(std::string_view text);
/// Throws IoError naming the path when the file cannot be read.
CliConfig load_config(const std::string& path);

nlohmann::json to_json(const CliConfig& cfg);
/// Includes the seed, which the CLI config format does not accept.
nlohmann::json adapter_to_json(const AdapterConfig& cfg);
AdapterConfig adapter_from_json(const nlohmann::json& j);

std::string task_kind_name(TaskKind kind);

}  // namespace d2lora
