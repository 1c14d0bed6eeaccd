// Copyright 2026 The d2lora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "config.hpp"
#include "verify.hpp"

namespace d2lora {

/// min(hardware threads, D2LORA_THREADS if set and positive), at least 1.
std::size_t worker_threads();

struct TrainOutputs {
  std::string report_csv;  // out_dir/report.csv
  std::string trace_csv;   // out_dir/trace.csv
  std::string checkpoint;  // out_dir/adapter.d2la or out_dir/net.d2ln
  std::string config_json; // out_dir/config.json
  TrainReport report;
};

/// Trains per `cfg` and writes report.csv, trace.csv, config.json and a
/// checkpoint into out_dir (created if missing).
TrainOutputs cmd_train(const CliConfig& cfg, const std::string& out_dir);

/// Variant CSV for seeds run.seed, run.seed + 1, ..., run.seed + n_seeds - 1.
std::vector<VariantRow> cmd_compare(const CliConfig& cfg, std::size_t n_seeds, std::size_t threads);

SuiteReport cmd_verify(const std::string& suite, std::uint64_t seed, double threshold_scale = 1.0);

/// Merges an adapter or net checkpoint into a merged checkpoint.
void cmd_merge(const std::string& in_path, const std::string& out_path);

struct BenchResult {
  std::vector<double> unmerged_ms;
  std::vector<double> merged_ms;
  double speedup = 0.0;  // median unmerged / median merged
  /// Matrix products per adapted module for one eval forward.
  double unmerged_products_per_module = 0.0;
  double merged_products_per_module = 0.0;
  std::size_t adapted_modules = 0;

  std::string to_csv() const;
};

/// Times eval forwards of a ToyNet (embed_dim = dim, seq_len 8, adapters on
/// q, k, v, o) before and after merging.
BenchResult cmd_bench(std::size_t dim, std::size_t batch, std::size_t iters);

/// step,loss,lr,clamp_events,rolling_sigma
std::string trace_csv(const TrainReport& report);

}  // namespace d2lora
