// Copyright 2026 The d2lora Authors
// SPDX-License-Identifier: Apache-2.0
//
// d2lora command-line tool. Exit codes: 0 success, 1 verification or
// runtime failure, 2 usage or configuration error.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "d2lora/d2lora.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

int exit_code_for(d2l_status s) {
  switch (s) {
    case D2L_OK:
      return kExitOk;
    case D2L_ERR_NUMERIC:
    case D2L_ERR_INTERNAL:
      return kExitFailure;
    default:
      return kExitUsage;
  }
}

int report_error(const char* command, d2l_status s) {
  std::fprintf(stderr, "d2lora %s: %s: %s\n", command, d2l_status_name(s), d2l_last_error());
  return exit_code_for(s);
}

// D2LORA_VERIFY_SCALE multiplies every verify tolerance (0 forces failures).
double verify_scale() {
  const char* v = std::getenv("D2LORA_VERIFY_SCALE");
  if (!v || !*v) return 1.0;
  char* end = nullptr;
  const double s = std::strtod(v, &end);
  return (*end == '\0' && s >= 0.0) ? s : 1.0;
}

// Takes ownership of a library string.
std::string take(char* s) {
  std::string out = s ? s : "";
  d2l_string_free(s);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"d2lora: signed low-rank adapters with directional projection"};
  app.require_subcommand(1);

  std::string config, out_dir, suite = "all", ckpt, out_path;
  std::size_t seeds = 5, dim = 512, batch = 64, iters = 20;
  std::uint64_t seed = 0;

  auto* train = app.add_subcommand("train", "train one adapter run and write CSV + checkpoint");
  train->add_option("--config", config, "JSON config file")->required();
  train->add_option("--out", out_dir, "output directory")->required();

  auto* compare = app.add_subcommand("compare", "LoRA vs DoRA-like vs D2-LoRA over several seeds");
  compare->add_option("--config", config, "JSON config file")->required();
  compare->add_option("--seeds", seeds, "number of seeds (>= 3)")->capture_default_str();

  auto* verify = app.add_subcommand("verify", "run the property suite and print a JSON report");
  verify->add_option("--suite", suite, "all or a single check name")->capture_default_str();
  verify->add_option("--seed", seed, "suite seed")->capture_default_str();

  auto* merge = app.add_subcommand("merge", "merge an adapter checkpoint into W_hat");
  merge->add_option("--ckpt", ckpt, "input checkpoint")->required();
  merge->add_option("--out", out_path, "output checkpoint")->required();

  auto* bench = app.add_subcommand("bench", "time merged vs unmerged evaluation");
  bench->add_option("--dim", dim, "embedding width")->capture_default_str();
  bench->add_option("--batch", batch, "sequences per forward")->capture_default_str();
  bench->add_option("--iters", iters, "timed iterations")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  if (train->parsed()) {
    char* summary = nullptr;
    const d2l_status s = d2l_train(config.c_str(), out_dir.c_str(), &summary);
    if (s != D2L_OK) return report_error("train", s);
    std::cout << nlohmann::json::parse(take(summary)).dump(2) << "\n";
    return kExitOk;
  }

  if (compare->parsed()) {
    char* csv = nullptr;
    char* summary = nullptr;
    const d2l_status s = d2l_compare(config.c_str(), seeds, &csv, &summary);
    if (s != D2L_OK) return report_error("compare", s);
    std::cout << take(csv);
    for (const auto& v : nlohmann::json::parse(take(summary))) {
      std::fprintf(stderr, "%-10s median_final_loss=%.6g median_sigma_diff=%.6g trainable_params=%zu\n",
                   v["variant"].get<std::string>().c_str(), v["median_final_loss"].get<double>(),
                   v["median_sigma_diff"].get<double>(), v["trainable_params"].get<std::size_t>());
    }
    return kExitOk;
  }

  if (verify->parsed()) {
    char* report = nullptr;
    int passed = 0;
    const d2l_status s = d2l_verify(suite.c_str(), seed, verify_scale(), &report, &passed);
    if (s != D2L_OK) return report_error("verify", s);
    std::cout << take(report) << "\n";
    return passed ? kExitOk : kExitFailure;
  }

  if (merge->parsed()) {
    const d2l_status s = d2l_merge_checkpoint(ckpt.c_str(), out_path.c_str());
    if (s != D2L_OK) return report_error("merge", s);
    std::fprintf(stderr, "wrote %s\n", out_path.c_str());
    return kExitOk;
  }

  if (bench->parsed()) {
    char* csv = nullptr;
    char* summary = nullptr;
    const d2l_status s = d2l_bench(dim, batch, iters, &csv, &summary);
    if (s != D2L_OK) return report_error("bench", s);
    std::cout << take(csv);
    const auto j = nlohmann::json::parse(take(summary));
    std::fprintf(stderr, "speedup=%.3f unmerged_products_per_module=%g merged_products_per_module=%g\n",
                 j["speedup"].get<double>(), j["unmerged_products_per_module"].get<double>(),
                 j["merged_products_per_module"].get<double>());
    return kExitOk;
  }
  return kExitUsage;
}
