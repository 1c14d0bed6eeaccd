// Copyright 2026 The d2lora Authors
// SPDX-License-Identifier: Apache-2.0

#include "commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <thread>

#include "checkpoint.hpp"
#include "errors.hpp"
#include "model.hpp"

namespace d2lora {

std::size_t worker_threads() {
  std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  if (const char* cap = std::getenv("D2LORA_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(cap, &end, 10);
    if (end != cap && *end == '\0' && v > 0) n = std::min(n, static_cast<std::size_t>(v));
  }
  return n;
}

namespace {

std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string trace_csv(const TrainReport& report) {
  std::string out = "step,loss,lr,clamp_events,rolling_sigma\n";
  for (std::size_t t = 0; t < report.loss_trace.size(); ++t) {
    out += std::to_string(t) + ',' + fmt_double(report.loss_trace[t]) + ',' + fmt_double(report.lr_trace[t]) + ',' +
           std::to_string(report.clamp_per_step[t]) + ',' + fmt_double(report.rolling_sigma[t]) + '\n';
  }
  return out;
}

TrainOutputs cmd_train(const CliConfig& cfg, const std::string& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory: " + out_dir);
  const std::filesystem::path dir(out_dir);

  TaskRun run = run_task(cfg.task, cfg.adapter, cfg.optim, cfg.run);
  TrainOutputs out;
  out.report = run.report;
  out.report_csv = (dir / "report.csv").string();
  out.trace_csv = (dir / "trace.csv").string();
  out.config_json = (dir / "config.json").string();

  const VariantRow row = to_row(run.report);
  write_file_atomic(out.report_csv, to_csv(std::span<const VariantRow>(&row, 1)));
  write_file_atomic(out.trace_csv, trace_csv(run.report));
  write_file_atomic(out.config_json, to_json(cfg).dump(2) + "\n");
  if (auto* layer = std::get_if<AdapterLayer>(&run.model)) {
    out.checkpoint = (dir / "adapter.d2la").string();
    write_file_atomic(out.checkpoint, encode_layer(*layer));
  } else {
    out.checkpoint = (dir / "net.d2ln").string();
    write_file_atomic(out.checkpoint, encode_net(std::get<ToyNet>(run.model)));
  }
  return out;
}

std::vector<VariantRow> cmd_compare(const CliConfig& cfg, std::size_t n_seeds, std::size_t threads) {
  if (n_seeds < 3) throw ConfigError("--seeds must be >= 3");
  std::vector<std::uint64_t> seeds(n_seeds);
  for (std::size_t i = 0; i < n_seeds; ++i) seeds[i] = cfg.run.seed + i;
  return compare_variants(cfg.task, seeds, cfg.adapter, cfg.optim, cfg.run, threads);
}

SuiteReport cmd_verify(const std::string& suite, std::uint64_t seed, double threshold_scale) {
  if (!(threshold_scale >= 0.0)) throw ConfigError("threshold scale must be >= 0");
  VerifyOptions opt;
  opt.seed = seed;
  opt.threshold_scale = threshold_scale;
  return run_suite(suite, opt);
}

void cmd_merge(const std::string& in_path, const std::string& out_path) {
  const std::string bytes = read_file(in_path);
  const std::string magic = sniff_magic(bytes);
  if (magic == "D2LA") {
    auto rec = decode_layer(bytes);
    if (rec.kind != CheckpointKind::adapter) throw StateError("checkpoint is already merged or has no adapter");
    AdapterLayer layer = layer_from_record(std::move(rec));
    layer.merge();
    write_file_atomic(out_path, encode_layer(layer));
  } else if (magic == "D2LN") {
    ToyNet net = decode_net(bytes);
    if (net.adapted_count() == 0) throw StateError("net checkpoint has no unmerged adapters");
    net.merge_all();
    write_file_atomic(out_path, encode_net(net));
  } else {
    throw FormatError("not a checkpoint: " + in_path);
  }
}

std::string BenchResult::to_csv() const {
  std::string out = "iter,unmerged_ms,merged_ms\n";
  char buf[128];
  for (std::size_t i = 0; i < unmerged_ms.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f\n", i, unmerged_ms[i], merged_ms[i]);
    out += buf;
  }
  return out;
}

BenchResult cmd_bench(std::size_t dim, std::size_t batch, std::size_t iters) {
  if (dim < 8 || batch == 0) throw ConfigError("bench needs dim >= 8 and batch >= 1");
  constexpr std::size_t kSeqLen = 8;
  AdapterConfig cfg;
  ToyNet unmerged(dim, 4, kSeqLen, 0);
  unmerged.inject_adapters({"q", "k", "v", "o"}, cfg);
  // Nonzero B so the merged weights differ from W0.
  Rng rng(derive_seed(0, streams::kData));
  for (auto& m : unmerged.modules()) {
    if (!m.adapter) continue;
    auto& f = m.adapter->mutable_factors();
    f.b_plus = gaussian(f.b_plus.rows(), f.b_plus.cols(), 0.01, rng);
    f.b_minus = gaussian(f.b_minus.rows(), f.b_minus.cols(), 0.01, rng);
  }
  ToyNet merged = unmerged;
  merged.merge_all();
  const Matrix tokens = gaussian(batch * kSeqLen, dim, 1.0, rng);

  BenchResult res;
  res.adapted_modules = unmerged.adapted_count();
  auto products_per_module = [&](ToyNet& net) {
    net.reset_matmul_counts();
    (void)net.forward(tokens, Mode::eval);
    std::uint64_t total = 0;
    for (const auto& m : net.modules())
      if (m.adapter) total += m.adapter->matmul_count();
    return double(total) / double(net.adapted_count());
  };
  res.unmerged_products_per_module = products_per_module(unmerged);
  res.merged_products_per_module = products_per_module(merged);

  using clock = std::chrono::steady_clock;
  auto time_ms = [&](ToyNet& net) {
    const auto t0 = clock::now();
    auto out = net.forward(tokens, Mode::eval);
    const auto t1 = clock::now();
    if (!std::isfinite(out.logits(0, 0))) throw NumericError("bench produced non-finite output");
    return std::chrono::duration<double, std::milli>(t1 - t0).count();
  };
  for (std::size_t i = 0; i < iters; ++i) {
    res.unmerged_ms.push_back(time_ms(unmerged));
    res.merged_ms.push_back(time_ms(merged));
  }
  if (iters == 0) return res;
  const double mu = median(res.unmerged_ms);
  const double mm = median(res.merged_ms);
  res.speedup = mm > 0.0 ? mu / mm : 0.0;
  return res;
}

}  // namespace d2lora
