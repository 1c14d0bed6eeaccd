// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "commands.hpp"
#include "config.hpp"
#include "train.hpp"
#include "verify.hpp"

namespace fs = std::filesystem;
using namespace d2lora;

namespace {

const fs::path kTmp = D2LORA_TEST_TMP;
const fs::path kConfigs = D2LORA_CONFIG_DIR;
constexpr std::uint64_t kSeed = 20260101;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int failures = 0;

void criterion(int id, const char* name, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("%s  %2d %-24s %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), s);
  std::fflush(stdout);
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Runs a verify check and enforces a wall-clock budget.
Outcome property(const std::string& name, std::size_t index, double budget_s, const char* stat) {
  VerifyOptions o;
  o.seed = derive_seed(kSeed, index);
  const auto t0 = std::chrono::steady_clock::now();
  CheckReport r = run_check(name, o);
  const double t = elapsed_s(t0);
  const bool in_time = budget_s <= 0 || t < budget_s;
  std::string d = fmt("trials=%zu %s=%.3g threshold=%.3g", r.trials, stat, r.max_slack, r.threshold);
  if (budget_s > 0) d += fmt(" runtime=%.2fs<%.0fs", t, budget_s);
  return {r.pass && in_time, d + " " + r.details.dump()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int sh(const std::string& cmd) {
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string cli() { return D2LORA_CLI; }

struct Comparison {
  std::vector<VariantRow> rows;
  std::vector<double> lora_2r_final;
};

// Default task (configs/toy.json) over 5 seeds: the three standard variants
// plus LoRA at rank 2r with the same alpha / r scale.
const Comparison& default_comparison() {
  static const Comparison c = [] {
    CliConfig cfg = load_config((kConfigs / "toy.json").string());
    const std::uint64_t seeds[] = {0, 1, 2, 3, 4};
    Comparison out;
    out.rows = compare_variants(cfg.task, seeds, cfg.adapter, cfg.optim, cfg.run, worker_threads());
    out.lora_2r_final.resize(5);
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < 5; ++i) {
      pool.emplace_back([&, i] {
        TaskSpec t = cfg.task;
        AdapterConfig a = cfg.adapter;
        RunConfig r = cfg.run;
        t.seed = a.seed = r.seed = seeds[i];
        a.rank_plus = cfg.adapter.rank_plus + cfg.adapter.rank_minus;
        a.alpha = cfg.adapter.scale() * static_cast<double>(a.rank_plus);
        a.projection_enabled = false;
        a.minus_enabled = false;
        out.lora_2r_final[i] = run_task(t, a, cfg.optim, r).report.final_loss;
      });
    }
    for (auto& th : pool) th.join();
    return out;
  }();
  return c;
}

double median_of(const std::vector<VariantRow>& rows, const std::string& variant, double VariantRow::*field) {
  std::vector<double> v;
  for (const auto& r : rows)
    if (r.variant == variant) v.push_back(r.*field);
  return median(v);
}

}  // namespace

int main() {
  fs::create_directories(kTmp);
  std::printf("acceptance seed %llu, threads %zu\n", static_cast<unsigned long long>(kSeed), worker_threads());

  criterion(1, "norm_preservation", [] { return property("norm_preservation", 1, 10, "max_rel_dev"); });
  criterion(2, "merge_equivalence", [] { return property("merge_equivalence", 2, 10, "max_rel_gap"); });
  criterion(3, "gradients", [] { return property("gradients", 3, 60, "max_rel_err"); });
  criterion(4, "rank_expressivity", [] { return property("rank", 4, 30, "non_rank8_fraction"); });
  criterion(5, "lora_reduction", [] { return property("lora_reduction", 5, 0, "max_abs_err"); });
  criterion(6, "minus_equivalence", [] { return property("minus_equivalence", 6, 0, "max_loss_gap"); });
  criterion(7, "lipschitz", [] { return property("lipschitz", 7, 0, "max_ratio_to_bound"); });
  criterion(8, "branch_energy", [] { return property("branch_energy", 8, 0, "max_z"); });

  criterion(9, "expressivity_in_training", [] {
    const auto t0 = std::chrono::steady_clock::now();
    const auto& c = default_comparison();
    const double d2 = median_of(c.rows, "d2lora", &VariantRow::final_loss);
    const double lora = median_of(c.rows, "lora", &VariantRow::final_loss);
    const double lora2 = median(c.lora_2r_final);
    const double t = elapsed_s(t0);
    const double ratio = d2 / lora;
    const double match = std::max(lora2 / d2, d2 / lora2);
    const bool ok = ratio <= 0.5 && match <= 2.0 && t < 300;
    return Outcome{ok, fmt("median MSE d2lora(r)=%.4g lora(r)=%.4g ratio=%.3f<=0.5 lora(2r)=%.4g "
                           "match=%.3f<=2 runtime=%.1fs<300s",
                           d2, lora, ratio, lora2, match, t)};
  });

  criterion(10, "stability_direction", [] {
    const auto& c = default_comparison();
    const double d2 = median_of(c.rows, "d2lora", &VariantRow::sigma_diff);
    const double lora = median_of(c.rows, "lora", &VariantRow::sigma_diff);
    return Outcome{d2 <= lora, fmt("median sigma_diff d2lora=%.4g <= lora=%.4g (reduction %.1f%%)", d2, lora,
                                   100.0 * (1.0 - d2 / lora))};
  });

  criterion(11, "merge_throughput", [] {
    BenchResult b = cmd_bench(512, 64, 5);
    const bool ok = b.speedup > 1.0 && b.merged_products_per_module == 1.0;
    return Outcome{ok, fmt("dim=512 batch=64 speedup=%.3f>1 products/module unmerged=%g merged=%g==1", b.speedup,
                           b.unmerged_products_per_module, b.merged_products_per_module)};
  });

  criterion(12, "determinism", [] {
    std::vector<std::string> mismatched;
    std::size_t compared = 0;
    auto same = [&](const fs::path& a, const fs::path& b, const std::string& label) {
      ++compared;
      if (slurp(a) != slurp(b)) mismatched.push_back(label);
    };
    const fs::path root = kTmp / "determinism";
    fs::remove_all(root);
    fs::create_directories(root);
    for (const char* cfg : {"toy.json", "classify.json"}) {
      const std::string config = (kConfigs / cfg).string();
      const fs::path a = root / (std::string(cfg) + ".a"), b = root / (std::string(cfg) + ".b");
      for (const auto& dir : {a, b}) {
        if (sh(cli() + " train --config " + config + " --out " + dir.string() + " >/dev/null 2>&1") != 0) {
          return Outcome{false, std::string("train failed for ") + cfg};
        }
      }
      const std::string ckpt = fs::exists(a / "adapter.d2la") ? "adapter.d2la" : "net.d2ln";
      for (const std::string& f : std::vector<std::string>{"report.csv", "trace.csv", "config.json", ckpt}) 
        same(a / f, b / f, cfg + ("/" + f));
      for (const auto& dir : {a, b}) {
        if (sh(cli() + " merge --ckpt " + (dir / ckpt).string() + " --out " + (dir / ("merged." + ckpt)).string() +
               " >/dev/null 2>&1") != 0) {
          return Outcome{false, std::string("merge failed for ") + cfg};
        }
      }
      same(a / ("merged." + ckpt), b / ("merged." + ckpt), cfg + ("/merged." + ckpt));
    }
    const std::string toy = (kConfigs / "toy.json").string();
    for (const char* out : {"compare_a.csv", "compare_b.csv"}) {
      if (sh(cli() + " compare --config " + toy + " --seeds 3 >" + (root / out).string() + " 2>/dev/null") != 0) {
        return Outcome{false, "compare failed"};
      }
    }
    same(root / "compare_a.csv", root / "compare_b.csv", "compare.csv");
    std::string d = fmt("%zu CLI outputs compared byte-for-byte", compared);
    for (const auto& m : mismatched) d += " mismatch:" + m;
    return Outcome{mismatched.empty(), d};
  });

  std::printf("%s: %d of 12 criteria failed\n", failures ? "FAILED" : "ALL PASSED", failures);
  return failures ? 1 : 0;
}
