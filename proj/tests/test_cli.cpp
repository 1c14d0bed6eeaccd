#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const fs::path kTmp = D2LORA_TEST_TMP;

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Result run(const std::string& args, const std::string& env = "") {
  fs::create_directories(kTmp);
  const fs::path out = kTmp / "stdout.txt", err = kTmp / "stderr.txt";
  const std::string cmd =
      env + " " + std::string(D2LORA_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

fs::path write_config(const std::string& name, const std::string& body) {
  fs::create_directories(kTmp);
  const fs::path p = kTmp / name;
  std::ofstream(p) << body;
  return p;
}

const char* kSmall = R"({
  "task": {"d_in": 16, "d_out": 16, "rank_gap": 4, "n": 128, "n_holdout": 16},
  "optim": {"lr": 0.005, "warmup_steps": 5},
  "run": {"epochs": 3, "batch": 8, "accum": 2, "seed": 7}
})";

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(run("").code == 2);
  CHECK(run("frobnicate").code == 2);
  CHECK(run("train --config x.json").code == 2);
  CHECK(run("bench --dim notanumber").code == 2);
  CHECK(run("--help").code == 0);
}

TEST_CASE("train: missing config exits 2 naming the path") {
  const std::string path = (kTmp / "no_such_config.json").string();
  auto r = run("train --config " + path + " --out " + (kTmp / "o").string());
  CHECK(r.code == 2);
  CHECK(r.err.find(path) != std::string::npos);
}

TEST_CASE("train: unknown key exits 2") {
  auto cfg = write_config("typo.json", R"({"adapter": {"rank_pluss": 4}})");
  auto r = run("train --config " + cfg.string() + " --out " + (kTmp / "o").string());
  CHECK(r.code == 2);
  CHECK(r.err.find("rank_pluss") != std::string::npos);
}

TEST_CASE("train: outputs, magic and byte-identical reruns") {
  auto cfg = write_config("small.json", kSmall);
  const fs::path a = kTmp / "run_a", b = kTmp / "run_b";
  fs::remove_all(a);
  fs::remove_all(b);
  auto ra = run("train --config " + cfg.string() + " --out " + a.string());
  REQUIRE(ra.code == 0);
  CHECK(ra.out.find("final_loss") != std::string::npos);
  REQUIRE(run("train --config " + cfg.string() + " --out " + b.string()).code == 0);
  for (const char* f : {"report.csv", "trace.csv", "adapter.d2la", "config.json"}) {
    CAPTURE(f);
    REQUIRE(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
  CHECK(slurp(a / "adapter.d2la").substr(0, 4) == "D2LA");
  CHECK(slurp(a / "report.csv").rfind("variant,seed,steps,final_loss,sigma_diff,trainable_params,clamp_events,wall_ms\n",
                                      0) == 0);
  CHECK(slurp(a / "trace.csv").rfind("step,loss,lr,clamp_events,rolling_sigma\n", 0) == 0);
  for (const auto& e : fs::directory_iterator(a)) CHECK(e.path().extension() != ".tmp");
}

TEST_CASE("merge: merged checkpoint, second merge rejected") {
  auto cfg = write_config("small.json", kSmall);
  const fs::path dir = kTmp / "merge_run";
  fs::remove_all(dir);
  REQUIRE(run("train --config " + cfg.string() + " --out " + dir.string()).code == 0);
  const auto merged = dir / "merged.d2la";
  CHECK(run("merge --ckpt " + (dir / "adapter.d2la").string() + " --out " + merged.string()).code == 0);
  const std::string bytes = slurp(merged);
  CHECK(bytes.substr(0, 4) == "D2LA");
  CHECK(bytes.find("\"merged\":true") != std::string::npos);
  CHECK(bytes.size() < slurp(dir / "adapter.d2la").size());
  CHECK(run("merge --ckpt " + merged.string() + " --out " + (dir / "m2.d2la").string()).code == 2);
  CHECK(run("merge --ckpt " + (dir / "missing.d2la").string() + " --out " + (dir / "m3.d2la").string()).code == 2);
}

TEST_CASE("train: synth_classify writes a net checkpoint") {
  auto cfg = write_config("net.json", R"({
    "task": {"kind": "synth_classify", "embed_dim": 8, "n": 64, "n_holdout": 8},
    "optim": {"lr": 0.01, "warmup_steps": 2},
    "run": {"epochs": 2, "batch": 8, "accum": 1, "seed": 2}
  })");
  const fs::path dir = kTmp / "net_run";
  fs::remove_all(dir);
  REQUIRE(run("train --config " + cfg.string() + " --out " + dir.string()).code == 0);
  CHECK(slurp(dir / "net.d2ln").substr(0, 4) == "D2LN");
  CHECK(run("merge --ckpt " + (dir / "net.d2ln").string() + " --out " + (dir / "merged.d2ln").string()).code == 0);
}

TEST_CASE("compare: header, 3 x N rows, parameter arithmetic") {
  auto cfg = write_config("small.json", kSmall);
  auto r = run("compare --config " + cfg.string() + " --seeds 3");
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("variant,seed,steps,final_loss,sigma_diff,trainable_params,clamp_events,wall_ms\n", 0) == 0);
  CHECK(count_lines(r.out) == 1 + 9);
  // rank 4 + 4 on 16 x 16: LoRA 4 * 32, D2-LoRA 8 * 32
  CHECK(r.out.find("\nlora,7,") != std::string::npos);
  CHECK(r.out.find(",128,") != std::string::npos);
  CHECK(r.out.find(",256,") != std::string::npos);
  CHECK(r.err.find("d2lora") != std::string::npos);
  CHECK(run("compare --config " + cfg.string() + " --seeds 3").out == r.out);
  CHECK(run("compare --config " + cfg.string() + " --seeds 2").code == 2);
}

TEST_CASE("verify: exit codes") {
  auto ok = run("verify --suite tangent_orthogonality --seed 1");
  CHECK(ok.code == 0);
  CHECK(ok.out.find("\"pass\": true") != std::string::npos);
  CHECK(run("verify --suite nonsense").code == 2);
  CHECK(run("verify --suite norm_preservation --seed 1", "D2LORA_VERIFY_SCALE=0").code == 1);
}

TEST_CASE("bench: zero iterations prints only the header") {
  auto r = run("bench --dim 16 --batch 2 --iters 0");
  CHECK(r.code == 0);
  CHECK(r.out == "iter,unmerged_ms,merged_ms\n");
  auto t = run("bench --dim 32 --batch 2 --iters 2");
  CHECK(t.code == 0);
  CHECK(count_lines(t.out) == 3);
  CHECK(t.err.find("merged_products_per_module=1") != std::string::npos);
}
