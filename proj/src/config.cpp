// Copyright 2026 The d2lora Authors
// SPDX-License-Identifier: Apache-2.0

#include "config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "errors.hpp"

namespace d2lora {

using nlohmann::json;

namespace {

// Reads typed fields out of one JSON object and remembers which keys were
// consumed so leftovers can be reported.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config: '" + name_ + "' must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
        if (!it->is_number_unsigned()) throw ConfigError("expected a non-negative integer");
      } else if constexpr (std::is_same_v<T, double>) {
        if (!it->is_number()) throw ConfigError("expected a number");
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("expected true or false");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError("expected a string");
      }
      out = it->get<T>();
    } catch (const std::exception& e) {
      throw ConfigError("config: " + name_ + "." + key + ": " + e.what());
    }
  }

  void read_optional(const char* key, std::optional<double>& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return;
    if (!it->is_number()) throw ConfigError("config: " + name_ + "." + key + ": expected a number or null");
    out = it->get<double>();
  }

  void read_strings(const char* key, std::vector<std::string>& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!it->is_array()) throw ConfigError("config: " + name_ + "." + key + ": expected an array of strings");
    out.clear();
    for (const auto& v : *it) {
      if (!v.is_string()) throw ConfigError("config: " + name_ + "." + key + ": expected an array of strings");
      out.push_back(v.get<std::string>());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("config: unknown key '" + name_ + "." + it.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

void read_adapter(Section& s, AdapterConfig& a) {
  s.read("rank_plus", a.rank_plus);
  s.read("rank_minus", a.rank_minus);
  s.read("alpha", a.alpha);
  s.read("tau", a.tau);
  s.read("tau_trainable", a.tau_trainable);
  s.read("epsilon", a.epsilon);
  s.read("input_dropout_p", a.input_dropout_p);
  s.read("matrix_dropout_p", a.matrix_dropout_p);
  s.read("projection_enabled", a.projection_enabled);
  s.read("minus_enabled", a.minus_enabled);
  s.read("minus_detached", a.minus_detached);
  s.read_optional("init_std_plus", a.init_std_plus);
  s.read("minus_std_ratio", a.minus_std_ratio);
  s.read_strings("targets", a.targets);
}

json adapter_body(const AdapterConfig& a) {
  return {
      {"rank_plus", a.rank_plus},
      {"rank_minus", a.rank_minus},
      {"alpha", a.alpha},
      {"tau", a.tau},
      {"tau_trainable", a.tau_trainable},
      {"epsilon", a.epsilon},
      {"input_dropout_p", a.input_dropout_p},
      {"matrix_dropout_p", a.matrix_dropout_p},
      {"projection_enabled", a.projection_enabled},
      {"minus_enabled", a.minus_enabled},
      {"minus_detached", a.minus_detached},
      {"init_std_plus", a.init_std_plus ? json(*a.init_std_plus) : json(nullptr)},
      {"minus_std_ratio", a.minus_std_ratio},
      {"targets", a.targets},
  };
}

}  // namespace

std::string task_kind_name(TaskKind kind) {
  return kind == TaskKind::teacher_student ? "teacher_student" : "synth_classify";
}

void CliConfig::resolve() {
  task.seed = run.seed;
  adapter.seed = run.seed;
  adapter.validate();
  optim.validate();
  if (run.batch == 0 || run.accum == 0) throw ConfigError("run.batch and run.accum must be >= 1");
  if (task.n < run.batch * run.accum) throw ConfigError("task.n must be >= run.batch * run.accum");
  if (task.kind == TaskKind::teacher_student) {
    if (task.rank_gap > std::min(task.d_in, task.d_out)) throw ConfigError("task.rank_gap must be <= min(d_in, d_out)");
  } else {
    if (task.n_classes < 2) throw ConfigError("task.n_classes must be >= 2");
    if (task.seq_len == 0 || task.embed_dim == 0) throw ConfigError("task.seq_len and task.embed_dim must be >= 1");
  }
}

CliConfig parse_config(std::string_view text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  CliConfig cfg;
  if (!root.is_object()) throw ConfigError("config: top level must be a JSON object");
  const json empty = json::object();
  static const std::set<std::string> kSections = {"task", "adapter", "optim", "run"};
  for (auto it = root.begin(); it != root.end(); ++it) {
    if (!kSections.count(it.key())) throw ConfigError("config: unknown section '" + it.key() + "'");
  }
  auto section = [&](const char* key) -> const json& {
    auto it = root.find(key);
    return it == root.end() ? empty : *it;
  };

  {
    Section s(section("task"), "task");
    std::string kind = task_kind_name(cfg.task.kind);
    s.read("kind", kind);
    if (kind == "teacher_student") {
      cfg.task.kind = TaskKind::teacher_student;
    } else if (kind == "synth_classify") {
      cfg.task.kind = TaskKind::synth_classify;
    } else {
      throw ConfigError("config: task.kind must be teacher_student or synth_classify, got '" + kind + "'");
    }
    s.read("d_in", cfg.task.d_in);
    s.read("d_out", cfg.task.d_out);
    s.read("rank_gap", cfg.task.rank_gap);
    s.read("embed_dim", cfg.task.embed_dim);
    s.read("n_classes", cfg.task.n_classes);
    s.read("seq_len", cfg.task.seq_len);
    s.read("n", cfg.task.n);
    s.read("n_holdout", cfg.task.n_holdout);
    s.read("noise", cfg.task.noise);
    s.finish();
  }
  {
    Section s(section("adapter"), "adapter");
    read_adapter(s, cfg.adapter);
    s.finish();
  }
  {
    Section s(section("optim"), "optim");
    auto& o = cfg.optim;
    s.read("lr", o.lr);
    s.read("warmup_steps", o.warmup_steps);
    s.read("total_steps", o.total_steps);
    s.read("weight_decay", o.weight_decay);
    s.read("beta1", o.beta1);
    s.read("beta2", o.beta2);
    s.read("adam_eps", o.adam_eps);
    s.read("clip_norm", o.clip_norm);
    s.read("lr_floor_ratio", o.lr_floor_ratio);
    s.read("tangent_projection", o.tangent_projection);
    s.finish();
  }
  {
    Section s(section("run"), "run");
    auto& r = cfg.run;
    s.read("epochs", r.epochs);
    s.read("batch", r.batch);
    s.read("accum", r.accum);
    s.read("max_steps", r.max_steps);
    s.read("seed", r.seed);
    s.read("rolling_window", r.rolling_window);
    s.read("record_wall_time", r.record_wall_time);
    s.finish();
  }
  cfg.resolve();
  return cfg;
}

CliConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

json to_json(const CliConfig& cfg) {
  const auto& t = cfg.task;
  const auto& o = cfg.optim;
  const auto& r = cfg.run;
  return {
      {"task",
       {{"kind", task_kind_name(t.kind)},
        {"d_in", t.d_in},
        {"d_out", t.d_out},
        {"rank_gap", t.rank_gap},
        {"embed_dim", t.embed_dim},
        {"n_classes", t.n_classes},
        {"seq_len", t.seq_len},
        {"n", t.n},
        {"n_holdout", t.n_holdout},
        {"noise", t.noise}}},
      {"adapter", adapter_body(cfg.adapter)},
      {"optim",
       {{"lr", o.lr},
        {"warmup_steps", o.warmup_steps},
        {"total_steps", o.total_steps},
        {"weight_decay", o.weight_decay},
        {"beta1", o.beta1},
        {"beta2", o.beta2},
        {"adam_eps", o.adam_eps},
        {"clip_norm", o.clip_norm},
        {"lr_floor_ratio", o.lr_floor_ratio},
        {"tangent_projection", o.tangent_projection}}},
      {"run",
       {{"epochs", r.epochs},
        {"batch", r.batch},
        {"accum", r.accum},
        {"max_steps", r.max_steps},
        {"seed", r.seed},
        {"rolling_window", r.rolling_window},
        {"record_wall_time", r.record_wall_time}}},
  };
}

json adapter_to_json(const AdapterConfig& cfg) {
  json j = adapter_body(cfg);
  j["seed"] = cfg.seed;
  return j;
}

AdapterConfig adapter_from_json(const json& j) {
  AdapterConfig a;
  Section s(j, "adapter");
  read_adapter(s, a);
  s.read("seed", a.seed);
  s.finish();
  a.validate();
  return a;
}

}  // namespace d2lora
