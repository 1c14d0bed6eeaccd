// Copyright 2026 The d2lora Authors
// SPDX-License-Identifier: Apache-2.0

#include "train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <thread>

#include "errors.hpp"

namespace d2lora {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx, std::size_t group = 1) {
  Matrix out(idx.size() * group, m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t g = 0; g < group; ++g) {
      auto src = m.row(idx[i] * group + g);
      std::copy(src.begin(), src.end(), out.row(i * group + g).begin());
    }
  }
  return out;
}

// Gradient accumulator shaped like one adapter's factors.
struct GradBuffer {
  Matrix a_plus, b_plus, a_minus, b_minus;
  double tau = 0.0;

  explicit GradBuffer(const AdapterFactors& f)
      : a_plus(f.a_plus.rows(), f.a_plus.cols()),
        b_plus(f.b_plus.rows(), f.b_plus.cols()),
        a_minus(f.a_minus.rows(), f.a_minus.cols()),
        b_minus(f.b_minus.rows(), f.b_minus.cols()) {}

  void zero() {
    a_plus.fill(0.0);
    b_plus.fill(0.0);
    a_minus.fill(0.0);
    b_minus.fill(0.0);
    tau = 0.0;
  }

  void add(const GradientBundle& g, double w) {
    auto acc = [w](Matrix& dst, const Matrix& src) {
      auto d = dst.values();
      auto s = src.values();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += w * s[i];
    };
    acc(a_plus, g.d_a_plus);
    acc(b_plus, g.d_b_plus);
    acc(a_minus, g.d_a_minus);
    acc(b_minus, g.d_b_minus);
    if (g.d_tau) tau += w * *g.d_tau;
  }
};

void append_slots(std::vector<ParamSlot>& slots, AdapterLayer& layer, GradBuffer& buf) {
  auto& f = layer.mutable_factors();
  slots.push_back({f.a_plus.values(), buf.a_plus.values(), true});
  slots.push_back({f.b_plus.values(), buf.b_plus.values(), true});
  slots.push_back({f.a_minus.values(), buf.a_minus.values(), true});
  slots.push_back({f.b_minus.values(), buf.b_minus.values(), true});
  if (layer.config().tau_trainable) slots.push_back({std::span<double>(&f.tau, 1), std::span<double>(&buf.tau, 1), false});
}

std::size_t count_clamped(const std::vector<bool>& flags) {
  return static_cast<std::size_t>(std::count(flags.begin(), flags.end(), true));
}

struct MicroResult {
  double loss = 0.0;
  std::size_t clamps = 0;
  double radial = 0.0;
};

class Trainee {
 public:
  virtual ~Trainee() = default;
  virtual std::size_t samples() const = 0;
  virtual void zero_grad() = 0;
  virtual MicroResult micro_step(std::span<const std::size_t> idx, double weight, BackwardOptions opts) = 0;
  virtual std::vector<ParamSlot> slots() = 0;
  virtual double eval_loss(bool holdout) = 0;
  virtual std::size_t trainable() const = 0;
};

class LayerTrainee final : public Trainee {
 public:
  LayerTrainee(AdapterLayer& layer, const TeacherStudentData& data)
      : layer_(layer), data_(data), buf_(layer.factors()) {}

  std::size_t samples() const override { return data_.x.rows(); }
  void zero_grad() override { buf_.zero(); }

  MicroResult micro_step(std::span<const std::size_t> idx, double weight, BackwardOptions opts) override {
    Matrix xb = gather_rows(data_.x, idx);
    Matrix tb = gather_rows(data_.y, idx);
    auto fr = layer_.forward(xb, Mode::train);
    MicroResult r;
    r.loss = mse(fr.y, tb);
    Matrix dy = fr.y - tb;
    dy *= 2.0 / static_cast<double>(dy.size());
    auto br = layer_.backward(fr.cache, dy, opts);
    buf_.add(br.grads, weight);
    r.clamps = count_clamped(fr.cache.clamp_active);
    r.radial = br.max_radial_cosine;
    return r;
  }

  std::vector<ParamSlot> slots() override {
    std::vector<ParamSlot> s;
    append_slots(s, layer_, buf_);
    return s;
  }

  double eval_loss(bool holdout) override {
    const Matrix& x = holdout ? data_.x_holdout : data_.x;
    const Matrix& y = holdout ? data_.y_holdout : data_.y;
    if (x.rows() == 0) return kNaN;
    return eval_layer_loss(layer_, x, y);
  }

  std::size_t trainable() const override { return layer_.count_parameters().trainable; }

 private:
  AdapterLayer& layer_;
  const TeacherStudentData& data_;
  GradBuffer buf_;
};

class NetTrainee final : public Trainee {
 public:
  NetTrainee(ToyNet& net, const ClassifyData& data) : net_(net), data_(data) {
    for (auto& m : net_.modules()) {
      if (m.adapter) {
        layers_.push_back(&m);
        bufs_.emplace_back(m.adapter->factors());
      }
    }
    if (layers_.empty()) throw ConfigError("train_net: no adapters injected");
  }

  std::size_t samples() const override { return data_.labels.size(); }
  void zero_grad() override {
    for (auto& b : bufs_) b.zero();
  }

  MicroResult micro_step(std::span<const std::size_t> idx, double weight, BackwardOptions) override {
    Matrix tokens = gather_rows(data_.tokens, idx, net_.seq_len());
    std::vector<int> labels;
    for (auto i : idx) labels.push_back(data_.labels[i]);
    auto fr = net_.forward(tokens, Mode::train);
    Matrix d_logits;
    MicroResult r;
    r.loss = softmax_cross_entropy(fr.logits, labels, &d_logits);
    auto br = net_.backward(fr.cache, d_logits);
    std::size_t k = 0;
    for (std::size_t i = 0; i < net_.modules().size(); ++i) {
      if (!net_.modules()[i].adapter) continue;
      bufs_[k++].add(*br.grads[i], weight);
      r.clamps += count_clamped(fr.cache.modules[i].adapter->clamp_active);
    }
    return r;
  }

  std::vector<ParamSlot> slots() override {
    std::vector<ParamSlot> s;
    for (std::size_t k = 0; k < layers_.size(); ++k) append_slots(s, *layers_[k]->adapter, bufs_[k]);
    return s;
  }

  double eval_loss(bool holdout) override {
    const Matrix& t = holdout ? data_.tokens_holdout : data_.tokens;
    const auto& l = holdout ? data_.labels_holdout : data_.labels;
    if (l.empty()) return kNaN;
    auto fr = net_.forward(t, Mode::eval);
    return softmax_cross_entropy(fr.logits, l, nullptr);
  }

  std::size_t trainable() const override { return net_.count_parameters().trainable; }

 private:
  ToyNet& net_;
  const ClassifyData& data_;
  std::vector<LinearModule*> layers_;
  std::vector<GradBuffer> bufs_;
};

TrainReport run_loop(Trainee& t, OptimConfig optim, const RunConfig& run) {
  if (run.batch == 0 || run.accum == 0) throw ConfigError("batch and accum must be >= 1");
  const std::size_t n = t.samples();
  if (n < run.batch * run.accum) throw ConfigError("sample count must be >= batch * accum");
  const std::size_t spe = n / (run.batch * run.accum);
  const std::size_t total = planned_steps(n, run);
  if (optim.total_steps == 0) optim.total_steps = total;
  optim.validate();
  (void)lr_at(0, optim);  // rejects total_steps <= warmup_steps up front

  TrainReport rep;
  rep.seed = run.seed;
  rep.trainable_params = t.trainable();
  rep.initial_loss = t.eval_loss(false);

  Rng shuffle(derive_seed(run.seed, streams::kShuffle));
  std::vector<std::size_t> perm(n);
  std::size_t pos = 0;
  AdamW adam(optim);
  BackwardOptions opts{optim.tangent_projection};
  const auto t0 = std::chrono::steady_clock::now();

  for (std::size_t step = 0; step < total; ++step) {
    if (step % spe == 0) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[shuffle.below(i + 1)]);
      pos = 0;
      rep.clamp_per_epoch.push_back(0);
    }
    t.zero_grad();
    double loss = 0.0;
    std::size_t clamps = 0;
    for (std::size_t a = 0; a < run.accum; ++a) {
      // Batch membership comes from the shuffle; rows are visited in index order.
      std::sort(perm.begin() + pos, perm.begin() + pos + run.batch);
      std::span<const std::size_t> idx(perm.data() + pos, run.batch);
      pos += run.batch;
      auto r = t.micro_step(idx, 1.0 / static_cast<double>(run.accum), opts);
      loss += r.loss / static_cast<double>(run.accum);
      clamps += r.clamps;
      rep.max_radial_cosine = std::max(rep.max_radial_cosine, r.radial);
    }
    if (!std::isfinite(loss)) {
      throw NumericError("non-finite loss at step " + std::to_string(step) + " (clamp events this step: " +
                         std::to_string(clamps) + ", total: " + std::to_string(rep.clamp_events) + ")");
    }
    auto slots = t.slots();
    clip_global_norm(slots, optim.clip_norm);
    const double lr = lr_at(step, optim);
    adam.step(slots, lr);

    rep.loss_trace.push_back(loss);
    rep.lr_trace.push_back(lr);
    rep.clamp_per_step.push_back(clamps);
    rep.clamp_per_epoch.back() += clamps;
    rep.clamp_events += clamps;
  }

  const auto t1 = std::chrono::steady_clock::now();
  if (run.record_wall_time) rep.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  rep.steps = total;
  rep.final_loss = t.eval_loss(false);
  rep.holdout_loss = t.eval_loss(true);
  rep.sigma_diff = rep.loss_trace.size() >= 3 ? volatility(rep.loss_trace) : 0.0;
  rep.rolling_sigma = rolling_volatility(rep.loss_trace, run.rolling_window);
  return rep;
}

}  // namespace

TeacherStudentData gen_teacher_student(std::size_t d_in, std::size_t d_out, std::size_t rank_gap, std::size_t n,
                                       double noise, std::uint64_t seed, std::size_t n_holdout) {
  if (d_in == 0 || d_out == 0 || n == 0) throw ConfigError("teacher_student: dims and n must be positive");
  if (rank_gap > std::min(d_in, d_out)) throw ConfigError("rank_gap must be <= min(d_in, d_out)");
  if (!(noise >= 0.0)) throw ConfigError("noise must be >= 0");
  TeacherStudentData d;
  Rng teacher(derive_seed(seed, streams::kTeacher));
  d.w0 = gaussian(d_out, d_in, 1.0 / std::sqrt(static_cast<double>(d_in)), teacher);
  d.bias.resize(d_out);
  for (double& b : d.bias) b = teacher.normal(0.1);
  d.residual = Matrix(d_out, d_in);
  if (rank_gap > 0) {
    Matrix u = gaussian(d_out, rank_gap, 1.0, teacher);
    Matrix v = gaussian(d_in, rank_gap, 1.0, teacher);
    Matrix r = matmul_nt(u, v);
    // Rescale column j by beta_j = -2 <w0_j, r_j> / |r_j|^2, the nonzero root
    // of |w0_j + beta r_j| = |w0_j|. Column scaling keeps rank(R) <= rank_gap.
    for (std::size_t j = 0; j < d_in; ++j) {
      double wr = 0.0, rr = 0.0;
      for (std::size_t i = 0; i < d_out; ++i) {
        wr += d.w0(i, j) * r(i, j);
        rr += r(i, j) * r(i, j);
      }
      const double beta = rr > 0.0 ? -2.0 * wr / rr : 0.0;
      for (std::size_t i = 0; i < d_out; ++i) d.residual(i, j) = beta * r(i, j);
    }
  }
  const Matrix teacher_w = d.w0 + d.residual;
  Rng data(derive_seed(seed, streams::kData));
  auto sample = [&](std::size_t count, Matrix& x, Matrix& y) {
    x = gaussian(count, d_in, 1.0, data);
    y = matmul_nt(x, teacher_w);
    add_row_vector(y, d.bias);
    for (double& v : y.values()) v += data.normal(noise);
  };
  sample(n, d.x, d.y);
  if (n_holdout > 0) sample(n_holdout, d.x_holdout, d.y_holdout);
  return d;
}

ClassifyData gen_synth_classify(const TaskSpec& spec) {
  if (!(spec.noise >= 0.0 && spec.noise < 1.0)) throw ConfigError("synth_classify: noise (label flip rate) must be in [0, 1)");
  ClassifyData d;
  d.net_seed = derive_seed(spec.seed, streams::kTeacher);
  ToyNet teacher(spec.embed_dim, spec.n_classes, spec.seq_len, d.net_seed);
  Rng rng(derive_seed(spec.seed, streams::kData));
  constexpr std::size_t kPerturbRank = 2;
  const double sigma = std::sqrt(0.5 / (std::sqrt(static_cast<double>(spec.embed_dim)) * std::sqrt(double(kPerturbRank))));
  for (auto& m : teacher.modules()) {
    if (m.name == "head") continue;
    Matrix u = gaussian(m.d_out(), kPerturbRank, sigma, rng);
    Matrix v = gaussian(m.d_in(), kPerturbRank, sigma, rng);
    m.weight += matmul_nt(u, v);
  }
  auto sample = [&](std::size_t count, Matrix& tokens, std::vector<int>& labels) {
    tokens = gaussian(count * spec.seq_len, spec.embed_dim, 1.0, rng);
    auto logits = teacher.forward(tokens, Mode::eval).logits;
    labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      auto r = logits.row(i);
      labels[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
      if (rng.uniform() < spec.noise) labels[i] = static_cast<int>(rng.below(spec.n_classes));
    }
  };
  sample(spec.n, d.tokens, d.labels);
  if (spec.n_holdout > 0) sample(spec.n_holdout, d.tokens_holdout, d.labels_holdout);
  return d;
}

double volatility(std::span<const double> trace) {
  if (trace.size() < 3) throw InputError("volatility needs at least 3 loss values");
  const std::size_t k = trace.size() - 1;
  double mean = 0.0;
  for (std::size_t t = 1; t < trace.size(); ++t) mean += trace[t] - trace[t - 1];
  mean /= static_cast<double>(k);
  double var = 0.0;
  for (std::size_t t = 1; t < trace.size(); ++t) {
    const double e = (trace[t] - trace[t - 1]) - mean;
    var += e * e;
  }
  return std::sqrt(var / static_cast<double>(k));
}

std::vector<double> rolling_volatility(std::span<const double> trace, std::size_t window) {
  std::vector<double> out(trace.size(), kNaN);
  if (window < 2) return out;
  for (std::size_t t = window; t < trace.size(); ++t) out[t] = volatility(trace.subspan(t - window, window + 1));
  return out;
}

std::size_t planned_steps(std::size_t n, const RunConfig& run) {
  if (run.max_steps > 0) return run.max_steps;
  const std::size_t per = run.batch * run.accum;
  return per == 0 ? 0 : run.epochs * (n / per);
}

double mse(const Matrix& y, const Matrix& target) {
  require_same_shape(y, target, "mse");
  double s = 0.0;
  auto a = y.values();
  auto b = target.values();
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

double eval_layer_loss(AdapterLayer& layer, const Matrix& x, const Matrix& y) {
  return mse(layer.forward(x, Mode::eval).y, y);
}

TrainReport train_layer(AdapterLayer& layer, const TeacherStudentData& data, OptimConfig optim, const RunConfig& run) {
  LayerTrainee t(layer, data);
  return run_loop(t, optim, run);
}

TrainReport train_net(ToyNet& net, const ClassifyData& data, OptimConfig optim, const RunConfig& run) {
  NetTrainee t(net, data);
  return run_loop(t, optim, run);
}

namespace {

std::string variant_name(const AdapterConfig& c) {
  if (!c.projection_enabled && !c.minus_active()) return "lora";
  if (c.projection_enabled && !c.minus_active()) return "dora_like";
  if (c.projection_enabled) return "d2lora";
  return "signed_lora";
}

}  // namespace

TaskRun run_task(const TaskSpec& task, const AdapterConfig& adapter, const OptimConfig& optim, const RunConfig& run) {
  if (task.kind == TaskKind::teacher_student) {
    auto data = gen_teacher_student(task.d_in, task.d_out, task.rank_gap, task.n, task.noise, task.seed, task.n_holdout);
    AdapterLayer layer(data.w0, data.bias, adapter);
    auto rep = train_layer(layer, data, optim, run);
    rep.variant = variant_name(adapter);
    return {std::move(layer), std::move(rep)};
  }
  auto data = gen_synth_classify(task);
  ToyNet net(task.embed_dim, task.n_classes, task.seq_len, data.net_seed);
  net.inject_adapters(std::set<std::string>(adapter.targets.begin(), adapter.targets.end()), adapter);
  auto rep = train_net(net, data, optim, run);
  rep.variant = variant_name(adapter);
  return {std::move(net), std::move(rep)};
}

const std::vector<Variant>& standard_variants() {
  static const std::vector<Variant> v = {
      {"lora", false, false},
      {"dora_like", true, false},
      {"d2lora", true, true},
  };
  return v;
}

VariantRow to_row(const TrainReport& r) {
  return {r.variant, r.seed, r.steps, r.final_loss, r.sigma_diff, r.trainable_params, r.clamp_events, r.wall_ms};
}

std::vector<VariantRow> compare_variants(const TaskSpec& task, std::span<const std::uint64_t> seeds,
                                         const AdapterConfig& base, const OptimConfig& optim, const RunConfig& run,
                                         std::size_t threads) {
  if (seeds.size() < 3) throw ConfigError("compare_variants needs at least 3 seeds");
  const auto& variants = standard_variants();
  const std::size_t jobs = variants.size() * seeds.size();
  std::vector<VariantRow> rows(jobs);
  std::vector<std::exception_ptr> errors(jobs);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j = next++; j < jobs; j = next++) {
      try {
        const auto& v = variants[j / seeds.size()];
        const std::uint64_t s = seeds[j % seeds.size()];
        TaskSpec t = task;
        t.seed = s;
        AdapterConfig a = base;
        a.seed = s;
        a.projection_enabled = v.projection;
        a.minus_enabled = v.minus;
        RunConfig r = run;
        r.seed = s;
        auto result = run_task(t, a, optim, r);
        rows[j] = to_row(result.report);
        rows[j].variant = v.name;
      } catch (...) {
        errors[j] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(threads, 1, jobs);
  std::vector<std::thread> pool;
  for (std::size_t i = 1; i < n_threads; ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return rows;
}

double median(std::vector<double> v) {
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const std::size_t mid = v.size() / 2;
  return v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

std::vector<VariantSummary> summarize(std::span<const VariantRow> rows) {
  std::vector<VariantSummary> out;
  std::map<std::string, std::size_t> index;
  std::vector<std::vector<double>> losses, sigmas;
  for (const auto& r : rows) {
    auto [it, inserted] = index.try_emplace(r.variant, out.size());
    if (inserted) {
      out.push_back({r.variant, 0.0, 0.0, r.trainable_params});
      losses.emplace_back();
      sigmas.emplace_back();
    }
    losses[it->second].push_back(r.final_loss);
    sigmas[it->second].push_back(r.sigma_diff);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].median_final_loss = median(losses[i]);
    out[i].median_sigma_diff = median(sigmas[i]);
  }
  return out;
}

std::string to_csv(std::span<const VariantRow> rows) {
  std::string out = kVariantCsvHeader;
  out += '\n';
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%llu,%zu,%.17g,%.17g,%zu,%zu,%.3f\n", r.variant.c_str(),
                  static_cast<unsigned long long>(r.seed), r.steps, r.final_loss, r.sigma_diff, r.trainable_params,
                  r.clamp_events, r.wall_ms);
    out += buf;
  }
  return out;
}

}  // namespace d2lora
