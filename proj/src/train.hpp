// Copyright 2026 The d2lora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "adapter.hpp"
#include "linalg.hpp"
#include "model.hpp"
#include "optim.hpp"

namespace d2lora {

enum class TaskKind { teacher_student, synth_classify };

struct TaskSpec {
  TaskKind kind = TaskKind::teacher_student;
  // teacher_student
  std::size_t d_in = 64;
  std::size_t d_out = 64;
  std::size_t rank_gap = 8;
  // synth_classify
  std::size_t embed_dim = 16;
  std::size_t n_classes = 4;
  std::size_t seq_len = 8;
  // shared
  std::size_t n = 512;
  std::size_t n_holdout = 128;
  double noise = 0.05;
  std::uint64_t seed = 0;

  bool operator==(const TaskSpec&) const = default;
};

struct RunConfig {
  std::size_t epochs = 40;
  std::size_t batch = 16;
  std::size_t accum = 2;
  /// Optimizer steps to run; 0 means epochs * (n / (batch * accum)).
  std::size_t max_steps = 0;
  std::uint64_t seed = 0;
  std::size_t rolling_window = 20;
  /// Wall time is the only non-deterministic output; it is written as 0
  /// unless this is set.
  bool record_wall_time = false;

  bool operator==(const RunConfig&) const = default;
};

/// Regression data y = x W_t^T + b + noise with W_t = W0 + R, R of rank
/// rank_gap and every column of W_t at the norm of the matching W0 column.
struct TeacherStudentData {
  Matrix w0;
  Vector bias;
  Matrix residual;  // R (d_out x d_in), already rescaled
  Matrix x, y;
  Matrix x_holdout, y_holdout;
};

TeacherStudentData gen_teacher_student(std::size_t d_in, std::size_t d_out, std::size_t rank_gap, std::size_t n,
                                       double noise, std::uint64_t seed, std::size_t n_holdout = 0);

/// Labels come from the frozen net with low-rank perturbations added to
/// q, k, v, o; a student with the same seed starts from the frozen net.
struct ClassifyData {
  std::uint64_t net_seed = 0;
  Matrix tokens;  // (n * seq_len) x embed_dim
  std::vector<int> labels;
  Matrix tokens_holdout;
  std::vector<int> labels_holdout;
};

ClassifyData gen_synth_classify(const TaskSpec& spec);

struct TrainReport {
  std::string variant;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  std::vector<double> loss_trace;
  std::vector<double> lr_trace;
  std::vector<std::size_t> clamp_per_step;
  std::vector<std::size_t> clamp_per_epoch;
  std::vector<double> rolling_sigma;  // NaN until the window fills
  double initial_loss = 0.0;  // eval-mode loss on the training set before step 1
  double final_loss = 0.0;    // eval-mode loss on the training set after training
  double holdout_loss = 0.0;
  double sigma_diff = 0.0;
  std::size_t clamp_events = 0;
  std::size_t trainable_params = 0;
  double wall_ms = 0.0;
  double max_radial_cosine = 0.0;
};

/// Population standard deviation of consecutive differences.
double volatility(std::span<const double> trace);
/// volatility() over each trailing window of `window` differences.
std::vector<double> rolling_volatility(std::span<const double> trace, std::size_t window);

/// Steps implied by a run over n samples.
std::size_t planned_steps(std::size_t n, const RunConfig& run);

/// MSE training of a single adapter layer against a teacher.
TrainReport train_layer(AdapterLayer& layer, const TeacherStudentData& data, OptimConfig optim, const RunConfig& run);
/// Cross-entropy training of every adapter injected into `net`.
TrainReport train_net(ToyNet& net, const ClassifyData& data, OptimConfig optim, const RunConfig& run);

double mse(const Matrix& y, const Matrix& target);
double eval_layer_loss(AdapterLayer& layer, const Matrix& x, const Matrix& y);

/// A trained artifact plus its report.
struct TaskRun {
  std::variant<AdapterLayer, ToyNet> model;
  TrainReport report;
};

/// Builds the task's data and model, injects adapters, and trains.
TaskRun run_task(const TaskSpec& task, const AdapterConfig& adapter, const OptimConfig& optim, const RunConfig& run);

struct Variant {
  std::string name;
  bool projection;
  bool minus;
};

/// LoRA (projection off, minus off), DoRA-like (projection on, minus off),
/// D2-LoRA (both on).
const std::vector<Variant>& standard_variants();

struct VariantRow {
  std::string variant;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  double final_loss = 0.0;
  double sigma_diff = 0.0;
  std::size_t trainable_params = 0;
  std::size_t clamp_events = 0;
  double wall_ms = 0.0;
};

/// Runs every standard variant for each seed s; task, adapter and run
/// seeds are all set to s. Rows are ordered by variant, then seed.
std::vector<VariantRow> compare_variants(const TaskSpec& task, std::span<const std::uint64_t> seeds,
                                         const AdapterConfig& base, const OptimConfig& optim, const RunConfig& run,
                                         std::size_t threads = 1);

struct VariantSummary {
  std::string variant;
  double median_final_loss = 0.0;
  double median_sigma_diff = 0.0;
  std::size_t trainable_params = 0;
};

std::vector<VariantSummary> summarize(std::span<const VariantRow> rows);

inline constexpr const char* kVariantCsvHeader =
    "variant,seed,steps,final_loss,sigma_diff,trainable_params,clamp_events,wall_ms";

std::string to_csv(std::span<const VariantRow> rows);
VariantRow to_row(const TrainReport& r);
double median(std::vector<double> v);

}  // namespace d2lora
