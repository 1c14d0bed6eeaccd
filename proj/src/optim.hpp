// Copyright 2026 The d2lora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "linalg.hpp"

namespace d2lora {

struct OptimConfig {
  double lr = 5e-5;
  std::size_t warmup_steps = 100;
  /// 0 means "derive from the run length".
  std::size_t total_steps = 0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  double lr_floor_ratio = 0.1;
  bool tangent_projection = false;

  /// Checks everything except total_steps, which may still be unresolved.
  void validate() const;
  bool operator==(const OptimConfig&) const = default;
};

/// Linear warmup from 0 to lr, then cosine decay to lr_floor_ratio * lr at
/// total_steps (held there afterwards).
double lr_at(std::size_t step, const OptimConfig& cfg);

/// One trainable tensor: its values and the gradient to apply.
struct ParamSlot {
  std::span<double> value;
  std::span<double> grad;
  bool decay = true;
};

double global_norm(std::span<const ParamSlot> slots);

/// Scales every gradient by max_norm / g when the global L2 norm g exceeds
/// max_norm. Returns the applied scale (1 when untouched).
double clip_global_norm(std::span<ParamSlot> slots, double max_norm);

/// Decoupled-weight-decay Adam with bias correction.
class AdamW {
 public:
  explicit AdamW(OptimConfig cfg) : cfg_(cfg) {}

  /// Applies one update at learning rate `lr`. Slot layout must be identical
  /// across calls.
  void step(std::span<ParamSlot> slots, double lr);
  /// Uses lr_at(step_count()).
  void step(std::span<ParamSlot> slots) { step(slots, lr_at(step_, cfg_)); }

  std::size_t step_count() const { return step_; }
  const OptimConfig& config() const { return cfg_; }
  /// Number of doubles held as moment state.
  std::size_t state_size() const;

 private:
  OptimConfig cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t step_ = 0;
};

/// g - (u.g / |u|^2) u. Throws NumericError for u = 0.
Vector tangent_project(std::span<const double> u, std::span<const double> g);

}  // namespace d2lora
