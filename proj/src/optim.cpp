// Copyright 2026 The d2lora Authors
// SPDX-License-Identifier: Apache-2.0

#include "optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "errors.hpp"

namespace d2lora {

void OptimConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
  if (!(beta1 > 0.0 && beta1 < beta2 && beta2 < 1.0)) throw ConfigError("require 0 < beta1 < beta2 < 1");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(lr_floor_ratio > 0.0 && lr_floor_ratio <= 1.0)) throw ConfigError("lr_floor_ratio must be in (0, 1]");
}

double lr_at(std::size_t step, const OptimConfig& cfg) {
  if (cfg.total_steps <= cfg.warmup_steps) {
    throw ConfigError("total_steps (" + std::to_string(cfg.total_steps) + ") must exceed warmup_steps (" +
                      std::to_string(cfg.warmup_steps) + ")");
  }
  if (step < cfg.warmup_steps) {
    return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  const double lr_min = cfg.lr_floor_ratio * cfg.lr;
  const double t = static_cast<double>(step - cfg.warmup_steps);
  const double span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  if (t >= span) return lr_min;
  return lr_min + 0.5 * (cfg.lr - lr_min) * (1.0 + std::cos(std::numbers::pi * t / span));
}

double global_norm(std::span<const ParamSlot> slots) {
  double sq = 0.0;
  for (const auto& s : slots) sq += dot(s.grad, s.grad);
  return std::sqrt(sq);
}

double clip_global_norm(std::span<ParamSlot> slots, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip max_norm must be > 0");
  const double g = global_norm(slots);
  if (!(g > max_norm)) return 1.0;
  const double scale = max_norm / g;
  for (auto& s : slots)
    for (double& v : s.grad) v *= scale;
  return scale;
}

void AdamW::step(std::span<ParamSlot> slots, double lr) {
  if (m_.empty()) {
    for (const auto& s : slots) {
      m_.emplace_back(s.value.size(), 0.0);
      v_.emplace_back(s.value.size(), 0.0);
    }
  }
  if (m_.size() != slots.size()) throw ShapeError("AdamW: parameter layout changed between steps");
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < slots.size(); ++i) {
    auto& s = slots[i];
    auto& m = m_[i];
    auto& v = v_[i];
    if (m.size() != s.value.size() || s.grad.size() != s.value.size()) {
      throw ShapeError("AdamW: parameter shape changed between steps");
    }
    const double decay = s.decay ? 1.0 - lr * cfg_.weight_decay : 1.0;
    for (std::size_t k = 0; k < m.size(); ++k) {
      const double g = s.grad[k];
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g;
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      s.value[k] = s.value[k] * decay - lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
    }
  }
}

std::size_t AdamW::state_size() const {
  std::size_t n = 0;
  for (const auto& m : m_) n += 2 * m.size();
  return n;
}

Vector tangent_project(std::span<const double> u, std::span<const double> g) {
  if (u.size() != g.size()) throw ShapeError("tangent_project: length mismatch");
  const double uu = dot(u, u);
  if (uu == 0.0) throw NumericError("tangent_project: zero reference vector");
  const double radial = dot(u, g) / uu;
  Vector out(g.begin(), g.end());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] -= radial * u[k];
  return out;
}

}  // namespace d2lora
