// Copyright 2026 The d2lora Authors
// SPDX-License-Identifier: Apache-2.0

#include "adapter.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "errors.hpp"

namespace d2lora {

void AdapterConfig::validate() const {
  if (!(alpha > 0.0)) throw ConfigError("alpha must be > 0");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
  if (!(tau >= 0.0)) throw ConfigError("tau must be >= 0");
  if (rank_plus < 1) throw ConfigError("rank_plus must be >= 1");
  if (!(input_dropout_p >= 0.0 && input_dropout_p < 1.0)) throw ConfigError("input_dropout_p must be in [0, 1)");
  if (!(matrix_dropout_p >= 0.0 && matrix_dropout_p < 1.0)) throw ConfigError("matrix_dropout_p must be in [0, 1)");
  if (!(minus_std_ratio > 0.0 && minus_std_ratio <= 1.0)) throw ConfigError("minus_std_ratio must be in (0, 1]");
  if (init_std_plus && !(*init_std_plus >= 0.0)) throw ConfigError("init_std_plus must be >= 0");
}

double resolved_init_std(const AdapterConfig& config, std::size_t d_in) {
  return config.init_std_plus.value_or(1.0 / std::sqrt(static_cast<double>(d_in)));
}

namespace {

// Row-wise projection in the transposed layout; shared by the free function
// and the layer so there is exactly one implementation of the map.
void project_rows(const Matrix& u_t, const Vector& m, double eps, Matrix& w_star_t, Vector& d_eps,
                  Vector& scale, std::vector<bool>& clamp) {
  const std::size_t n = u_t.rows();
  w_star_t = u_t;
  d_eps.assign(n, 0.0);
  scale.assign(n, 0.0);
  clamp.assign(n, false);
  for (std::size_t j = 0; j < n; ++j) {
    const double d = norm2(u_t.row(j));
    clamp[j] = d < eps;
    d_eps[j] = std::max(d, eps);
    scale[j] = m[j] / d_eps[j];
    for (double& v : w_star_t.row(j)) v *= scale[j];
  }
}

}  // namespace

Projection project_directional(const Matrix& w0, const Matrix& delta_w, const Vector& m, double eps) {
  require_same_shape(w0, delta_w, "project_directional");
  if (m.size() != w0.cols()) throw ShapeError("project_directional: magnitude length mismatch");
  if (!(eps > 0.0)) throw ConfigError("project_directional: eps must be > 0");
  Matrix u_t = transpose(w0 + delta_w);
  Projection p;
  Matrix w_star_t;
  Vector scale;
  project_rows(u_t, m, eps, w_star_t, p.d_eps, scale, p.clamp_active);
  p.w_star = transpose(w_star_t);
  return p;
}

Matrix directional_vjp(const Matrix& u_t, const Vector& m, double eps, const Matrix& g_t) {
  require_same_shape(u_t, g_t, "directional_vjp");
  Matrix out(u_t.rows(), u_t.cols());
  for (std::size_t j = 0; j < u_t.rows(); ++j) {
    auto u = u_t.row(j);
    auto g = g_t.row(j);
    auto o = out.row(j);
    const double d2 = dot(u, u);
    const double d = std::sqrt(d2);
    if (d >= eps) {
      const double coef = m[j] / d;
      const double radial = dot(u, g) / d2;
      for (std::size_t k = 0; k < o.size(); ++k) o[k] = coef * (g[k] - radial * u[k]);
    } else {
      const double coef = m[j] / eps;
      for (std::size_t k = 0; k < o.size(); ++k) o[k] = coef * g[k];
    }
  }
  return out;
}

AdapterLayer::AdapterLayer(Matrix w0, Vector bias, AdapterConfig config)
    : w0_(std::move(w0)), bias_(std::move(bias)), config_(std::move(config)) {
  config_.validate();
  if (w0_.empty()) throw ShapeError("base weight must be non-empty");
  if (bias_.size() != w0_.rows()) throw ShapeError("bias length must equal d_out");
  const std::size_t max_rank = std::min(d_in(), d_out());
  if (config_.rank_plus > max_rank || config_.rank_minus > max_rank) {
    throw ConfigError("adapter rank exceeds min(d_in, d_out) = " + std::to_string(max_rank));
  }
  const double std_plus = resolved_init_std(config_, d_in());
  config_.init_std_plus = std_plus;
  w0_t_ = transpose(w0_);
  m_ = column_norms(w0_);

  // A- is always drawn (even with the minus branch off) so every variant
  // consumes the same init stream.
  Rng init(derive_seed(config_.seed, streams::kInit));
  factors_.a_plus = gaussian(d_in(), config_.rank_plus, std_plus, init);
  factors_.a_minus = gaussian(d_in(), config_.rank_minus, config_.minus_std_ratio * std_plus, init);
  factors_.b_plus = Matrix(config_.rank_plus, d_out());
  factors_.b_minus = Matrix(config_.rank_minus, d_out());
  factors_.tau = config_.tau;
  dropout_rng_ = Rng(derive_seed(config_.seed, streams::kDropout));
}

AdapterLayer::AdapterLayer(Matrix w0, Vector bias, AdapterConfig config, AdapterFactors factors)
    : w0_(std::move(w0)), bias_(std::move(bias)), config_(std::move(config)), factors_(std::move(factors)) {
  config_.validate();
  if (w0_.empty()) throw ShapeError("base weight must be non-empty");
  if (bias_.size() != w0_.rows()) throw ShapeError("bias length must equal d_out");
  config_.init_std_plus = resolved_init_std(config_, d_in());
  check_factor_shapes();
  w0_t_ = transpose(w0_);
  m_ = column_norms(w0_);
  dropout_rng_ = Rng(derive_seed(config_.seed, streams::kDropout));
}

void AdapterLayer::check_factor_shapes() const {
  const auto& f = factors_;
  const std::size_t rp = config_.rank_plus;
  const std::size_t rm = config_.rank_minus;
  if (f.a_plus.rows() != d_in() || f.a_plus.cols() != rp || f.b_plus.rows() != rp ||
      f.b_plus.cols() != d_out() || f.a_minus.rows() != d_in() || f.a_minus.cols() != rm ||
      f.b_minus.rows() != rm || f.b_minus.cols() != d_out()) {
    throw ShapeError("adapter factor shapes do not match dims and ranks");
  }
}

const AdapterFactors& AdapterLayer::factors() const {
  if (merged_) throw StateError("factors are not available while merged");
  return factors_;
}

AdapterFactors& AdapterLayer::mutable_factors() {
  if (merged_) throw StateError("factors are not available while merged");
  ++epoch_;
  return factors_;
}

const AdapterFactors& AdapterLayer::live_factors() const { return merged_ ? *merge_cache_ : factors_; }

Matrix AdapterLayer::delta_w_t(const AdapterFactors& f) const {
  Matrix dwt = matmul(f.a_plus, f.b_plus);
  if (config_.minus_active()) {
    Matrix minus = matmul(f.a_minus, f.b_minus);
    minus *= f.tau;
    dwt -= minus;
  }
  dwt *= config_.scale();
  return dwt;
}

Matrix AdapterLayer::delta_w_t() const { return delta_w_t(live_factors()); }

Projection AdapterLayer::projection() const {
  Matrix dw = delta_w();
  if (!config_.projection_enabled) {
    Projection p;
    p.w_star = w0_;
    p.d_eps = column_norms(w0_ + dw);
    for (double& d : p.d_eps) d = std::max(d, config_.epsilon);
    p.clamp_active.assign(d_in(), false);
    return p;
  }
  return project_directional(w0_, dw, m_, config_.epsilon);
}

ForwardResult AdapterLayer::forward(const Matrix& x, Mode mode, Rng& rng) {
  if (x.cols() != d_in()) {
    throw ShapeError("forward: input has " + std::to_string(x.cols()) + " features, expected " +
                     std::to_string(d_in()));
  }
  if (merged_) {
    if (mode == Mode::train) throw StateError("train-mode forward on a merged layer");
    return {merged_forward(x), {}};
  }

  ForwardResult out;
  ForwardCache& c = out.cache;
  const auto& f = factors_;
  c.delta_w_t = delta_w_t(f);
  matmuls_ += config_.minus_active() ? 2 : 1;

  c.u_t = w0_t_ + c.delta_w_t;
  if (config_.projection_enabled) {
    project_rows(c.u_t, m_, config_.epsilon, c.w_star_t, c.d_eps, c.scale, c.clamp_active);
  } else {
    c.w_star_t = w0_t_;
    c.d_eps = row_norms(c.u_t);
    for (double& d : c.d_eps) d = std::max(d, config_.epsilon);
    c.scale.assign(d_in(), 1.0);
    c.clamp_active.assign(d_in(), false);
  }

  const bool train = mode == Mode::train;
  c.x = x;
  c.x_dropped = x;
  if (train && config_.input_dropout_p > 0.0) {
    const double keep_scale = 1.0 / (1.0 - config_.input_dropout_p);
    c.input_mask = Matrix(x.rows(), x.cols());
    for (double& v : c.input_mask.values()) v = rng.bernoulli_keep(config_.input_dropout_p) ? keep_scale : 0.0;
    c.x_dropped = hadamard(x, c.input_mask);
  }
  c.delta_w_t_eff = c.delta_w_t;
  if (train && config_.matrix_dropout_p > 0.0) {
    const double keep_scale = 1.0 / (1.0 - config_.matrix_dropout_p);
    c.matrix_mask = Matrix(d_in(), d_out());
    for (double& v : c.matrix_mask.values()) v = rng.bernoulli_keep(config_.matrix_dropout_p) ? keep_scale : 0.0;
    c.delta_w_t_eff = hadamard(c.delta_w_t, c.matrix_mask);
  }

  out.y = matmul(x, c.w_star_t);
  out.y += matmul(c.x_dropped, c.delta_w_t_eff);
  matmuls_ += 2;
  add_row_vector(out.y, bias_);

  c.epoch = epoch_;
  c.valid = train;
  return out;
}

BackwardResult AdapterLayer::backward(const ForwardCache& c, const Matrix& dy, BackwardOptions options) const {
  if (merged_) throw StateError("backward on a merged layer");
  if (!c.valid) throw StateError("backward requires the cache of a train-mode forward");
  if (c.epoch != epoch_) throw StateError("stale forward cache: parameters changed since forward");
  if (dy.rows() != c.x.rows() || dy.cols() != d_out()) throw ShapeError("backward: upstream gradient shape mismatch");

  const auto& f = factors_;
  const double s = config_.scale();

  // E = dL/d(dW^T), accumulated from both branches.
  Matrix e = matmul_tn(c.x_dropped, dy);
  if (!c.matrix_mask.empty()) e = hadamard(e, c.matrix_mask);
  if (config_.projection_enabled) {
    e += directional_vjp(c.u_t, m_, config_.epsilon, matmul_tn(c.x, dy));
  }

  BackwardResult out;
  if (options.tangent_projection) {
    for (std::size_t j = 0; j < e.rows(); ++j) {
      if (c.clamp_active[j]) continue;
      auto u = c.u_t.row(j);
      auto g = e.row(j);
      const double uu = dot(u, u);
      if (uu == 0.0) continue;
      const double radial = dot(u, g) / uu;
      for (std::size_t k = 0; k < g.size(); ++k) g[k] -= radial * u[k];
      const double gn = norm2(g);
      if (gn > 0.0) out.max_radial_cosine = std::max(out.max_radial_cosine, std::abs(dot(u, g)) / (std::sqrt(uu) * gn));
    }
  }

  GradientBundle& g = out.grads;
  g.d_a_plus = matmul_nt(e, f.b_plus);
  g.d_a_plus *= s;
  g.d_b_plus = matmul_tn(f.a_plus, e);
  g.d_b_plus *= s;
  if (config_.minus_trainable()) {
    g.d_a_minus = matmul_nt(e, f.b_minus);
    g.d_a_minus *= -s * f.tau;
    g.d_b_minus = matmul_tn(f.a_minus, e);
    g.d_b_minus *= -s * f.tau;
  } else {
    g.d_a_minus = Matrix(f.a_minus.rows(), f.a_minus.cols());
    g.d_b_minus = Matrix(f.b_minus.rows(), f.b_minus.cols());
  }
  if (config_.tau_trainable) {
    g.d_tau = config_.minus_trainable() ? -s * inner(e, matmul(f.a_minus, f.b_minus)) : 0.0;
  }

  out.dx = matmul_nt(dy, c.w_star_t);
  Matrix dx_res = matmul_nt(dy, c.delta_w_t_eff);
  if (!c.input_mask.empty()) dx_res = hadamard(dx_res, c.input_mask);
  out.dx += dx_res;
  return out;
}

void AdapterLayer::merge() {
  if (merged_) throw StateError("layer is already merged");
  // W_hat^T = W*^T + dW^T
  Matrix dwt = delta_w_t(factors_);
  Matrix u_t = w0_t_ + dwt;
  Matrix w_star_t;
  if (config_.projection_enabled) {
    Vector d_eps, scale;
    std::vector<bool> clamp;
    project_rows(u_t, m_, config_.epsilon, w_star_t, d_eps, scale, clamp);
  } else {
    w_star_t = w0_t_;
  }
  merged_t_ = w_star_t + dwt;
  merge_cache_ = std::move(factors_);
  factors_ = AdapterFactors{};
  merged_ = true;
  ++epoch_;
}

void AdapterLayer::unmerge() {
  if (!merged_) throw StateError("layer is not merged");
  factors_ = std::move(*merge_cache_);
  merge_cache_.reset();
  merged_t_ = Matrix();
  merged_ = false;
  ++epoch_;
}

Matrix AdapterLayer::merged_weight() const {
  if (!merged_) throw StateError("layer is not merged");
  return transpose(merged_t_);
}

Matrix AdapterLayer::merged_forward(const Matrix& x) {
  if (!merged_) throw StateError("merged_forward on an unmerged layer");
  if (x.cols() != d_in()) throw ShapeError("merged_forward: input width mismatch");
  Matrix y = matmul(x, merged_t_);
  ++matmuls_;
  add_row_vector(y, bias_);
  return y;
}

ClampReport AdapterLayer::clamp_diagnostics() const {
  ClampReport r;
  const Vector d = row_norms(w0_t_ + delta_w_t(live_factors()));
  for (std::size_t j = 0; j < d.size(); ++j) {
    if (d[j] < config_.epsilon) r.columns.push_back(j);
  }
  r.count = r.columns.size();
  return r;
}

ParameterCount AdapterLayer::count_parameters() const {
  const std::size_t width = d_in() + d_out();
  const std::size_t r_minus = config_.minus_enabled ? config_.rank_minus : 0;
  ParameterCount p;
  p.trainable = (config_.rank_plus + r_minus) * width + (config_.tau_trainable ? 1 : 0);
  p.frozen = d_out() * d_in() + d_out();
  return p;
}

}  // namespace d2lora
