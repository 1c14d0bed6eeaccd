// Copyright 2026 The d2lora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "linalg.hpp"
#include "rng.hpp"

namespace d2lora {

/// Every knob of the signed-residual adapter.
///
/// Setting projection_enabled = false and minus_enabled = false gives plain
/// LoRA; projection on with the minus branch off gives the DoRA-like variant.
struct AdapterConfig {
  std::size_t rank_plus = 4;
  std::size_t rank_minus = 4;
  double alpha = 8.0;  // alpha / rank_plus = 2
  double tau = 0.5;
  bool tau_trainable = false;
  double epsilon = 1e-6;
  double input_dropout_p = 0.1;
  double matrix_dropout_p = 0.0;
  bool projection_enabled = true;
  bool minus_enabled = true;
  bool minus_detached = false;
  /// Std of A_plus at init; nullopt resolves to 1/sqrt(d_in).
  std::optional<double> init_std_plus;
  /// std(A_minus) = minus_std_ratio * std(A_plus).
  double minus_std_ratio = 0.1;
  std::uint64_t seed = 0;
  /// Module names to adapt when injecting into a ToyNet.
  std::vector<std::string> targets = {"q", "k", "v", "o"};

  void validate() const;
  /// alpha / rank_plus; both branches share it.
  double scale() const { return alpha / static_cast<double>(rank_plus); }
  /// The minus branch contributes to the forward value.
  bool minus_active() const { return minus_enabled && rank_minus > 0; }
  /// The minus branch receives gradients.
  bool minus_trainable() const { return minus_active() && !minus_detached; }

  bool operator==(const AdapterConfig&) const = default;
};

struct AdapterFactors {
  Matrix a_plus;   // d_in x r+
  Matrix b_plus;   // r+ x d_out
  Matrix a_minus;  // d_in x r-
  Matrix b_minus;  // r- x d_out
  double tau = 0.5;

  bool operator==(const AdapterFactors&) const = default;
};

struct GradientBundle {
  Matrix d_a_plus;
  Matrix d_b_plus;
  Matrix d_a_minus;
  Matrix d_b_minus;
  std::optional<double> d_tau;
};

/// Result of the column-wise directional projection, in the W orientation
/// (d_out x d_in, one column per input feature).
struct Projection {
  Matrix w_star;
  Vector d_eps;
  std::vector<bool> clamp_active;
};

/// W* = (W0 + dW) diag(m / max(d, eps)), d = column norms of W0 + dW.
Projection project_directional(const Matrix& w0, const Matrix& delta_w, const Vector& m, double eps);

/// Pullback of the directional branch for one column u with upstream g:
///   |u| >= eps : (m/|u|) (g - (u.g / |u|^2) u)
///   |u| <  eps : (m/eps) g
/// Operates on rows of the transposed (d_in x d_out) layout, i.e. row j of
/// `u_t` is column j of W0 + dW.
Matrix directional_vjp(const Matrix& u_t, const Vector& m, double eps, const Matrix& g_t);

enum class Mode { train, eval };

/// Everything backward() needs from a train-mode forward.
struct ForwardCache {
  Matrix x;
  Matrix x_dropped;      // residual-branch input after inverted dropout
  Matrix input_mask;     // 0 or 1/(1-p); empty when input dropout is off
  Matrix matrix_mask;    // same for entries of dW^T; empty when off
  Matrix delta_w_t;      // dW^T, d_in x d_out
  Matrix delta_w_t_eff;  // dW^T after matrix dropout
  Matrix u_t;            // (W0 + dW)^T
  Matrix w_star_t;       // W*^T (W0^T when projection is off)
  Vector d_eps;
  Vector scale;  // m_j / d_eps_j
  std::vector<bool> clamp_active;
  std::uint64_t epoch = 0;
  bool valid = false;
};

struct ForwardResult {
  Matrix y;
  ForwardCache cache;
};

struct BackwardOptions {
  /// Remove the radial component of every row of dL/d(dW^T) relative to the
  /// current u_j before forming factor gradients.
  bool tangent_projection = false;
};

struct BackwardResult {
  GradientBundle grads;
  Matrix dx;
  /// max_j |<u_j, E_j>| / (|u_j| |E_j|) over unclamped columns; only
  /// computed when tangent_projection is on.
  double max_radial_cosine = 0.0;
};

struct ParameterCount {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
};

struct ClampReport {
  std::size_t count = 0;
  std::vector<std::size_t> columns;
};

/// Frozen linear map W0 (d_out x d_in) + bias with a signed low-rank
/// residual and train-time directional projection.
///
/// Not thread-safe: forward/backward/merge must be externally serialized.
class AdapterLayer {
 public:
  /// Initializes A+ ~ N(0, s^2), A- ~ N(0, (ratio s)^2), B+- = 0.
  AdapterLayer(Matrix w0, Vector bias, AdapterConfig config);
  /// Rebuilds a layer from stored parts (checkpoint load).
  AdapterLayer(Matrix w0, Vector bias, AdapterConfig config, AdapterFactors factors);

  std::size_t d_in() const { return w0_.cols(); }
  std::size_t d_out() const { return w0_.rows(); }
  const Matrix& base_weight() const { return w0_; }
  const Vector& bias() const { return bias_; }
  const Vector& magnitudes() const { return m_; }
  const AdapterConfig& config() const { return config_; }

  /// Throws StateError while merged.
  const AdapterFactors& factors() const;
  /// Mutable access invalidates outstanding forward caches.
  AdapterFactors& mutable_factors();

  /// dW^T = scale (A+ B+ - tau A- B-), d_in x d_out.
  Matrix delta_w_t() const;
  /// dW in the W orientation (d_out x d_in).
  Matrix delta_w() const { return transpose(delta_w_t()); }
  /// W* for the current factors (W0 when projection is off).
  Projection projection() const;

  ForwardResult forward(const Matrix& x, Mode mode, Rng& rng);
  /// Forward using the layer's own dropout stream.
  ForwardResult forward(const Matrix& x, Mode mode) { return forward(x, mode, dropout_rng_); }
  BackwardResult backward(const ForwardCache& cache, const Matrix& dy,
                          BackwardOptions options = {}) const;

  bool merged() const { return merged_; }
  /// W_hat = W* + dW; afterwards forward costs one matrix product.
  void merge();
  /// Restores the pre-merge factors bit-exactly.
  void unmerge();
  /// W_hat in the W orientation; throws unless merged.
  Matrix merged_weight() const;
  Matrix merged_forward(const Matrix& x);

  ClampReport clamp_diagnostics() const;
  ParameterCount count_parameters() const;

  Rng& dropout_rng() { return dropout_rng_; }
  /// Matrix products executed by forward paths since construction.
  std::uint64_t matmul_count() const { return matmuls_; }
  void reset_matmul_count() { matmuls_ = 0; }

 private:
  void check_factor_shapes() const;
  const AdapterFactors& live_factors() const;
  Matrix delta_w_t(const AdapterFactors& f) const;

  Matrix w0_;
  Matrix w0_t_;
  Vector bias_;
  Vector m_;
  AdapterConfig config_;
  AdapterFactors factors_;
  bool merged_ = false;
  Matrix merged_t_;  // W_hat^T
  std::optional<AdapterFactors> merge_cache_;
  Rng dropout_rng_;
  std::uint64_t epoch_ = 1;
  std::uint64_t matmuls_ = 0;
};

/// Resolved std of A_plus for a given input width.
double resolved_init_std(const AdapterConfig& config, std::size_t d_in);

}  // namespace d2lora
