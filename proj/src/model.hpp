// Copyright 2026 The d2lora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "adapter.hpp"
#include "linalg.hpp"

namespace d2lora {

/// A named affine map y = x W^T + b, optionally wrapped by an adapter. When
/// an adapter is present it owns the frozen copy of W.
struct LinearModule {
  std::string name;
  Matrix weight;  // d_out x d_in
  Vector bias;
  std::optional<AdapterLayer> adapter;
  std::uint64_t plain_matmuls = 0;

  std::size_t d_in() const { return weight.cols(); }
  std::size_t d_out() const { return weight.rows(); }
};

enum class HeadActivation { identity, tanh };

struct ModuleCache {
  std::optional<ForwardCache> adapter;
};

/// Intermediates of one net forward; consumed by ToyNet::backward.
struct NetCache {
  Matrix tokens;
  Matrix q, k, v;
  std::vector<Matrix> attn;  // per sample, seq x seq softmax weights
  Matrix h;                  // attention output before o
  Matrix o;
  Matrix pooled;
  Matrix activated;
  std::vector<ModuleCache> modules;
  bool train = false;
};

struct NetForward {
  Matrix logits;
  NetCache cache;
};

struct NetBackward {
  /// One entry per module; empty bundle for modules without an adapter.
  std::vector<std::optional<GradientBundle>> grads;
  Matrix d_tokens;
};

/// Single-head attention block (q, k, v, o) over a fixed-length token
/// sequence, mean-pooled into a linear classification head.
///
/// Tokens for a batch of B sequences are a (B * seq_len) x embed_dim
/// matrix, sequence-major.
class ToyNet {
 public:
  ToyNet(std::size_t embed_dim, std::size_t n_classes, std::size_t seq_len, std::uint64_t seed,
         HeadActivation activation = HeadActivation::tanh);
  /// Reassembles a net from modules named q, k, v, o, head (in that order).
  ToyNet(std::size_t seq_len, HeadActivation activation, std::vector<LinearModule> modules);

  std::size_t embed_dim() const { return embed_dim_; }
  std::size_t n_classes() const { return n_classes_; }
  std::size_t seq_len() const { return seq_len_; }
  HeadActivation activation() const { return activation_; }

  std::vector<LinearModule>& modules() { return modules_; }
  const std::vector<LinearModule>& modules() const { return modules_; }
  LinearModule& module(const std::string& name);
  const LinearModule& module(const std::string& name) const;

  /// Wraps each targeted module's frozen weight in an AdapterLayer. Module
  /// i gets adapter seed derive_seed(cfg.seed, kModule + i).
  std::size_t inject_adapters(const std::set<std::string>& targets, const AdapterConfig& cfg);

  NetForward forward(const Matrix& tokens, Mode mode);
  NetBackward backward(const NetCache& cache, const Matrix& d_logits) const;

  /// Throws StateError when adapters disagree on merge state.
  void merge_all();
  void unmerge_all();
  /// 0 = no adapters, otherwise all merged / all unmerged.
  bool any_merged() const;

  std::size_t adapted_count() const;
  ParameterCount count_parameters() const;
  /// Matrix products executed by the linear modules (adapter or plain).
  std::uint64_t linear_matmul_count() const;
  void reset_matmul_counts();

 private:
  Matrix apply_module(LinearModule& m, const Matrix& x, Mode mode, ModuleCache& cache);

  std::size_t embed_dim_;
  std::size_t n_classes_;
  std::size_t seq_len_;
  HeadActivation activation_;
  std::vector<LinearModule> modules_;
};

/// Softmax cross-entropy averaged over rows; writes dL/dlogits if requested.
double softmax_cross_entropy(const Matrix& logits, const std::vector<int>& labels, Matrix* d_logits);

}  // namespace d2lora
