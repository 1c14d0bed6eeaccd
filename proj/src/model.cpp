// Copyright 2026 The d2lora Authors
// SPDX-License-Identifier: Apache-2.0

#include "model.hpp"

#include <algorithm>
#include <cmath>

#include "errors.hpp"

namespace d2lora {

namespace {

const char* const kModuleNames[] = {"q", "k", "v", "o", "head"};

Matrix rows_slice(const Matrix& m, std::size_t begin, std::size_t count) {
  Matrix out(count, m.cols());
  for (std::size_t i = 0; i < count; ++i) {
    auto src = m.row(begin + i);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

void write_rows(Matrix& dst, std::size_t begin, const Matrix& src) {
  for (std::size_t i = 0; i < src.rows(); ++i) {
    auto r = src.row(i);
    std::copy(r.begin(), r.end(), dst.row(begin + i).begin());
  }
}

}  // namespace

ToyNet::ToyNet(std::size_t embed_dim, std::size_t n_classes, std::size_t seq_len, std::uint64_t seed,
               HeadActivation activation)
    : embed_dim_(embed_dim), n_classes_(n_classes), seq_len_(seq_len), activation_(activation) {
  if (embed_dim < 2) throw ConfigError("embed_dim must be >= 2");
  if (n_classes < 1) throw ConfigError("n_classes must be >= 1");
  if (seq_len < 1) throw ConfigError("seq_len must be >= 1");
  Rng rng(seed);
  const double std = 1.0 / std::sqrt(static_cast<double>(embed_dim));
  for (const char* name : kModuleNames) {
    LinearModule m;
    m.name = name;
    const bool head = m.name == "head";
    m.weight = gaussian(head ? n_classes : embed_dim, embed_dim, std, rng);
    m.bias.assign(m.weight.rows(), 0.0);
    if (head) {
      for (double& b : m.bias) b = rng.normal(0.1);
    }
    modules_.push_back(std::move(m));
  }
}

ToyNet::ToyNet(std::size_t seq_len, HeadActivation activation, std::vector<LinearModule> modules)
    : seq_len_(seq_len), activation_(activation), modules_(std::move(modules)) {
  if (modules_.size() != std::size(kModuleNames)) throw ShapeError("net needs exactly 5 modules");
  for (std::size_t i = 0; i < modules_.size(); ++i) {
    if (modules_[i].name != kModuleNames[i]) {
      throw ConfigError("module " + std::to_string(i) + " must be named '" + kModuleNames[i] + "'");
    }
  }
  if (seq_len < 1) throw ConfigError("seq_len must be >= 1");
  embed_dim_ = modules_[0].d_in();
  n_classes_ = modules_[4].d_out();
  for (std::size_t i = 0; i < modules_.size(); ++i) {
    const auto& m = modules_[i];
    const std::size_t rows = i == 4 ? n_classes_ : embed_dim_;
    if (m.d_in() != embed_dim_ || m.d_out() != rows || m.bias.size() != rows) {
      throw ShapeError("module '" + m.name + "' has inconsistent shape");
    }
    if (m.adapter && (m.adapter->d_in() != m.d_in() || m.adapter->d_out() != m.d_out())) {
      throw ShapeError("module '" + m.name + "' adapter shape mismatch");
    }
  }
}

LinearModule& ToyNet::module(const std::string& name) {
  for (auto& m : modules_)
    if (m.name == name) return m;
  throw ConfigError("unknown module '" + name + "'");
}

const LinearModule& ToyNet::module(const std::string& name) const {
  for (const auto& m : modules_)
    if (m.name == name) return m;
  throw ConfigError("unknown module '" + name + "'");
}

std::size_t ToyNet::inject_adapters(const std::set<std::string>& targets, const AdapterConfig& cfg) {
  for (const auto& t : targets) (void)module(t);
  std::size_t injected = 0;
  for (std::size_t i = 0; i < modules_.size(); ++i) {
    auto& m = modules_[i];
    if (!targets.contains(m.name)) continue;
    if (m.adapter) throw StateError("module '" + m.name + "' already has an adapter");
    AdapterConfig c = cfg;
    c.seed = derive_seed(cfg.seed, streams::kModule + i);
    m.adapter.emplace(m.weight, m.bias, c);
    ++injected;
  }
  return injected;
}

Matrix ToyNet::apply_module(LinearModule& m, const Matrix& x, Mode mode, ModuleCache& cache) {
  if (m.adapter) {
    auto r = m.adapter->forward(x, mode);
    if (mode == Mode::train) cache.adapter = std::move(r.cache);
    return std::move(r.y);
  }
  Matrix y = matmul_nt(x, m.weight);
  ++m.plain_matmuls;
  add_row_vector(y, m.bias);
  return y;
}

NetForward ToyNet::forward(const Matrix& tokens, Mode mode) {
  if (tokens.cols() != embed_dim_ || tokens.rows() % seq_len_ != 0 || tokens.rows() == 0) {
    throw ShapeError("net_forward: tokens must be (batch * " + std::to_string(seq_len_) + ") x " +
                     std::to_string(embed_dim_));
  }
  const std::size_t batch = tokens.rows() / seq_len_;
  NetForward out;
  NetCache& c = out.cache;
  c.train = mode == Mode::train;
  c.tokens = tokens;
  c.modules.resize(modules_.size());

  c.q = apply_module(modules_[0], tokens, mode, c.modules[0]);
  c.k = apply_module(modules_[1], tokens, mode, c.modules[1]);
  c.v = apply_module(modules_[2], tokens, mode, c.modules[2]);

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(embed_dim_));
  c.h = Matrix(tokens.rows(), embed_dim_);
  c.attn.reserve(batch);
  for (std::size_t s = 0; s < batch; ++s) {
    const std::size_t base = s * seq_len_;
    Matrix qs = rows_slice(c.q, base, seq_len_);
    Matrix ks = rows_slice(c.k, base, seq_len_);
    Matrix vs = rows_slice(c.v, base, seq_len_);
    Matrix p = matmul_nt(qs, ks);
    p *= inv_sqrt;
    for (std::size_t i = 0; i < seq_len_; ++i) {
      auto r = p.row(i);
      const double mx = *std::max_element(r.begin(), r.end());
      double z = 0.0;
      for (double& v : r) z += (v = std::exp(v - mx));
      for (double& v : r) v /= z;
    }
    write_rows(c.h, base, matmul(p, vs));
    c.attn.push_back(std::move(p));
  }

  c.o = apply_module(modules_[3], c.h, mode, c.modules[3]);

  c.pooled = Matrix(batch, embed_dim_);
  const double inv_len = 1.0 / static_cast<double>(seq_len_);
  for (std::size_t s = 0; s < batch; ++s) {
    auto dst = c.pooled.row(s);
    for (std::size_t t = 0; t < seq_len_; ++t) {
      auto src = c.o.row(s * seq_len_ + t);
      for (std::size_t j = 0; j < embed_dim_; ++j) dst[j] += src[j];
    }
    for (double& v : dst) v *= inv_len;
  }
  c.activated = c.pooled;
  if (activation_ == HeadActivation::tanh) {
    for (double& v : c.activated.values()) v = std::tanh(v);
  }
  out.logits = apply_module(modules_[4], c.activated, mode, c.modules[4]);
  return out;
}

namespace {

// Backward through one linear module; returns dL/dx.
Matrix module_backward(const LinearModule& m, const ModuleCache& cache, const Matrix& dy,
                       std::optional<GradientBundle>& grads) {
  if (m.adapter) {
    if (!cache.adapter) throw StateError("net backward requires a train-mode forward");
    auto r = m.adapter->backward(*cache.adapter, dy);
    grads = std::move(r.grads);
    return std::move(r.dx);
  }
  return matmul(dy, m.weight);
}

}  // namespace

NetBackward ToyNet::backward(const NetCache& c, const Matrix& d_logits) const {
  if (!c.train) throw StateError("net backward requires a train-mode forward");
  const std::size_t batch = c.pooled.rows();
  if (d_logits.rows() != batch || d_logits.cols() != n_classes_) throw ShapeError("net backward: d_logits shape");
  NetBackward out;
  out.grads.resize(modules_.size());

  Matrix d_act = module_backward(modules_[4], c.modules[4], d_logits, out.grads[4]);
  Matrix d_pooled = d_act;
  if (activation_ == HeadActivation::tanh) {
    auto a = c.activated.values();
    auto d = d_pooled.values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= 1.0 - a[i] * a[i];
  }
  Matrix d_o(c.o.rows(), embed_dim_);
  const double inv_len = 1.0 / static_cast<double>(seq_len_);
  for (std::size_t s = 0; s < batch; ++s) {
    auto src = d_pooled.row(s);
    for (std::size_t t = 0; t < seq_len_; ++t) {
      auto dst = d_o.row(s * seq_len_ + t);
      for (std::size_t j = 0; j < embed_dim_; ++j) dst[j] = src[j] * inv_len;
    }
  }
  Matrix d_h = module_backward(modules_[3], c.modules[3], d_o, out.grads[3]);

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(embed_dim_));
  Matrix d_q(c.q.rows(), embed_dim_), d_k(c.k.rows(), embed_dim_), d_v(c.v.rows(), embed_dim_);
  for (std::size_t s = 0; s < batch; ++s) {
    const std::size_t base = s * seq_len_;
    const Matrix& p = c.attn[s];
    Matrix qs = rows_slice(c.q, base, seq_len_);
    Matrix ks = rows_slice(c.k, base, seq_len_);
    Matrix vs = rows_slice(c.v, base, seq_len_);
    Matrix dhs = rows_slice(d_h, base, seq_len_);
    Matrix dp = matmul_nt(dhs, vs);
    write_rows(d_v, base, matmul_tn(p, dhs));
    Matrix ds(seq_len_, seq_len_);
    for (std::size_t i = 0; i < seq_len_; ++i) {
      const double row_dot = dot(dp.row(i), p.row(i));
      for (std::size_t j = 0; j < seq_len_; ++j) ds(i, j) = p(i, j) * (dp(i, j) - row_dot) * inv_sqrt;
    }
    write_rows(d_q, base, matmul(ds, ks));
    write_rows(d_k, base, matmul_tn(ds, qs));
  }

  out.d_tokens = module_backward(modules_[0], c.modules[0], d_q, out.grads[0]);
  out.d_tokens += module_backward(modules_[1], c.modules[1], d_k, out.grads[1]);
  out.d_tokens += module_backward(modules_[2], c.modules[2], d_v, out.grads[2]);
  return out;
}

bool ToyNet::any_merged() const {
  return std::any_of(modules_.begin(), modules_.end(), [](const auto& m) { return m.adapter && m.adapter->merged(); });
}

void ToyNet::merge_all() {
  for (const auto& m : modules_)
    if (m.adapter && m.adapter->merged()) throw StateError("merge_all: module '" + m.name + "' already merged");
  for (auto& m : modules_)
    if (m.adapter) m.adapter->merge();
}

void ToyNet::unmerge_all() {
  for (const auto& m : modules_)
    if (m.adapter && !m.adapter->merged()) throw StateError("unmerge_all: module '" + m.name + "' is not merged");
  for (auto& m : modules_)
    if (m.adapter) m.adapter->unmerge();
}

std::size_t ToyNet::adapted_count() const {
  return static_cast<std::size_t>(std::count_if(modules_.begin(), modules_.end(), [](const auto& m) { return m.adapter.has_value(); }));
}

ParameterCount ToyNet::count_parameters() const {
  ParameterCount total;
  for (const auto& m : modules_) {
    if (m.adapter) {
      auto p = m.adapter->count_parameters();
      total.trainable += p.trainable;
      total.frozen += p.frozen;
    } else {
      total.frozen += m.weight.size() + m.bias.size();
    }
  }
  return total;
}

std::uint64_t ToyNet::linear_matmul_count() const {
  std::uint64_t n = 0;
  for (const auto& m : modules_) n += m.adapter ? m.adapter->matmul_count() : m.plain_matmuls;
  return n;
}

void ToyNet::reset_matmul_counts() {
  for (auto& m : modules_) {
    m.plain_matmuls = 0;
    if (m.adapter) m.adapter->reset_matmul_count();
  }
}

double softmax_cross_entropy(const Matrix& logits, const std::vector<int>& labels, Matrix* d_logits) {
  if (labels.size() != logits.rows()) throw ShapeError("cross entropy: label count mismatch");
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  if (d_logits) *d_logits = Matrix(logits.rows(), logits.cols());
  double loss = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto r = logits.row(i);
    const auto label = static_cast<std::size_t>(labels[i]);
    if (label >= r.size()) throw ShapeError("cross entropy: label out of range");
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double v : r) z += std::exp(v - mx);
    const double log_z = mx + std::log(z);
    loss += log_z - r[label];
    if (d_logits) {
      auto d = d_logits->row(i);
      for (std::size_t j = 0; j < r.size(); ++j) d[j] = std::exp(r[j] - log_z) * inv_n;
      d[label] -= inv_n;
    }
  }
  return loss * inv_n;
}

}  // namespace d2lora
