// Copyright 2026 The d2lora Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <memory>
#include <new>
#include <optional>
#include <string>

#include <json.hpp>

#include "adapter.hpp"
#include "checkpoint.hpp"
#include "commands.hpp"
#include "config.hpp"
#include "d2lora/d2lora.h"
#include "errors.hpp"

using namespace d2lora;
using nlohmann::json;

struct d2l_layer {
  std::optional<AdapterLayer> adapter;
  // Set when loaded from a merged checkpoint: W_hat and bias only.
  Matrix plain_w;
  Vector plain_b;
  std::uint64_t plain_matmuls = 0;
  std::optional<ForwardCache> cache;
  std::optional<GradientBundle> grads;
};

namespace {

thread_local std::string g_last_error;

template <typename F>
d2l_status guard(F&& f) {
  try {
    f();
    g_last_error.clear();
    return D2L_OK;
  } catch (const ShapeError& e) {
    g_last_error = e.what();
    return D2L_ERR_SHAPE;
  } catch (const ConfigError& e) {
    g_last_error = e.what();
    return D2L_ERR_CONFIG;
  } catch (const InputError& e) {
    g_last_error = e.what();
    return D2L_ERR_INVALID_ARGUMENT;
  } catch (const StateError& e) {
    g_last_error = e.what();
    return D2L_ERR_STATE;
  } catch (const IoError& e) {
    g_last_error = e.what();
    return D2L_ERR_IO;
  } catch (const FormatError& e) {
    g_last_error = e.what();
    return D2L_ERR_FORMAT;
  } catch (const NumericError& e) {
    g_last_error = e.what();
    return D2L_ERR_NUMERIC;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return D2L_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return D2L_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return D2L_ERR_INTERNAL;
  }
}

void require(bool ok, const char* what) {
  if (!ok) throw InputError(what);
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void put_string(char** out, const std::string& s) {
  if (out) *out = dup_string(s);
}

Matrix copy_in(const double* p, std::size_t rows, std::size_t cols) {
  return Matrix(rows, cols, std::vector<double>(p, p + rows * cols));
}

void copy_out(const Matrix& m, double* out) {
  if (m.size()) std::memcpy(out, m.values().data(), m.size() * sizeof(double));
}

AdapterLayer& adapter_of(d2l_layer* layer) {
  if (!layer->adapter) throw StateError("layer was loaded from a merged checkpoint and has no factors");
  return *layer->adapter;
}

const AdapterLayer& adapter_of(const d2l_layer* layer) {
  if (!layer->adapter) throw StateError("layer was loaded from a merged checkpoint and has no factors");
  return *layer->adapter;
}

Matrix& factor_ref(AdapterFactors& f, d2l_factor which) {
  switch (which) {
    case D2L_A_PLUS:
      return f.a_plus;
    case D2L_B_PLUS:
      return f.b_plus;
    case D2L_A_MINUS:
      return f.a_minus;
    case D2L_B_MINUS:
      return f.b_minus;
    default:
      throw InputError("unknown factor id");
  }
}

const Matrix& grad_ref(const GradientBundle& g, d2l_factor which) {
  switch (which) {
    case D2L_A_PLUS:
      return g.d_a_plus;
    case D2L_B_PLUS:
      return g.d_b_plus;
    case D2L_A_MINUS:
      return g.d_a_minus;
    case D2L_B_MINUS:
      return g.d_b_minus;
    default:
      throw InputError("unknown factor id");
  }
}

std::size_t dim_out(const d2l_layer* l) { return l->adapter ? l->adapter->d_out() : l->plain_w.rows(); }
std::size_t dim_in(const d2l_layer* l) { return l->adapter ? l->adapter->d_in() : l->plain_w.cols(); }

}  // namespace

extern "C" {

D2L_API const char* d2l_version(void) { return "1.0.0"; }

D2L_API const char* d2l_status_name(d2l_status status) {
  switch (status) {
    case D2L_OK:
      return "ok";
    case D2L_ERR_SHAPE:
      return "shape error";
    case D2L_ERR_CONFIG:
      return "configuration error";
    case D2L_ERR_STATE:
      return "state error";
    case D2L_ERR_IO:
      return "i/o error";
    case D2L_ERR_FORMAT:
      return "format error";
    case D2L_ERR_NUMERIC:
      return "numeric error";
    case D2L_ERR_INVALID_ARGUMENT:
      return "invalid argument";
    case D2L_ERR_INTERNAL:
      return "internal error";
  }
  return "unknown status";
}

D2L_API const char* d2l_last_error(void) { return g_last_error.c_str(); }

D2L_API void d2l_string_free(char* s) { std::free(s); }

D2L_API d2l_status d2l_layer_create(const double* w0, const double* bias, size_t d_out, size_t d_in,
                                    const char* config_json, d2l_layer** out) {
  return guard([&] {
    require(w0 && bias && out, "d2l_layer_create: null argument");
    AdapterConfig cfg;
    if (config_json) {
      json j;
      try {
        j = json::parse(config_json);
      } catch (const json::exception& e) {
        throw ConfigError(std::string("adapter config is not valid JSON: ") + e.what());
      }
      cfg = adapter_from_json(j);
    }
    auto layer = std::make_unique<d2l_layer>();
    layer->adapter.emplace(copy_in(w0, d_out, d_in), Vector(bias, bias + d_out), cfg);
    *out = layer.release();
  });
}

D2L_API void d2l_layer_destroy(d2l_layer* layer) { delete layer; }

D2L_API d2l_status d2l_layer_dims(const d2l_layer* layer, size_t* d_out, size_t* d_in) {
  return guard([&] {
    require(layer && d_out && d_in, "d2l_layer_dims: null argument");
    *d_out = dim_out(layer);
    *d_in = dim_in(layer);
  });
}

D2L_API d2l_status d2l_layer_forward(d2l_layer* layer, const double* x, size_t batch, int train, double* y) {
  return guard([&] {
    require(layer && x && y, "d2l_layer_forward: null argument");
    Matrix xin = copy_in(x, batch, dim_in(layer));
    if (!layer->adapter) {
      if (train) throw StateError("train-mode forward on a merged layer");
      Matrix out = matmul_nt(xin, layer->plain_w);
      ++layer->plain_matmuls;
      add_row_vector(out, layer->plain_b);
      copy_out(out, y);
      return;
    }
    auto r = layer->adapter->forward(xin, train ? Mode::train : Mode::eval);
    if (train) layer->cache = std::move(r.cache);
    copy_out(r.y, y);
  });
}

D2L_API d2l_status d2l_layer_backward(d2l_layer* layer, const double* dy, size_t batch, double* dx) {
  return guard([&] {
    require(layer && dy, "d2l_layer_backward: null argument");
    auto& a = adapter_of(layer);
    if (!layer->cache) throw StateError("backward requires a preceding train-mode forward");
    auto r = a.backward(*layer->cache, copy_in(dy, batch, a.d_out()));
    layer->grads = std::move(r.grads);
    if (dx) copy_out(r.dx, dx);
  });
}

D2L_API d2l_status d2l_layer_factor_shape(const d2l_layer* layer, d2l_factor which, size_t* rows, size_t* cols) {
  return guard([&] {
    require(layer && rows && cols, "d2l_layer_factor_shape: null argument");
    const auto& cfg = adapter_of(layer).config();
    const std::size_t din = dim_in(layer), dout = dim_out(layer);
    switch (which) {
      case D2L_A_PLUS:
        *rows = din, *cols = cfg.rank_plus;
        break;
      case D2L_B_PLUS:
        *rows = cfg.rank_plus, *cols = dout;
        break;
      case D2L_A_MINUS:
        *rows = din, *cols = cfg.rank_minus;
        break;
      case D2L_B_MINUS:
        *rows = cfg.rank_minus, *cols = dout;
        break;
      case D2L_TAU:
        *rows = 1, *cols = 1;
        break;
      default:
        throw InputError("unknown factor id");
    }
  });
}

D2L_API d2l_status d2l_layer_get_factor(const d2l_layer* layer, d2l_factor which, double* out) {
  return guard([&] {
    require(layer && out, "d2l_layer_get_factor: null argument");
    const auto& f = adapter_of(layer).factors();
    if (which == D2L_TAU) {
      *out = f.tau;
      return;
    }
    copy_out(factor_ref(const_cast<AdapterFactors&>(f), which), out);
  });
}

D2L_API d2l_status d2l_layer_set_factor(d2l_layer* layer, d2l_factor which, const double* values) {
  return guard([&] {
    require(layer && values, "d2l_layer_set_factor: null argument");
    auto& f = adapter_of(layer).mutable_factors();
    if (which == D2L_TAU) {
      f.tau = *values;
    } else {
      Matrix& m = factor_ref(f, which);
      std::memcpy(m.values().data(), values, m.size() * sizeof(double));
    }
    layer->cache.reset();
  });
}

D2L_API d2l_status d2l_layer_get_grad(const d2l_layer* layer, d2l_factor which, double* out) {
  return guard([&] {
    require(layer && out, "d2l_layer_get_grad: null argument");
    if (!layer->grads) throw StateError("no gradients yet; call d2l_layer_backward first");
    if (which == D2L_TAU) {
      *out = layer->grads->d_tau.value_or(0.0);
      return;
    }
    copy_out(grad_ref(*layer->grads, which), out);
  });
}

D2L_API d2l_status d2l_layer_merge(d2l_layer* layer) {
  return guard([&] {
    require(layer, "d2l_layer_merge: null argument");
    adapter_of(layer).merge();
    layer->cache.reset();
  });
}

D2L_API d2l_status d2l_layer_unmerge(d2l_layer* layer) {
  return guard([&] {
    require(layer, "d2l_layer_unmerge: null argument");
    adapter_of(layer).unmerge();
  });
}

D2L_API d2l_status d2l_layer_is_merged(const d2l_layer* layer, int* merged) {
  return guard([&] {
    require(layer && merged, "d2l_layer_is_merged: null argument");
    *merged = !layer->adapter || layer->adapter->merged();
  });
}

D2L_API d2l_status d2l_layer_merged_weight(const d2l_layer* layer, double* out) {
  return guard([&] {
    require(layer && out, "d2l_layer_merged_weight: null argument");
    if (!layer->adapter) {
      copy_out(layer->plain_w, out);
      return;
    }
    copy_out(layer->adapter->merged_weight(), out);
  });
}

D2L_API d2l_status d2l_layer_count_parameters(const d2l_layer* layer, size_t* trainable, size_t* frozen) {
  return guard([&] {
    require(layer && trainable && frozen, "d2l_layer_count_parameters: null argument");
    auto p = adapter_of(layer).count_parameters();
    *trainable = p.trainable;
    *frozen = p.frozen;
  });
}

D2L_API d2l_status d2l_layer_clamp_count(const d2l_layer* layer, size_t* count) {
  return guard([&] {
    require(layer && count, "d2l_layer_clamp_count: null argument");
    *count = adapter_of(layer).clamp_diagnostics().count;
  });
}

D2L_API d2l_status d2l_layer_matmul_count(const d2l_layer* layer, uint64_t* count) {
  return guard([&] {
    require(layer && count, "d2l_layer_matmul_count: null argument");
    *count = layer->adapter ? layer->adapter->matmul_count() : layer->plain_matmuls;
  });
}

D2L_API d2l_status d2l_layer_save(const d2l_layer* layer, const char* path) {
  return guard([&] {
    require(layer && path, "d2l_layer_save: null argument");
    if (!layer->adapter) {
      throw StateError("layer loaded from a merged checkpoint cannot be re-saved");
    }
    write_file_atomic(path, encode_layer(*layer->adapter));
  });
}

D2L_API d2l_status d2l_layer_load(const char* path, d2l_layer** out) {
  return guard([&] {
    require(path && out, "d2l_layer_load: null argument");
    auto rec = decode_layer(read_file(path));
    auto layer = std::make_unique<d2l_layer>();
    if (rec.kind == CheckpointKind::adapter) {
      layer->adapter.emplace(layer_from_record(std::move(rec)));
    } else {
      layer->plain_w = std::move(rec.weight);
      layer->plain_b = std::move(rec.bias);
    }
    *out = layer.release();
  });
}

D2L_API d2l_status d2l_train(const char* config_path, const char* out_dir, char** summary_json) {
  return guard([&] {
    require(config_path && out_dir, "d2l_train: null argument");
    auto cfg = load_config(config_path);
    auto out = cmd_train(cfg, out_dir);
    json s = {{"variant", out.report.variant},
              {"steps", out.report.steps},
              {"initial_loss", out.report.initial_loss},
              {"final_loss", out.report.final_loss},
              {"holdout_loss", std::isnan(out.report.holdout_loss) ? json(nullptr) : json(out.report.holdout_loss)},
              {"sigma_diff", out.report.sigma_diff},
              {"clamp_events", out.report.clamp_events},
              {"trainable_params", out.report.trainable_params},
              {"report_csv", out.report_csv},
              {"trace_csv", out.trace_csv},
              {"config_json", out.config_json},
              {"checkpoint", out.checkpoint}};
    put_string(summary_json, s.dump());
  });
}

D2L_API d2l_status d2l_compare(const char* config_path, size_t n_seeds, char** csv, char** summary_json) {
  return guard([&] {
    require(config_path && csv, "d2l_compare: null argument");
    auto cfg = load_config(config_path);
    auto rows = cmd_compare(cfg, n_seeds, worker_threads());
    json s = json::array();
    for (const auto& v : summarize(rows)) {
      s.push_back({{"variant", v.variant},
                   {"median_final_loss", v.median_final_loss},
                   {"median_sigma_diff", v.median_sigma_diff},
                   {"trainable_params", v.trainable_params}});
    }
    std::string text = to_csv(rows);
    put_string(summary_json, s.dump());
    put_string(csv, text);
  });
}

D2L_API d2l_status d2l_verify(const char* suite, uint64_t seed, double threshold_scale, char** report_json,
                              int* passed) {
  return guard([&] {
    require(suite && passed, "d2l_verify: null argument");
    auto r = cmd_verify(suite, seed, threshold_scale);
    *passed = r.pass ? 1 : 0;
    put_string(report_json, r.to_json().dump(2));
  });
}

D2L_API d2l_status d2l_merge_checkpoint(const char* in_path, const char* out_path) {
  return guard([&] {
    require(in_path && out_path, "d2l_merge_checkpoint: null argument");
    cmd_merge(in_path, out_path);
  });
}

D2L_API d2l_status d2l_bench(size_t dim, size_t batch, size_t iters, char** csv, char** summary_json) {
  return guard([&] {
    require(csv != nullptr, "d2l_bench: null argument");
    auto r = cmd_bench(dim, batch, iters);
    json s = {{"dim", dim},
              {"batch", batch},
              {"iters", iters},
              {"speedup", r.speedup},
              {"adapted_modules", r.adapted_modules},
              {"unmerged_products_per_module", r.unmerged_products_per_module},
              {"merged_products_per_module", r.merged_products_per_module}};
    std::string text = r.to_csv();
    put_string(summary_json, s.dump());
    put_string(csv, text);
  });
}

}  // extern "C"
