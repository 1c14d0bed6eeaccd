/* Copyright 2026 The d2lora Authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * C interface to the d2lora library.
 *
 * Conventions:
 *   - Every function returns a d2l_status; on failure d2l_last_error()
 *     holds a message for the calling thread.
 *   - Matrices are dense, row-major, double precision. A layer's base
 *     weight is d_out x d_in; inputs are batch x d_in; outputs batch x d_out.
 *   - Strings returned through char** are owned by the caller and must be
 *     released with d2l_string_free().
 *   - A d2l_layer is not thread-safe; distinct handles may be used from
 *     different threads.
 */
#ifndef D2LORA_D2LORA_H_
#define D2LORA_D2LORA_H_

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(D2L_BUILDING_LIBRARY)
#define D2L_API __attribute__((visibility("default")))
#else
#define D2L_API
#endif

typedef enum d2l_status {
  D2L_OK = 0,
  D2L_ERR_SHAPE = 1,
  D2L_ERR_CONFIG = 2,
  D2L_ERR_STATE = 3,
  D2L_ERR_IO = 4,
  D2L_ERR_FORMAT = 5,
  D2L_ERR_NUMERIC = 6,
  D2L_ERR_INVALID_ARGUMENT = 7,
  D2L_ERR_INTERNAL = 8
} d2l_status;

typedef enum d2l_factor {
  D2L_A_PLUS = 0,
  D2L_B_PLUS = 1,
  D2L_A_MINUS = 2,
  D2L_B_MINUS = 3,
  D2L_TAU = 4 /* 1 x 1 */
} d2l_factor;

typedef struct d2l_layer d2l_layer;

D2L_API const char* d2l_version(void);
D2L_API const char* d2l_status_name(d2l_status status);
/* Message of the last failed call on this thread ("" if none). */
D2L_API const char* d2l_last_error(void);
D2L_API void d2l_string_free(char* s);

/* ---- Layers ------------------------------------------------------------ */

/* config_json: adapter fields as a JSON object (see README), or NULL for
 * defaults. Factors are initialized from the config seed. */
D2L_API d2l_status d2l_layer_create(const double* w0, const double* bias, size_t d_out, size_t d_in,
                                    const char* config_json, d2l_layer** out);
D2L_API void d2l_layer_destroy(d2l_layer* layer);

D2L_API d2l_status d2l_layer_dims(const d2l_layer* layer, size_t* d_out, size_t* d_in);

/* train != 0 applies dropout and keeps the cache for d2l_layer_backward.
 * Eval on a merged layer costs one matrix product. */
D2L_API d2l_status d2l_layer_forward(d2l_layer* layer, const double* x, size_t batch, int train, double* y);
/* Consumes the cache of the last train forward; dx may be NULL. Factor
 * gradients are kept until the next backward. */
D2L_API d2l_status d2l_layer_backward(d2l_layer* layer, const double* dy, size_t batch, double* dx);

D2L_API d2l_status d2l_layer_factor_shape(const d2l_layer* layer, d2l_factor which, size_t* rows, size_t* cols);
D2L_API d2l_status d2l_layer_get_factor(const d2l_layer* layer, d2l_factor which, double* out);
D2L_API d2l_status d2l_layer_set_factor(d2l_layer* layer, d2l_factor which, const double* values);
/* D2L_TAU reports 0 when tau is not trainable. */
D2L_API d2l_status d2l_layer_get_grad(const d2l_layer* layer, d2l_factor which, double* out);

D2L_API d2l_status d2l_layer_merge(d2l_layer* layer);
D2L_API d2l_status d2l_layer_unmerge(d2l_layer* layer);
D2L_API d2l_status d2l_layer_is_merged(const d2l_layer* layer, int* merged);
/* W_hat (d_out x d_in); merged layers only. */
D2L_API d2l_status d2l_layer_merged_weight(const d2l_layer* layer, double* out);

D2L_API d2l_status d2l_layer_count_parameters(const d2l_layer* layer, size_t* trainable, size_t* frozen);
D2L_API d2l_status d2l_layer_clamp_count(const d2l_layer* layer, size_t* count);
/* Matrix products executed by forward calls so far. */
D2L_API d2l_status d2l_layer_matmul_count(const d2l_layer* layer, uint64_t* count);

D2L_API d2l_status d2l_layer_save(const d2l_layer* layer, const char* path);
/* A merged checkpoint loads as a merged layer without factors: eval
 * forward works, unmerge and train forward fail with D2L_ERR_STATE. */
D2L_API d2l_status d2l_layer_load(const char* path, d2l_layer** out);

/* ---- Commands ---------------------------------------------------------- */

/* Writes report.csv, trace.csv, config.json and a checkpoint to out_dir.
 * summary_json (optional) receives final loss, sigma_diff and file paths. */
D2L_API d2l_status d2l_train(const char* config_path, const char* out_dir, char** summary_json);
/* CSV with one row per (variant, seed); summary_json holds per-variant medians. */
D2L_API d2l_status d2l_compare(const char* config_path, size_t n_seeds, char** csv, char** summary_json);
/* suite is "all" or one check name. passed is set even when checks fail;
 * threshold_scale multiplies every tolerance (1.0 = defaults). */
D2L_API d2l_status d2l_verify(const char* suite, uint64_t seed, double threshold_scale, char** report_json,
                              int* passed);
D2L_API d2l_status d2l_merge_checkpoint(const char* in_path, const char* out_path);
D2L_API d2l_status d2l_bench(size_t dim, size_t batch, size_t iters, char** csv, char** summary_json);

#ifdef __cplusplus
}
#endif

#endif /* D2LORA_D2LORA_H_ */
