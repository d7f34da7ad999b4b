/* Copyright 2026 The FBQuant Toolkit Authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * C interface of the FBQuant toolkit. Every fallible call returns an
 * fbq_status; on failure fbq_last_error() describes the cause for the calling
 * thread. Strings returned through char** are owned by the caller and are
 * released with fbq_string_free.
 */

#ifndef FBQUANT_FBQUANT_H_
#define FBQUANT_FBQUANT_H_

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define FBQ_API __declspec(dllexport)
#else
#define FBQ_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum fbq_status {
  FBQ_OK = 0,
  FBQ_ERR_INVALID_ARGUMENT = 1,
  FBQ_ERR_SHAPE = 2,
  FBQ_ERR_VALUE = 3,
  FBQ_ERR_FORMAT = 4,
  FBQ_ERR_SCHEMA = 5,
  FBQ_ERR_DATA = 6,
  FBQ_ERR_IO = 7,
  FBQ_ERR_PRECONDITION = 8,
  FBQ_ERR_NUMERIC = 9,
  FBQ_ERR_CONVERGENCE = 10,
  FBQ_ERR_INTERNAL = 11
} fbq_status;

FBQ_API const char* fbq_version(void);
FBQ_API const char* fbq_status_string(fbq_status status);
/* Message of the most recent failure on this thread, "" if none. */
FBQ_API const char* fbq_last_error(void);
/* Nonzero for failures of the numerics rather than of the inputs. */
FBQ_API int fbq_status_is_numeric(fbq_status status);

FBQ_API void fbq_string_free(char* s);

/* Calibration bundle: per-layer weights and calibration activations. */
typedef struct fbq_bundle fbq_bundle;

FBQ_API fbq_status fbq_bundle_load(const char* path, fbq_bundle** out);
FBQ_API void fbq_bundle_free(fbq_bundle* bundle);
FBQ_API size_t fbq_bundle_size(const fbq_bundle* bundle);
/* `name` stays valid until the bundle is freed. Any output may be NULL. */
FBQ_API fbq_status fbq_bundle_layer_info(const fbq_bundle* bundle, size_t index, const char** name,
                                         size_t* out_dim, size_t* in_dim, size_t* n_samples);

typedef struct fbq_quant_options {
  int bits;
  size_t group_size;
  size_t rank;
  size_t epochs;
  double learning_rate;
  double sigma_init;
  uint64_t seed;
  int backtracking; /* nonzero selects the backtracking step rule */
  const char* method; /* "fbquant", "rtn", "svd_delta" or "direct_gd"; NULL means "fbquant" */
  size_t threads;     /* 0 picks the hardware concurrency */
} fbq_quant_options;

FBQ_API void fbq_quant_options_default(fbq_quant_options* opts);

/* Quantized model: packed codes plus the low-rank sub-branch of each layer. */
typedef struct fbq_model fbq_model;

FBQ_API fbq_status fbq_quantize(const fbq_bundle* bundle, const fbq_quant_options* opts, fbq_model** out);
FBQ_API fbq_status fbq_model_save(const fbq_model* model, const char* path);
FBQ_API fbq_status fbq_model_load(const char* path, fbq_model** out);
FBQ_API void fbq_model_free(fbq_model* model);
FBQ_API size_t fbq_model_size(const fbq_model* model);
/* Report and loss chart exist only for models produced by fbq_quantize. */
FBQ_API fbq_status fbq_model_report_json(const fbq_model* model, char** json);
FBQ_API fbq_status fbq_model_loss_svg(const fbq_model* model, char** svg);

/* Relative output error of every bundle layer under the model. */
FBQ_API fbq_status fbq_evaluate_json(const fbq_bundle* bundle, const fbq_model* model, char** json);

/* Null-space perturbation study on every rank-deficient bundle layer. `svg`
 * may be NULL. */
FBQ_API fbq_status fbq_illposed_demo(const fbq_bundle* bundle, const fbq_quant_options* opts, const double* alphas,
                                     size_t n_alphas, char** json, char** svg);

/* `shapes` is a comma list of b:d:r triples or the aliases decode, prefill.
 * `csv` or `json` may be NULL. */
FBQ_API fbq_status fbq_benchmark(const char* shapes, size_t reps, int bits, size_t group_size, uint64_t seed,
                                 char** csv, char** json);

/* Finite-difference check of the detached gradients; `json` may be NULL. */
FBQ_API fbq_status fbq_gradcheck(uint64_t seed, double* max_rel_error, int* ste_all_zero, char** json);

FBQ_API fbq_status fbq_macs_overhead(uint64_t b, uint64_t d, uint64_t r, uint64_t* m0, uint64_t* m1,
                                     double* ratio);

#ifdef __cplusplus
}
#endif

#endif /* FBQUANT_FBQUANT_H_ */
