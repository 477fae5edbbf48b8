/* trifuse C API. Generated by cbindgen; do not edit by hand. */

#ifndef TRIFUSE_H
#define TRIFUSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible function.
 */
typedef enum TrifuseStatus {
  TRIFUSE_STATUS_OK = 0,
  TRIFUSE_STATUS_NULL_POINTER = 1,
  TRIFUSE_STATUS_INVALID_UTF8 = 2,
  TRIFUSE_STATUS_INVALID_ARGUMENT = 3,
  TRIFUSE_STATUS_SHAPE_MISMATCH = 4,
  TRIFUSE_STATUS_NUMERIC_ERROR = 5,
  TRIFUSE_STATUS_IO_ERROR = 6,
  TRIFUSE_STATUS_FORMAT_ERROR = 7,
  TRIFUSE_STATUS_INTERNAL_ERROR = 8,
} TrifuseStatus;

/**
 * Opaque dataset handle.
 */
typedef struct TrifuseDataset TrifuseDataset;

/**
 * Opaque model handle.
 */
typedef struct TrifuseModel TrifuseModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version string; static storage, do not free.
 */
const char *trifuse_version(void);

/**
 * Message of the most recent error on this thread; valid until the next
 * failing call on the same thread. Do not free.
 */
const char *trifuse_last_error(void);

/**
 * Build a model.
 *
 * `arch` is one of `lmf-mult`, `fusion-cm-attn`, `mult-lite`,
 * `unimodal-lstm-{l,a,v}`; `config_json` may be empty for defaults.
 *
 * # Safety
 * String arguments must be null or valid NUL-terminated strings; `out` must
 * be a valid pointer. On success `*out` owns the model until
 * `trifuse_model_free`.
 */
enum TrifuseStatus trifuse_model_build(const char *arch,
                                       const char *config_json,
                                       uint64_t seed,
                                       struct TrifuseModel **out);

/**
 * # Safety
 * `model` must be null or a pointer returned by this library and not yet
 * freed.
 */
void trifuse_model_free(struct TrifuseModel *model);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum TrifuseStatus trifuse_model_param_count(const struct TrifuseModel *model, uint64_t *out);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum TrifuseStatus trifuse_model_stack_count(const struct TrifuseModel *model, uint64_t *out);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum TrifuseStatus trifuse_model_output_dim(const struct TrifuseModel *model, uint64_t *out);

/**
 * Eval-mode forward pass over one sample.
 *
 * Each sequence is row-major `steps x dim` with the per-modality feature
 * dims fixed by the model config. `output_len` receives the number of
 * values written (1 for regression, 8 for emotions).
 *
 * # Safety
 * The three sequence pointers must reference `steps * dim` doubles each;
 * `output` must have room for `output_capacity` doubles.
 */
enum TrifuseStatus trifuse_model_forward(const struct TrifuseModel *model,
                                         const double *language,
                                         size_t language_steps,
                                         const double *audio,
                                         size_t audio_steps,
                                         const double *visual,
                                         size_t visual_steps,
                                         double *output,
                                         size_t output_capacity,
                                         size_t *output_len);

/**
 * # Safety
 * `model` must be valid; `path` a valid NUL-terminated string.
 */
enum TrifuseStatus trifuse_model_save(const struct TrifuseModel *model, const char *path);

/**
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` a valid pointer.
 */
enum TrifuseStatus trifuse_model_load(const char *path, struct TrifuseModel **out);

/**
 * Generate a synthetic dataset from a JSON spec, e.g.
 * `{"kind":"parity","dims":[6,5,4],"len_range":[4,10],"noise":0.1,
 *   "seed":0,"splits":{"train":256,"valid":64,"test":64}}`.
 *
 * # Safety
 * `spec_json` must be a valid NUL-terminated string; `out` a valid pointer.
 */
enum TrifuseStatus trifuse_dataset_generate(const char *spec_json, struct TrifuseDataset **out);

/**
 * # Safety
 * `dir` must be a valid NUL-terminated string; `out` a valid pointer.
 */
enum TrifuseStatus trifuse_dataset_load(const char *dir, struct TrifuseDataset **out);

/**
 * # Safety
 * `dataset` must be valid; `dir` a valid NUL-terminated string.
 */
enum TrifuseStatus trifuse_dataset_save(const struct TrifuseDataset *dataset, const char *dir);

/**
 * # Safety
 * `dataset` must be null or a pointer returned by this library and not yet
 * freed.
 */
void trifuse_dataset_free(struct TrifuseDataset *dataset);

/**
 * Number of samples in a split (`"train"`, `"valid"`, `"test"`).
 *
 * # Safety
 * `dataset`, `split`, and `out` must be valid pointers.
 */
enum TrifuseStatus trifuse_dataset_len(const struct TrifuseDataset *dataset,
                                       const char *split,
                                       size_t *out);

/**
 * Train the model in place; on success `*report_json` holds the per-epoch
 * log as JSON (free with `trifuse_string_free`). `train_config_json` may be
 * null or empty for defaults.
 *
 * # Safety
 * `model` and `dataset` must be valid handles; `report_json` a valid
 * pointer.
 */
enum TrifuseStatus trifuse_train(struct TrifuseModel *model,
                                 const struct TrifuseDataset *dataset,
                                 const char *train_config_json,
                                 char **report_json);

/**
 * Evaluate on a split; on success `*metrics_json` holds the metric report
 * as JSON (free with `trifuse_string_free`).
 *
 * # Safety
 * `model` and `dataset` must be valid handles; `split` a valid string;
 * `metrics_json` a valid pointer.
 */
enum TrifuseStatus trifuse_evaluate(const struct TrifuseModel *model,
                                    const struct TrifuseDataset *dataset,
                                    const char *split,
                                    char **metrics_json);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must be null or a pointer returned by this library and not yet freed.
 */
void trifuse_string_free(char *s);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* TRIFUSE_H */
