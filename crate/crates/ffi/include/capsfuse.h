#ifndef CAPSFUSE_H
#define CAPSFUSE_H

/* Generated by cbindgen from capsfuse-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Status codes mirroring the CLI exit codes where they overlap.
 */
typedef enum CfStatus {
  CF_STATUS_OK = 0,
  /*
   IO, format, or other internal failure; see `cf_last_error`.
   */
  CF_STATUS_ERROR = 1,
  CF_STATUS_INVALID_CONFIG = 2,
  CF_STATUS_DIMENSION_MISMATCH = 3,
  CF_STATUS_DEGENERATE_DATA = 4,
  CF_STATUS_INVALID_MATRIX = 5,
  /*
   A required pointer argument was null.
   */
  CF_STATUS_NULL_POINTER = 6,
  /*
   A string argument was not valid UTF-8.
   */
  CF_STATUS_INVALID_UTF8 = 7,
  /*
   A caller-provided buffer has the wrong length.
   */
  CF_STATUS_BUFFER_SIZE = 8,
} CfStatus;

/*
 An opaque multimodal dataset handle.
 */
typedef struct CfDataset CfDataset;

/*
 An opaque trained-model handle (architecture, weights, train settings).
 */
typedef struct CfModel CfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *cf_version(void);

/*
 Message for the last failure on this thread. The pointer stays valid
 until this thread's next call into the library.
 */
const char *cf_last_error(void);

/*
 Free a string returned by this library.

 # Safety
 `s` must be a pointer previously returned by a `cf_*` function that
 documents `cf_string_free`, and must not have been freed already.
 */
void cf_string_free(char *s);

/*
 Generate a synthetic dataset from a JSON generator spec (the same schema
 the CLI writes as a sidecar: n, dims, mode, positive_rate, noise_sigma,
 seed).

 # Safety
 `spec_json` must be a NUL-terminated string; `out` must be a valid
 pointer. On `Ok`, `*out` owns a dataset that must be released with
 `cf_dataset_free`.
 */
enum CfStatus cf_dataset_synth(const char *spec_json, struct CfDataset **out);

/*
 Read a dataset file (`.csv` for the CSV format, binary otherwise).

 # Safety
 `path` must be NUL-terminated; `out` must be valid. On `Ok`, `*out` must
 be released with `cf_dataset_free`.
 */
enum CfStatus cf_dataset_read(const char *path, struct CfDataset **out);

/*
 Write a dataset in the binary format.

 # Safety
 `ds` must be a live dataset handle; `path` must be NUL-terminated.
 */
enum CfStatus cf_dataset_write(const struct CfDataset *ds, const char *path);

/*
 Number of samples, or 0 for a null handle.

 # Safety
 `ds` must be null or a live dataset handle.
 */
uint64_t cf_dataset_n_samples(const struct CfDataset *ds);

/*
 # Safety
 `ds` must be null or an owned dataset handle not freed before.
 */
void cf_dataset_free(struct CfDataset *ds);

/*
 Train a model on a dataset. `config_json` uses the CLI run-config schema
 (`model` and `train` sections; `data` and `output` are ignored here), or
 null for defaults.

 # Safety
 `ds` must be a live dataset handle, `config_json` NUL-terminated or null,
 `out` valid. On `Ok`, `*out` must be released with `cf_model_free`.
 */
enum CfStatus cf_train(const struct CfDataset *ds, const char *config_json, struct CfModel **out);

/*
 # Safety
 `path` NUL-terminated, `out` valid. On `Ok`, `*out` must be released with
 `cf_model_free`.
 */
enum CfStatus cf_model_read(const char *path, struct CfModel **out);

/*
 # Safety
 `model` must be a live model handle; `path` NUL-terminated.
 */
enum CfStatus cf_model_write(const struct CfModel *model, const char *path);

/*
 Strategy name of a model ("capsnet", "addition", ...). Free with
 `cf_string_free`.

 # Safety
 `model` must be null or a live model handle.
 */
char *cf_model_strategy(const struct CfModel *model);

/*
 Number of output classes, or 0 for a null handle.

 # Safety
 `model` must be null or a live model handle.
 */
uint64_t cf_model_n_classes(const struct CfModel *model);

/*
 Predict class probabilities for every sample, row-major into `out_probs`,
 which must hold exactly `n_samples * n_classes` values.

 # Safety
 `model` and `ds` must be live handles; `out_probs` must point to
 `out_len` writable doubles.
 */
enum CfStatus cf_model_predict(const struct CfModel *model,
                               const struct CfDataset *ds,
                               double *out_probs,
                               size_t out_len);

/*
 Evaluate a model on a dataset, reconstructing the validation/test split
 from the stored training settings. Writes a JSON metric report to
 `*out_json`; free it with `cf_string_free`.

 # Safety
 `model` and `ds` must be live handles; `out_json` must be valid.
 */
enum CfStatus cf_model_evaluate_json(const struct CfModel *model,
                                     const struct CfDataset *ds,
                                     double fpr_max,
                                     char **out_json);

/*
 # Safety
 `model` must be null or an owned model handle not freed before.
 */
void cf_model_free(struct CfModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAPSFUSE_H */
