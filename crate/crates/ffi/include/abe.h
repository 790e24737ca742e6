#ifndef ABE_H
#define ABE_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of an FFI call. Codes 1 to 4 match the `abe` binary's exit codes.
 */
typedef enum AbeStatus {
  ABE_STATUS_OK = 0,
  ABE_STATUS_INTERNAL = 1,
  ABE_STATUS_CONFIG = 2,
  ABE_STATUS_DATA = 3,
  ABE_STATUS_NUMERICAL = 4,
  /**
   * A required pointer was null or a string was not UTF-8.
   */
  ABE_STATUS_INVALID_ARGUMENT = 5,
  /**
   * Rust code panicked; the handle involved should be discarded.
   */
  ABE_STATUS_PANIC = 6,
} AbeStatus;

/**
 * Immutable image dataset.
 */
typedef struct AbeDataset AbeDataset;

/**
 * Trained ensemble restored from a checkpoint.
 */
typedef struct AbeModel AbeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *abe_last_error(void);

/**
 * Generate a synthetic dataset from `key = value` spec text.
 *
 * # Safety
 * `spec` must be a nul-terminated string; `out` must be writable.
 */
enum AbeStatus abe_dataset_generate(const char *spec, struct AbeDataset **out);

/**
 * Load a dataset file.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum AbeStatus abe_dataset_load(const char *path, struct AbeDataset **out);

/**
 * Save a dataset to `path`.
 *
 * # Safety
 * `ds` must come from this library; `path` must be a nul-terminated string.
 */
enum AbeStatus abe_dataset_save(const struct AbeDataset *ds, const char *path);

/**
 * Shape `[N, C, H, W]` of a dataset.
 *
 * # Safety
 * `ds` must come from this library; `shape` must point to 4 writable values.
 */
enum AbeStatus abe_dataset_shape(const struct AbeDataset *ds, size_t *shape);

/**
 * Copy the `N` labels into `labels`.
 *
 * # Safety
 * `ds` must come from this library; `labels` must hold `len` values.
 */
enum AbeStatus abe_dataset_labels(const struct AbeDataset *ds, uint32_t *labels, size_t len);

/**
 * Release a dataset. Null is ignored.
 *
 * # Safety
 * `ds` must come from this library and not be used afterwards.
 */
void abe_dataset_free(struct AbeDataset *ds);

/**
 * Restore the model stored in a checkpoint file.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum AbeStatus abe_model_load(const char *path, struct AbeModel **out);

/**
 * Number of learners `M` and per-learner embedding size `d`.
 *
 * # Safety
 * `model` must come from this library; outputs must be writable.
 */
enum AbeStatus abe_model_dims(const struct AbeModel *model, size_t *learners, size_t *dim);

/**
 * Embed every image of `ds`. Writes `N * M * d` values, row-major by
 * sample then learner, into `out`, which must hold exactly `len` values.
 *
 * # Safety
 * Handles must come from this library; `out` must hold `len` values.
 */
enum AbeStatus abe_model_embed(const struct AbeModel *model,
                               const struct AbeDataset *ds,
                               double *out,
                               size_t len);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void abe_model_free(struct AbeModel *model);

/**
 * Ensemble Recall@K of `n` samples with `learners` slices of `dim` values
 * each (layout as written by [`abe_model_embed`]).
 *
 * # Safety
 * `embeddings` must hold `n * learners * dim` values and `labels` `n`.
 */
enum AbeStatus abe_recall_at_k(const double *embeddings,
                               const uint32_t *labels,
                               size_t n,
                               size_t learners,
                               size_t dim,
                               size_t k,
                               double *recall);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ABE_H */
