#ifndef DBFEM_H
#define DBFEM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum DbfemStatus {
  DBFEM_STATUS_OK = 0,
  DBFEM_STATUS_NULL_POINTER = 1,
  DBFEM_STATUS_INVALID_ARGUMENT = 2,
  DBFEM_STATUS_IO = 3,
  DBFEM_STATUS_CHECKPOINT = 4,
  DBFEM_STATUS_SHAPE = 5,
  DBFEM_STATUS_NOT_FOUND = 6,
  DBFEM_STATUS_INTERNAL = 7,
} DbfemStatus;

/**
 * Opaque model handle.
 */
typedef struct DbfemModel DbfemModel;

/**
 * Summary metrics of a confusion matrix.
 */
typedef struct DbfemMetrics {
  double accuracy;
  double uf1;
  double uar;
  double macro_precision;
  double macro_recall;
} DbfemMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *dbfem_last_error(void);

/**
 * Creates a freshly initialised single-precision model. `preset` is
 * `"desk"` or `"paper"`; `variant` is a row label such as `"DBFEM+CAFFM"`.
 *
 * # Safety
 * `preset` and `variant` must be nul-terminated strings; `out` must be
 * writable.
 */
enum DbfemStatus dbfem_model_create(const char *preset,
                                    const char *variant,
                                    uint64_t seed,
                                    struct DbfemModel **out);

/**
 * Loads a checkpoint written by `dbfem train`.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum DbfemStatus dbfem_model_load(const char *path, struct DbfemModel **out);

/**
 * Writes the model as a checkpoint.
 *
 * # Safety
 * `model` must come from this library; `path` must be a nul-terminated
 * string.
 */
enum DbfemStatus dbfem_model_save(const struct DbfemModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and must not be used afterwards.
 */
void dbfem_model_free(struct DbfemModel *model);

/**
 * Number of learnable scalars.
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum DbfemStatus dbfem_model_param_count(const struct DbfemModel *model, uint64_t *out);

/**
 * Multiply-accumulates of one single-image forward pass.
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum DbfemStatus dbfem_model_flops(const struct DbfemModel *model, uint64_t *out);

/**
 * Per-item input extents `[C, H, W]` of the face image and region stack,
 * and the number of classes.
 *
 * # Safety
 * `model` must come from this library; `global` and `regions` must point
 * to three writable `size_t`; `classes` must be writable.
 */
enum DbfemStatus dbfem_model_input_shape(const struct DbfemModel *model,
                                         size_t *global,
                                         size_t *regions,
                                         size_t *classes);

/**
 * Computes `batch x classes` logits, row-major, into `logits`. Inputs are
 * `batch` items laid out as reported by [`dbfem_model_input_shape`];
 * a variant that ignores one input still needs a correctly sized buffer.
 *
 * # Safety
 * Each pointer must reference at least the stated number of `float`s.
 */
enum DbfemStatus dbfem_model_predict(const struct DbfemModel *model,
                                     size_t batch,
                                     const float *global,
                                     size_t global_len,
                                     const float *regions,
                                     size_t regions_len,
                                     float *logits,
                                     size_t logits_len);

/**
 * Learning rate of the step schedule at `epoch`.
 *
 * # Safety
 * `out` must be writable.
 */
enum DbfemStatus dbfem_lr_at(uint64_t epoch,
                             double lr0,
                             uint64_t decay_step,
                             double gamma,
                             double *out);

/**
 * Metrics of a `classes x classes` confusion matrix given row-major
 * (rows are true classes).
 *
 * # Safety
 * `counts` must reference `classes * classes` values; `out` must be
 * writable.
 */
enum DbfemStatus dbfem_metrics(const uint64_t *counts, size_t classes, struct DbfemMetrics *out);

/**
 * Maps a dataset emotion label to one of the five merged classes
 * (0 Happiness, 1 Surprise, 2 Disgust, 3 Repression, 4 Others).
 *
 * # Safety
 * `raw` must be a nul-terminated string; `out` must be writable.
 */
enum DbfemStatus dbfem_merge_label(const char *raw, uint32_t *out);

/**
 * Facial region of an action unit (0 ocular/brow, 1 oral, 2 mandibular,
 * 3 cheek, 4 nasal). Returns `DBFEM_STATUS_NOT_FOUND` for an unlisted AU.
 *
 * # Safety
 * `out` must be writable.
 */
enum DbfemStatus dbfem_region_for_au(uint32_t au, uint32_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DBFEM_H */
