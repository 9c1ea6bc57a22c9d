#ifndef METAPATCH_H
#define METAPATCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MpStatus {
  MP_STATUS_OK = 0,
  MP_STATUS_NULL_POINTER = 1,
  MP_STATUS_INVALID_ARGUMENT = 2,
  MP_STATUS_SHAPE = 3,
  MP_STATUS_IO = 4,
  MP_STATUS_FORMAT = 5,
  MP_STATUS_CONFIG = 6,
  MP_STATUS_RUNTIME = 7,
  MP_STATUS_PANIC = 8,
} MpStatus;

/**
 * A labelled image set.
 */
typedef struct MpDataset MpDataset;

/**
 * A trained classifier.
 */
typedef struct MpModel MpModel;

/**
 * A perturbation together with its threat model.
 */
typedef struct MpPatch MpPatch;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length excluding the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t mp_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mp_version(void);

/**
 * Loads a checkpoint written by `metapatch train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MpStatus mp_model_load(const char *path, struct MpModel **out);

/**
 * Trains a model from a JSON run configuration on its training split.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` must be writable.
 */
enum MpStatus mp_train(const char *config_json, struct MpModel **out);

/**
 * Saves a model checkpoint.
 *
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum MpStatus mp_model_save(const struct MpModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void mp_model_free(struct MpModel *model);

/**
 * Writes the model's input shape `[C, H, W]` and class count.
 *
 * # Safety
 * `model` must be a live handle; `shape` must point to 3 writable values.
 */
enum MpStatus mp_model_info(const struct MpModel *model, size_t *shape, size_t *classes);

/**
 * Predicts labels for `n` images stored contiguously as `[n, C, H, W]`.
 *
 * # Safety
 * `x` must point to `n * C * H * W` values and `labels` to `n` writable values.
 */
enum MpStatus mp_model_predict(struct MpModel *model, const double *x, size_t n, size_t *labels);

/**
 * Generates the synthetic shapes dataset.
 *
 * # Safety
 * `out` must be writable.
 */
enum MpStatus mp_dataset_synth(size_t per_class,
                               size_t classes,
                               size_t resolution,
                               uint64_t seed,
                               struct MpDataset **out);

/**
 * Loads an image folder (one subdirectory per class).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MpStatus mp_dataset_load(const char *path, size_t resolution, struct MpDataset **out);

/**
 * Splits into training and evaluation parts (one of every five samples held out).
 *
 * # Safety
 * `data` must be a live handle; `train` and `eval` must be writable.
 */
enum MpStatus mp_dataset_split(const struct MpDataset *data,
                               uint64_t seed,
                               struct MpDataset **train,
                               struct MpDataset **eval);

/**
 * # Safety
 * `data` must be a live handle; `len` writable.
 */
enum MpStatus mp_dataset_len(const struct MpDataset *data, size_t *len);

/**
 * # Safety
 * `data` must be null or a handle not yet freed.
 */
void mp_dataset_free(struct MpDataset *data);

/**
 * Loads a patch file for images of shape `[channels, height, width]`.
 * `spec_json` is the perturbation spec, e.g.
 * `{"mode":"patch","channels":3,"height":8,"width":8,"max_dy":8,"max_dx":8}`.
 *
 * # Safety
 * `path` and `spec_json` must be NUL-terminated strings; `out` must be writable.
 */
enum MpStatus mp_patch_load(const char *path,
                            const char *spec_json,
                            size_t channels,
                            size_t height,
                            size_t width,
                            struct MpPatch **out);

/**
 * Copies up to `len` patch values into `buf` and stores the total count in `count`.
 *
 * # Safety
 * `patch` must be a live handle; `buf` null or `len` writable values; `count` writable.
 */
enum MpStatus mp_patch_values(const struct MpPatch *patch, double *buf, size_t len, size_t *count);

/**
 * # Safety
 * `patch` must be null or a handle not yet freed.
 */
void mp_patch_free(struct MpPatch *patch);

/**
 * Accuracy of `model` on `data` with `patch` applied at per-sample placements
 * derived from `seed`; clean accuracy when `patch` is null.
 *
 * # Safety
 * `model` and `data` must be live handles; `patch` null or live; `out` writable.
 */
enum MpStatus mp_accuracy_under(struct MpModel *model,
                                const struct MpDataset *data,
                                const struct MpPatch *patch,
                                uint64_t seed,
                                double *out);

/**
 * Band-limits a `[channels, height, width]` array to DFT radius `cutoff`
 * while keeping every value in `[lo, hi]`.
 *
 * # Safety
 * `input` and `output` must each hold `channels * height * width` values.
 */
enum MpStatus mp_low_pass(const double *input,
                          double *output,
                          size_t channels,
                          size_t height,
                          size_t width,
                          double cutoff,
                          double lo,
                          double hi);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METAPATCH_H */
