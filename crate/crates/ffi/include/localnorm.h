#ifndef LOCALNORM_H
#define LOCALNORM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LnEvalMode {
  LN_EVAL_MODE_BATCH = 0,
  LN_EVAL_MODE_VOTING = 1,
  LN_EVAL_MODE_FROZEN_BN = 2,
  LN_EVAL_MODE_SINGLE = 3,
  LN_EVAL_MODE_SINGLE_VOTING = 4,
  LN_EVAL_MODE_SINGLE_VOTING_ROT90 = 5,
} LnEvalMode;

typedef enum LnNoiseFamily {
  LN_NOISE_FAMILY_AGN = 0,
  LN_NOISE_FAMILY_APN = 1,
  LN_NOISE_FAMILY_MBN = 2,
} LnNoiseFamily;

typedef enum LnStatus {
  LN_STATUS_OK = 0,
  LN_STATUS_NULL_POINTER = 1,
  LN_STATUS_INVALID_ARGUMENT = 2,
  LN_STATUS_SHAPE = 3,
  LN_STATUS_IO = 4,
  LN_STATUS_FORMAT = 5,
  LN_STATUS_DEGENERATE = 6,
  LN_STATUS_NUMERIC = 7,
  LN_STATUS_INTERNAL = 8,
  LN_STATUS_PANIC = 9,
} LnStatus;

/**
 * Opaque model handle.
 */
typedef struct LnModel LnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Crate version as a static NUL-terminated string.
 */
const char *ln_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *ln_last_error(void);

/**
 * Loads an `f32` or `f64` checkpoint into a new handle written to `*out`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum LnStatus ln_model_load(const char *path, struct LnModel **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from [`ln_model_load`] and not be used afterwards.
 */
void ln_model_free(struct LnModel *model);

/**
 * Writes `[height, width, channels]` to `shape` and the class count to `classes`.
 *
 * # Safety
 * `model` must be a live handle, `shape` must hold 3 values.
 */
enum LnStatus ln_model_info(const struct LnModel *model, size_t *shape, size_t *classes);

/**
 * Predicts `n` images of the model's input shape from `pixels` into `labels`.
 * `batch_size` sets the evaluation batch for batched modes; `seed` drives
 * group selection in single-image modes.
 *
 * # Safety
 * `pixels` must hold `n * H * W * C` floats and `labels` `n` values.
 */
enum LnStatus ln_model_predict(const struct LnModel *model,
                               const float *pixels,
                               size_t n,
                               enum LnEvalMode mode,
                               size_t batch_size,
                               uint64_t seed,
                               uint32_t *labels);

/**
 * Degrades an `[n, h, w, c]` pixel buffer in place; image `i` draws from a
 * generator derived from `(seed, i)`, matching the library's batch noise.
 *
 * # Safety
 * `pixels` must hold `n * h * w * c` floats.
 */
enum LnStatus ln_apply_noise(float *pixels,
                             size_t n,
                             size_t h,
                             size_t w,
                             size_t c,
                             enum LnNoiseFamily family,
                             double sigma,
                             uint64_t seed);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* LOCALNORM_H */
