#ifndef SILI_H
#define SILI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SiliStatus {
  SILI_STATUS_OK = 0,
  SILI_STATUS_NULL_POINTER = 1,
  SILI_STATUS_INVALID_ARGUMENT = 2,
  SILI_STATUS_IO = 3,
  SILI_STATUS_CHECKPOINT = 4,
  SILI_STATUS_NUMERIC = 5,
  SILI_STATUS_INTERNAL = 6,
  SILI_STATUS_PANIC = 7,
} SiliStatus;

/**
 * A loaded model. Create with [`sili_model_load`], release with
 * [`sili_model_free`].
 */
typedef struct SiliModel SiliModel;

typedef struct SiliConfusion {
  uint64_t tp;
  uint64_t fp;
  uint64_t fn_;
  uint64_t tn;
} SiliConfusion;

typedef struct SiliMetrics {
  double precision;
  double recall;
  double f1;
  double iou;
  double oa;
} SiliMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *sili_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sili_version(void);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `checkpoint_dir` must be a NUL-terminated UTF-8 path and `out` a valid
 * pointer. On success `*out` owns a model that must be released with
 * [`sili_model_free`]; on failure `*out` is set to null.
 */
enum SiliStatus sili_model_load(const char *checkpoint_dir, struct SiliModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`sili_model_load`] and not have been freed.
 */
void sili_model_free(struct SiliModel *model);

/**
 * Predicts a change mask for one image pair.
 *
 * Images are interleaved 8-bit RGB, row-major. The smaller image is treated
 * as the low-resolution observation. `ratio <= 0` takes the ratio of the
 * image heights. `mask_out` receives one byte per pixel of the larger image
 * (1 = change) and must hold `mask_len >= hr_height · hr_width` bytes.
 *
 * # Safety
 * `model` must be a live model; `pre` and `post` must point to
 * `height · width · 3` readable bytes each; `mask_out` to `mask_len`
 * writable bytes.
 */
enum SiliStatus sili_model_predict(const struct SiliModel *model,
                                   const uint8_t *pre,
                                   size_t pre_height,
                                   size_t pre_width,
                                   const uint8_t *post,
                                   size_t post_height,
                                   size_t post_width,
                                   double ratio,
                                   uint8_t *mask_out,
                                   size_t mask_len);

/**
 * Confusion counts of a predicted mask against a reference, both `len`
 * bytes of 0/1.
 *
 * # Safety
 * `pred` and `gt` must point to `len` readable bytes; `out` must be valid.
 */
enum SiliStatus sili_confusion(const uint8_t *pred,
                               const uint8_t *gt,
                               size_t len,
                               struct SiliConfusion *out);

/**
 * Precision, recall, F1, IoU and overall accuracy from confusion counts.
 *
 * # Safety
 * `counts` and `out` must be valid pointers.
 */
enum SiliStatus sili_metrics(const struct SiliConfusion *counts, struct SiliMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SILI_H */
