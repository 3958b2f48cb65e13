#ifndef HEATTRACK_H
#define HEATTRACK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  HT_STATUS_OK = 0,
  HT_STATUS_NULL_POINTER = 1,
  HT_STATUS_INVALID_ARGUMENT = 2,
  HT_STATUS_SHAPE = 3,
  HT_STATUS_IO = 4,
  HT_STATUS_CHECKPOINT = 5,
  HT_STATUS_CONFIG = 6,
  HT_STATUS_NON_FINITE = 7,
  HT_STATUS_PANIC = 8,
} HtStatus;

/**
 * Opaque model handle.
 */
typedef struct HtModel HtModel;

typedef struct {
  double accuracy;
  double precision;
  double recall;
  double f1;
  /**
   * False when the metric's denominator is zero; the value is then 0.
   */
  bool accuracy_defined;
  bool precision_defined;
  bool recall_defined;
  bool f1_defined;
} HtMetrics;

typedef struct {
  bool found;
  double x;
  double y;
  double confidence;
} HtDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread. Empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *ht_last_error(void);

/**
 * Library version, a static NUL-terminated string.
 */
const char *ht_version(void);

/**
 * Fresh model. `variant` is one of `v2`, `v4like`, `v2_mdd`, `v2_rstr`, `v5`.
 * Height and width must be multiples of 8 and of the patch size.
 *
 * # Safety
 * `variant` must be a NUL-terminated string and `out` a valid pointer.
 */
HtStatus ht_model_new(const char *variant,
                      size_t height,
                      size_t width,
                      uint64_t seed,
                      HtModel **out);

/**
 * Model from a checkpoint manifest written by `heattrack train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
HtStatus ht_model_load(const char *path, HtModel **out);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from `ht_model_new` or `ht_model_load` and not be used afterwards.
 */
void ht_model_free(HtModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
HtStatus ht_model_param_count(const HtModel *model, size_t *out);

/**
 * Multiply-accumulates per sample at the model's resolution.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
HtStatus ht_model_macs(const HtModel *model, uint64_t *out);

/**
 * # Safety
 * `model` must be a live handle; `height` and `width` valid pointers.
 */
HtStatus ht_model_size(const HtModel *model, size_t *height, size_t *width);

/**
 * Heatmaps for one window of three consecutive frames.
 *
 * `frames` holds `3 · 3 · H · W` values in `[0, 1]`: frame-major, then planar
 * RGB, then rows. `heatmaps` receives `3 · H · W` probabilities, one plane per frame.
 *
 * # Safety
 * `frames` must point to `frames_len` readable values and `heatmaps` to
 * `heatmaps_len` writable ones.
 */
HtStatus ht_model_infer(const HtModel *model,
                        const double *frames,
                        size_t frames_len,
                        double *heatmaps,
                        size_t heatmaps_len);

/**
 * Accuracy, precision, recall and F1 from confusion counts.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
HtStatus ht_compute_metrics(uint64_t tp,
                            uint64_t fp1,
                            uint64_t fp2,
                            uint64_t tn,
                            uint64_t fn_,
                            HtMetrics *out);

/**
 * Centroid of the largest 8-connected region strictly above `threshold`
 * in a row-major `height × width` heatmap.
 *
 * # Safety
 * `heatmap` must point to `height · width` readable values and `out` be valid.
 */
HtStatus ht_detect_peak(const double *heatmap,
                        size_t height,
                        size_t width,
                        double threshold,
                        HtDetection *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HEATTRACK_H */
