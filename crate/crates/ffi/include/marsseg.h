#ifndef MARSSEG_H
#define MARSSEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum MsegStatus {
  MSEG_STATUS_OK = 0,
  // A required pointer was NULL.
  MSEG_STATUS_NULL_POINTER = 1,
  // Bad configuration or argument value.
  MSEG_STATUS_CONFIG = 2,
  // Training diverged.
  MSEG_STATUS_NON_FINITE = 3,
  // A dataset or split with no samples.
  MSEG_STATUS_EMPTY = 4,
  // Image extents the network cannot take.
  MSEG_STATUS_GEOMETRY = 5,
  // Unreadable or corrupt checkpoint.
  MSEG_STATUS_CHECKPOINT = 6,
  MSEG_STATUS_IO = 7,
  // Caller-provided buffer too small.
  MSEG_STATUS_BUFFER_TOO_SMALL = 8,
  // Any other library error.
  MSEG_STATUS_INTERNAL = 9,
  // A Rust panic was caught at the boundary.
  MSEG_STATUS_PANIC = 10,
} MsegStatus;

// Accumulated per-class pixel counts.
typedef struct MsegConfusion MsegConfusion;

// A trained (or freshly initialized) network.
typedef struct MsegModel MsegModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len - 1` bytes) and returns the full message length.
//
// # Safety
// `buf` must be NULL or point to `len` writable bytes.
size_t mseg_last_error(char *buf, size_t len);

// Static NUL-terminated library version.
const char *mseg_version(void);

// Loads the network stored in a training checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MsegStatus mseg_model_load(const char *path, struct MsegModel **out);

// Creates an untrained network from a preset (`tiny`, `micro`, `desk`,
// `full`) with deterministic initialization.
//
// # Safety
// `preset` must be a NUL-terminated string; `out` must be writable.
enum MsegStatus mseg_model_new(const char *preset,
                               size_t num_classes,
                               uint64_t seed,
                               struct MsegModel **out);

// # Safety
// `model` must be NULL or a handle from this library not yet freed.
void mseg_model_free(struct MsegModel *model);

// Number of classes the model predicts; 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
size_t mseg_model_num_classes(const struct MsegModel *model);

// Smallest extent >= `n` the model accepts without padding.
//
// # Safety
// `model` must be NULL or a live handle.
size_t mseg_model_admissible_extent(const struct MsegModel *model, size_t n);

// Segments one interleaved 8-bit RGB image of `height` x `width` pixels
// into `out_mask` (`height * width` class ids, row-major). With
// `auto_pad` nonzero, inadmissible extents are padded and the result
// cropped back; otherwise they yield `MSEG_STATUS_GEOMETRY`.
//
// # Safety
// `rgb` must point to `3 * height * width` bytes and `out_mask` to
// `mask_len` writable bytes.
enum MsegStatus mseg_model_predict(const struct MsegModel *model,
                                   const uint8_t *rgb,
                                   size_t height,
                                   size_t width,
                                   int32_t auto_pad,
                                   uint8_t *out_mask,
                                   size_t mask_len);

// Empty confusion matrix over `num_classes` classes.
//
// # Safety
// `out` must be writable.
enum MsegStatus mseg_confusion_new(size_t num_classes, struct MsegConfusion **out);

// # Safety
// `conf` must be NULL or a live handle.
void mseg_confusion_free(struct MsegConfusion *conf);

// Adds `len` prediction/target pixel pairs; target value 255 is ignored.
//
// # Safety
// `pred` and `target` must each point to `len` bytes.
enum MsegStatus mseg_confusion_add(struct MsegConfusion *conf,
                                   const uint8_t *pred,
                                   const uint8_t *target,
                                   size_t len);

// Writes per-class IoU into `iou[0..n]`; classes absent from both
// prediction and target get NaN. `miou` (optional) receives the mean over
// present classes, NaN when none is present.
//
// # Safety
// `iou` must point to `n` writable doubles; `miou` must be NULL or writable.
enum MsegStatus mseg_confusion_iou(const struct MsegConfusion *conf,
                                   double *iou,
                                   size_t n,
                                   double *miou);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MARSSEG_H */
