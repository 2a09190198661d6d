#ifndef SDSRCNN_H
#define SDSRCNN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SdsStatus {
  SDS_STATUS_OK = 0,
  SDS_STATUS_NULL_POINTER = 1,
  SDS_STATUS_INVALID_ARGUMENT = 2,
  SDS_STATUS_IO = 3,
  SDS_STATUS_CHECKPOINT = 4,
  SDS_STATUS_CONFIG = 5,
  SDS_STATUS_BUFFER_TOO_SMALL = 6,
  SDS_STATUS_INTERNAL = 7,
} SdsStatus;

/**
 * Opaque detector: a proposal network, an optional classifier network and
 * the pipeline settings.
 */
typedef struct SdsDetector SdsDetector;

/**
 * Box with top-left corner `(x, y)`, width `w` and height `h` in pixels.
 */
typedef struct SdsBox {
  double x;
  double y;
  double w;
  double h;
} SdsBox;

typedef struct SdsDetection {
  struct SdsBox bbox;
  double fused_score;
  double rpn_score;
  /**
   * Meaningful only when `has_bcn_score` is nonzero.
   */
  double bcn_score;
  int32_t has_bcn_score;
} SdsDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty when none. The
 * pointer stays valid until the next failing call on this thread.
 */
const char *sds_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sds_version(void);

/**
 * Load a detector from checkpoint files. `bcn_path` and `config_path` may
 * be null (proposal scores only; default settings).
 */
enum SdsStatus sds_detector_new(const char *rpn_path,
                                const char *bcn_path,
                                const char *config_path,
                                struct SdsDetector **out);

void sds_detector_free(struct SdsDetector *detector);

/**
 * Detect pedestrians in a row-major 8-bit grayscale image. Up to
 * `capacity` detections are written in descending fused score; `count`
 * receives the total found. Returns `BufferTooSmall` when it exceeds
 * `capacity`.
 */
enum SdsStatus sds_detector_detect(const struct SdsDetector *detector,
                                   const uint8_t *pixels,
                                   size_t width,
                                   size_t height,
                                   struct SdsDetection *out,
                                   size_t capacity,
                                   size_t *count);

/**
 * Intersection over union of two boxes with positive size.
 */
enum SdsStatus sds_iou(const struct SdsBox *a, const struct SdsBox *b, double *out);

/**
 * Greedy non-maximum suppression. Kept indices go to `keep` (room for `n`
 * entries) in descending score order; `kept` receives their number.
 */
enum SdsStatus sds_nms(const struct SdsBox *boxes,
                       const double *scores,
                       size_t n,
                       double iou_threshold,
                       size_t *keep,
                       size_t *kept);

/**
 * Foreground probability of the summed `(background, foreground)` logits
 * of the two stages.
 */
double sds_fuse_scores(double rpn_bg, double rpn_fg, double bcn_bg, double bcn_fg);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SDSRCNN_H */
