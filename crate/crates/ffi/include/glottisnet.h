#ifndef GLOTTISNET_H
#define GLOTTISNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GnStatus {
  GN_STATUS_OK = 0,
  GN_STATUS_NULL_POINTER = 1,
  GN_STATUS_INVALID_ARGUMENT = 2,
  GN_STATUS_VALIDATION = 3,
  GN_STATUS_DIMENSION = 4,
  GN_STATUS_INDEX = 5,
  GN_STATUS_CONTRACT = 6,
  GN_STATUS_MISSING_TENSOR = 7,
  GN_STATUS_FORMAT = 8,
  GN_STATUS_CORRUPT = 9,
  GN_STATUS_PARSE = 10,
  GN_STATUS_IMAGE = 11,
  GN_STATUS_IO = 12,
  GN_STATUS_BUFFER_TOO_SMALL = 13,
  GN_STATUS_PANIC = 14,
} GnStatus;

// Opaque loaded model.
typedef struct GnModel GnModel;

// Box corners in pixels.
typedef struct GnBox {
  double x1;
  double y1;
  double x2;
  double y2;
} GnBox;

typedef struct GnDetection {
  struct GnBox bbox;
  double score;
  uint32_t class_id;
} GnDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *gn_version(void);

// Copies the calling thread's last error message into `buf` (truncated,
// always NUL-terminated when `cap > 0`) and returns its full length in bytes
// without the terminator; 0 when there is none.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
size_t gn_last_error_message(char *buf, size_t cap);

// Loads a weight file. `config_json` may be null to use the config embedded
// in the file (or the default config).
//
// # Safety
// `path` and a non-null `config_json` must be NUL-terminated strings; `out`
// must be a valid pointer.
enum GnStatus gn_model_load(const char *path, const char *config_json, struct GnModel **out);

// Seeded random model (offset networks zero), mainly for tests and benchmarks.
//
// # Safety
// A non-null `config_json` must be a NUL-terminated string; `out` must be valid.
enum GnStatus gn_model_new_random(const char *config_json, uint64_t seed, struct GnModel **out);

// # Safety
// `model` must be null or a handle from this library not yet freed.
void gn_model_free(struct GnModel *model);

// Square network input side in pixels; 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t gn_model_input_size(const struct GnModel *model);

// Size in bytes the model's weight file would have.
//
// # Safety
// `model` must be a live handle and `out` valid.
enum GnStatus gn_model_serialized_size(const struct GnModel *model, size_t *out);

// Detects on an interleaved 8-bit RGB image. Writes up to `capacity`
// detections (highest score first) and the total count to `out_count`;
// returns `GN_STATUS_BUFFER_TOO_SMALL` when `capacity` is smaller than it.
//
// # Safety
// `rgb` must hold `width * height * 3` bytes, `dets` must hold `capacity`
// elements (may be null when `capacity == 0`), `out_count` must be valid.
enum GnStatus gn_model_detect_rgb8(const struct GnModel *model,
                                   const uint8_t *rgb,
                                   size_t width,
                                   size_t height,
                                   struct GnDetection *dets,
                                   size_t capacity,
                                   size_t *out_count);

// Intersection over union of two boxes.
//
// # Safety
// All pointers must be valid.
enum GnStatus gn_iou(const struct GnBox *a, const struct GnBox *b, double *out);

// Matching cost `-lambda * log_softmax(logits)[class_id] + (1 - lambda) * (1 - iou)`.
//
// # Safety
// `logits` must hold `num_logits` values; `out` must be valid.
enum GnStatus gn_assign_cost(const double *logits,
                             size_t num_logits,
                             size_t class_id,
                             double iou,
                             double lambda,
                             double *out);

// Runs label assignment on an instance document (the `assign` command's
// input format) and returns the JSON report in `*out`, to be released with
// [`gn_string_free`].
//
// # Safety
// `instances_json` must be a NUL-terminated string and `out` valid.
enum GnStatus gn_assign_json(const char *instances_json, char **out);

// Evaluates detections (COCO results array or a `detect` output document)
// against a COCO-style annotation document; returns the JSON report.
//
// # Safety
// Both inputs must be NUL-terminated strings and `out` valid.
enum GnStatus gn_eval_json(const char *gt_json, const char *dets_json, char **out);

// # Safety
// `s` must be null or a string returned by this library not yet freed.
void gn_string_free(char *s);

// Finite-difference check of the deformable convolution gradients. Writes
// the max relative error for input, weights and offsets to
// `out_max_rel_errors[0..3]` and whether all were within tolerance.
//
// # Safety
// `out_max_rel_errors` must hold 3 values and `out_passed` be valid.
enum GnStatus gn_gradcheck(uint64_t seed,
                           double eps,
                           size_t trials,
                           double *out_max_rel_errors,
                           bool *out_passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GLOTTISNET_H */
