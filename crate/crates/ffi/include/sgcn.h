#ifndef SGCN_H
#define SGCN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by all functions.
typedef enum SgcnStatus {
  SGCN_STATUS_OK = 0,
  SGCN_STATUS_NULL_POINTER = 1,
  SGCN_STATUS_INVALID_ARGUMENT = 2,
  SGCN_STATUS_IO = 3,
  SGCN_STATUS_NOT_A_CHECKPOINT = 4,
  SGCN_STATUS_UNSUPPORTED_VERSION = 5,
  SGCN_STATUS_CORRUPT_CHECKPOINT = 6,
  SGCN_STATUS_EMPTY_TRAJECTORY = 7,
  SGCN_STATUS_BUFFER_TOO_SMALL = 8,
  SGCN_STATUS_PANIC = 9,
} SgcnStatus;

// Opaque handle to a loaded model.
typedef struct SgcnHandle SgcnHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *sgcn_version(void);

// Message of the last failed call on this thread, empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *sgcn_last_error_message(void);

// Loads a checkpoint file. On success `*out` owns a handle that must be
// released with [`sgcn_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum SgcnStatus sgcn_model_load(const char *path, struct SgcnHandle **out);

// Loads a checkpoint from memory.
//
// # Safety
// `data` must point to `len` readable bytes and `out` be writable.
enum SgcnStatus sgcn_model_load_bytes(const uint8_t *data, size_t len, struct SgcnHandle **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `h` must be null or a handle not yet freed.
void sgcn_model_free(struct SgcnHandle *h);

// Number of classes, or 0 for a null handle.
//
// # Safety
// `h` must be null or a live handle.
size_t sgcn_model_num_classes(const struct SgcnHandle *h);

// Copies the name of class `index` into `buf` with a trailing NUL.
// `*required` receives the buffer size needed, NUL included, so a call with
// `len == 0` queries it.
//
// # Safety
// `buf` must hold `len` bytes (may be null when `len == 0`); `required` may be null.
enum SgcnStatus sgcn_model_class_name(const struct SgcnHandle *h,
                                      size_t index,
                                      char *buf,
                                      size_t len,
                                      size_t *required);

// Recognizes one character.
//
// `points` holds interleaved `x, y` pairs for all strokes back to back;
// stroke `i` has `stroke_lengths[i]` points. The `topk` best classes are
// written to `out_classes` with their softmax scores in `out_scores`, best
// first.
//
// # Safety
// `points` must hold `2 * sum(stroke_lengths)` doubles, `stroke_lengths`
// `num_strokes` entries, and both outputs `topk` entries.
enum SgcnStatus sgcn_recognize(const struct SgcnHandle *h,
                               const double *points,
                               const size_t *stroke_lengths,
                               size_t num_strokes,
                               size_t topk,
                               size_t *out_classes,
                               double *out_scores);

// Ratio of a 3×3 image convolution cost on `height × width` pixels to a
// graph convolution over `num_nodes` nodes with `avg_edges` neighbors each.
//
// # Safety
// `out` must be writable.
enum SgcnStatus sgcn_cost_ratio(uint64_t height,
                                uint64_t width,
                                uint64_t num_nodes,
                                double avg_edges,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SGCN_H */
