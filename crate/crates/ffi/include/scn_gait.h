#ifndef SCN_GAIT_H
#define SCN_GAIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum ScnStatus {
  SCN_STATUS_OK = 0,
  SCN_STATUS_NULL_POINTER = 1,
  SCN_STATUS_INVALID_ARGUMENT = 2,
  SCN_STATUS_BUFFER_TOO_SMALL = 3,
  SCN_STATUS_CHECKPOINT = 4,
  SCN_STATUS_IO = 5,
  SCN_STATUS_DIMENSION = 6,
  SCN_STATUS_SEQUENCE_TOO_SHORT = 7,
  SCN_STATUS_DEGENERATE_FRAME = 8,
  SCN_STATUS_NON_FINITE = 9,
  SCN_STATUS_INTERNAL = 10,
  SCN_STATUS_PANIC = 11,
} ScnStatus;

/**
 * Template kinds accepted by [`scn_template`].
 */
typedef enum ScnTemplateKind {
  SCN_TEMPLATE_KIND_DIFF = 0,
  SCN_TEMPLATE_KIND_MULTI_DIFF = 1,
  SCN_TEMPLATE_KIND_STATIC_EXCL_MEAN = 2,
  SCN_TEMPLATE_KIND_STATIC_EXCL_MEDIAN = 3,
} ScnTemplateKind;

/**
 * Opaque handle to a frozen model.
 */
typedef struct ScnModel ScnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint written by `scn train`.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum ScnStatus scn_model_load(const char *path, struct ScnModel **out);

/**
 * Creates a model with the default configuration and freshly initialized
 * weights.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum ScnStatus scn_model_init_default(uint64_t seed, struct ScnModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void scn_model_free(struct ScnModel *model);

/**
 * Number of values in one sequence feature, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t scn_model_feature_len(const struct ScnModel *model);

/**
 * Aligned frame size the model expects.
 *
 * # Safety
 * `model` must be a live handle; `height` and `width` valid pointers.
 */
enum ScnStatus scn_model_input_size(const struct ScnModel *model, size_t *height, size_t *width);

/**
 * Extracts the feature of `n_frames` aligned frames stored row-major as
 * `[n_frames, height, width]` with the model's input size.
 *
 * # Safety
 * `frames` must hold `n_frames * height * width` values and `out` `out_len`.
 */
enum ScnStatus scn_model_extract(const struct ScnModel *model,
                                 const double *frames,
                                 size_t n_frames,
                                 double *out,
                                 size_t out_len);

/**
 * Crops, scales and centers an 8-bit grayscale silhouette (row-major,
 * `height * width` bytes, foreground above 127) into `out_height * out_width`
 * values in {0, 1}.
 *
 * # Safety
 * `pixels` must hold `height * width` bytes and `out` `out_len` values.
 */
enum ScnStatus scn_align_frame(const uint8_t *pixels,
                               size_t height,
                               size_t width,
                               size_t out_height,
                               size_t out_width,
                               double *out,
                               size_t out_len);

/**
 * Motion template of a `[n, channels, height, width]` feature sequence.
 * Writes `[m, channels, height, width]` values and stores `m` in
 * `out_frames`.
 *
 * # Safety
 * `features` must hold `n * channels * height * width` values, `out`
 * `out_len`, and `out_frames` must be a valid pointer.
 */
enum ScnStatus scn_template(enum ScnTemplateKind kind,
                            const double *features,
                            size_t n,
                            size_t channels,
                            size_t height,
                            size_t width,
                            double *out,
                            size_t out_len,
                            size_t *out_frames);

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *scn_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCN_GAIT_H */
