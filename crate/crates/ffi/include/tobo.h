#ifndef TOBO_H
#define TOBO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ToboStatus {
  TOBO_STATUS_OK = 0,
  TOBO_STATUS_NULL_POINTER = 1,
  TOBO_STATUS_INVALID_ARGUMENT = 2,
  TOBO_STATUS_IO = 3,
  TOBO_STATUS_CHECKPOINT = 4,
  TOBO_STATUS_CONFIG = 5,
  /*
   A Rust panic was caught at the boundary.
   */
  TOBO_STATUS_INTERNAL = 6,
} ToboStatus;

/*
 Opaque encoder handle.
 */
typedef struct ToboEncoder ToboEncoder;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL after a
 success. Valid until the next call on the same thread.
 */
const char *tobo_last_error_message(void);

/*
 Library version, static NUL-terminated string.
 */
const char *tobo_version(void);

/*
 Untrained desk-default encoder with weights from `seed`; matches the
 encoder of a `tobo` run with the same weight seed.

 # Safety
 `out` must be a valid pointer to writable storage for a handle.
 */
enum ToboStatus tobo_encoder_random(uint64_t seed, struct ToboEncoder **out);

/*
 Encoder weights from a checkpoint manifest written by `tobo pretrain`.

 # Safety
 `path` must be a NUL-terminated string; `out` as for
 [`tobo_encoder_random`].
 */
enum ToboStatus tobo_encoder_load(const char *path, struct ToboEncoder **out);

/*
 Releases a handle; NULL is ignored.

 # Safety
 `encoder` must come from this library and not be used afterwards.
 */
void tobo_encoder_free(struct ToboEncoder *encoder);

/*
 Image side length, token width and patch-grid side of an encoder.

 # Safety
 `encoder` must be a live handle; the out pointers must be writable.
 */
enum ToboStatus tobo_encoder_shape(const struct ToboEncoder *encoder,
                                   size_t *image_size,
                                   size_t *embed_dim,
                                   size_t *grid);

/*
 Bottleneck token (CLS output of encoding every patch) of one image into
 `out[embed_dim]`.

 # Safety
 `rgb` must hold `rgb_len` floats and `out` `out_len` floats.
 */
enum ToboStatus tobo_encoder_bottleneck(const struct ToboEncoder *encoder,
                                        const float *rgb,
                                        size_t rgb_len,
                                        float *out,
                                        size_t out_len);

/*
 Unit-norm spatial features, `grid x grid x embed_dim` row-major.

 # Safety
 As for [`tobo_encoder_bottleneck`].
 */
enum ToboStatus tobo_encoder_dense_features(const struct ToboEncoder *encoder,
                                            const float *rgb,
                                            size_t rgb_len,
                                            float *out,
                                            size_t out_len);

/*
 Mean IoU over the classes present in `gt`; both maps `height x width`.

 # Safety
 `pred` and `gt` must hold `height * width` labels; `out` be writable.
 */
enum ToboStatus tobo_miou(const uint16_t *pred,
                          const uint16_t *gt,
                          size_t height,
                          size_t width,
                          double *out);

/*
 Number of masked patches, `floor(ratio * n)`.

 # Safety
 `out` must be writable.
 */
enum ToboStatus tobo_mask_count(size_t n, double ratio, size_t *out);

/*
 Draws a mask from substream `index` of `seed` and writes the sorted
 masked indices to `masked` (capacity `cap`), their count to `written`.

 # Safety
 `masked` must hold `cap` entries; `written` must be writable.
 */
enum ToboStatus tobo_sample_mask(size_t n,
                                 double ratio,
                                 uint64_t seed,
                                 uint64_t index,
                                 size_t *masked,
                                 size_t cap,
                                 size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TOBO_H */
