#ifndef HVAE_H
#define HVAE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a call. The error codes match the exit codes of the `hvae`
 * command-line tool.
 */
typedef enum HvaeStatus {
  HVAE_STATUS_OK = 0,
  HVAE_STATUS_CONFIG_ERROR = 2,
  HVAE_STATUS_DATA_ERROR = 3,
  HVAE_STATUS_NUMERIC_ERROR = 4,
  HVAE_STATUS_IO_ERROR = 5,
  /**
   * A required pointer was null.
   */
  HVAE_STATUS_NULL_ARGUMENT = 6,
  /**
   * The library panicked; this is a bug.
   */
  HVAE_STATUS_INTERNAL = 7,
} HvaeStatus;

/**
 * A trained VAE or HVAE. Create with [`hvae_model_load`], release with
 * [`hvae_model_free`].
 */
typedef struct HvaeModel HvaeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The string is
 * owned by the library and valid until the next call on this thread.
 */
const char *hvae_last_error(void);

/**
 * Loads a VAE/HVAE checkpoint. On success `*out` holds a new handle.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum HvaeStatus hvae_model_load(const char *path, struct HvaeModel **out);

/**
 * Releases a handle from [`hvae_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void hvae_model_free(struct HvaeModel *model);

/**
 * Image extent and latent dimension of a loaded model.
 *
 * # Safety
 * `model` must be a live handle; the out pointers must be valid.
 */
enum HvaeStatus hvae_model_shape(const struct HvaeModel *model,
                                 uintptr_t *height,
                                 uintptr_t *width,
                                 uintptr_t *latent_dim);

/**
 * Draws `n` image+mask pairs from `z ~ N(0, I)`. `images` and `masks`
 * each receive `n * height * width` values; masks are `σ(logit) >
 * threshold` as 0/1. The same seed gives the same pairs.
 *
 * # Safety
 * `model` must be a live handle; both buffers must hold
 * `n * height * width` doubles.
 */
enum HvaeStatus hvae_model_sample(const struct HvaeModel *model,
                                  uintptr_t n,
                                  double threshold,
                                  uint64_t seed,
                                  double *images,
                                  double *masks);

/**
 * Phantom `index` of the stream `seed` at the default settings for the
 * extent. Writes `height * width` values to each buffer.
 *
 * # Safety
 * Both buffers must hold `height * width` doubles.
 */
enum HvaeStatus hvae_phantom_generate(uintptr_t height,
                                      uintptr_t width,
                                      uint64_t seed,
                                      uint64_t index,
                                      double *image,
                                      double *mask);

/**
 * Dice overlap of two binary masks of `len` values; two empty masks give 1.
 *
 * # Safety
 * `a` and `b` must hold `len` doubles; `out` must be valid.
 */
enum HvaeStatus hvae_dice(const double *a, const double *b, uintptr_t len, double *out);

/**
 * PSNR in dB of two images of `len` values; identical images give +inf.
 *
 * # Safety
 * `a` and `b` must hold `len` doubles; `out` must be valid.
 */
enum HvaeStatus hvae_psnr(const double *a,
                          const double *b,
                          uintptr_t len,
                          double max_val,
                          double *out);

/**
 * Mean SSIM over non-overlapping 8x8 windows of two `height * width` images.
 *
 * # Safety
 * `a` and `b` must hold `height * width` doubles; `out` must be valid.
 */
enum HvaeStatus hvae_ssim(const double *a,
                          const double *b,
                          uintptr_t height,
                          uintptr_t width,
                          double max_val,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HVAE_H */
