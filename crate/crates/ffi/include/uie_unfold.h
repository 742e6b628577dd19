/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef UIE_UNFOLD_H
#define UIE_UNFOLD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define UIE_OK 0

#define UIE_ERR_NULL_POINTER 1

#define UIE_ERR_INVALID_ARGUMENT 2

#define UIE_ERR_CONFIG 3

#define UIE_ERR_IO 4

#define UIE_ERR_CHECKPOINT 5

#define UIE_ERR_SCHEMA_VERSION 6

#define UIE_ERR_SHAPE 7

#define UIE_ERR_NUMERIC 8

#define UIE_ERR_INTERNAL 9

#define UIE_ERR_PANIC 10

// Opaque model handle.
typedef struct UieModel UieModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer is
// valid until the next call into this library from the same thread.
const char *uie_last_error(void);

// Loads a checkpoint and stores a new handle in `*out`.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
int32_t uie_model_load(const char *path, struct UieModel **out);

// Releases a handle from `uie_model_load`. Null is ignored.
//
// # Safety
// `model` must come from `uie_model_load` and not be used afterwards.
void uie_model_free(struct UieModel *model);

// Number of unfolding stages of the loaded model.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
int32_t uie_model_stages(const struct UieModel *model, size_t *out);

// Enhances one planar RGB image of any size into `output` (same size),
// clamped to `[0, 1]`.
//
// # Safety
// `input` and `output` must each hold `3 * height * width` floats.
int32_t uie_model_enhance(const struct UieModel *model,
                          const float *input,
                          size_t height,
                          size_t width,
                          float *output);

// PSNR in dB over all channels; identical images give `+inf`.
//
// # Safety
// `a` and `b` must each hold `3 * height * width` floats; `out` must be valid.
int32_t uie_psnr(const float *a, const float *b, size_t height, size_t width, double *out);

// Mean SSIM with an 11x11 Gaussian window; both sides must be at least 11.
//
// # Safety
// As for `uie_psnr`.
int32_t uie_ssim(const float *a, const float *b, size_t height, size_t width, double *out);

// Mean CIEDE2000 color difference of sRGB images.
//
// # Safety
// As for `uie_psnr`.
int32_t uie_delta_e(const float *a, const float *b, size_t height, size_t width, double *out);

// `out = t * clean + (1 - t) * background + noise`, per channel, clamped.
//
// # Safety
// `clean` and `output` must each hold `3 * height * width` floats;
// `transmission` and `background` must each hold 3 doubles.
int32_t uie_synth_degrade(const float *clean,
                          size_t height,
                          size_t width,
                          const double *transmission,
                          const double *background,
                          double noise_std,
                          uint64_t seed,
                          float *output);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UIE_UNFOLD_H */
