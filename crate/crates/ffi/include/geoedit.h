#ifndef GEOEDIT_H
#define GEOEDIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum GeoeditStatus {
  GEOEDIT_STATUS_OK = 0,
  GEOEDIT_STATUS_NULL_POINTER = 1,
  /**
   * Bad argument, shape mismatch or out-of-range parameter.
   */
  GEOEDIT_STATUS_INVALID_ARGUMENT = 2,
  GEOEDIT_STATUS_DEGENERATE = 3,
  /**
   * Geodesic solver divergence or step budget exhausted.
   */
  GEOEDIT_STATUS_SOLVER = 4,
  GEOEDIT_STATUS_CHECKPOINT = 5,
  GEOEDIT_STATUS_IO = 6,
  GEOEDIT_STATUS_INTERNAL = 7,
} GeoeditStatus;

/**
 * Opaque trained denoiser with its noise schedule.
 */
typedef struct GeoeditDenoiser GeoeditDenoiser;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the next
 * failing call on the same thread.
 */
const char *geoedit_last_error(void);

/**
 * Static NUL-terminated version string.
 */
const char *geoedit_version(void);

/**
 * Spherical interpolation of two length-`d` vectors into `out`.
 *
 * # Safety
 * `a`, `b` and `out` must point to `d` valid f64 values.
 */
enum GeoeditStatus geoedit_slerp(const double *a, const double *b, size_t d, double t, double *out);

/**
 * Norm-preserving blend of a fidelity and a semantic latent.
 *
 * # Safety
 * `x_fid`, `x_sem` and `out` must point to `d` valid f64 values.
 */
enum GeoeditStatus geoedit_fuse(const double *x_fid,
                                const double *x_sem,
                                size_t d,
                                double alpha_outer,
                                double *out);

/**
 * Number of tokens kept out of `n` at pruning ratio `rho`.
 *
 * # Safety
 * `k_out` must be a valid pointer.
 */
enum GeoeditStatus geoedit_keep_count(size_t n, double rho, size_t *k_out);

/**
 * Mean absolute error of two length-`len` arrays.
 *
 * # Safety
 * `a` and `b` must point to `len` values; `out` must be valid.
 */
enum GeoeditStatus geoedit_mae(const double *a, const double *b, size_t len, double *out);

/**
 * SSIM of two row-major images of `len` pixels and row width `width`.
 *
 * # Safety
 * `a` and `b` must point to `len` values; `out` must be valid.
 */
enum GeoeditStatus geoedit_ssim(const double *a,
                                const double *b,
                                size_t len,
                                size_t width,
                                double *out);

/**
 * Loads a denoiser checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GeoeditStatus geoedit_denoiser_load(const char *path, struct GeoeditDenoiser **out);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `h` must come from [`geoedit_denoiser_load`] and not be used afterwards.
 */
void geoedit_denoiser_free(struct GeoeditDenoiser *h);

/**
 * Pixels per image accepted by [`geoedit_denoiser_reconstruct`].
 */
size_t geoedit_image_pixels(void);

/**
 * DDIM inversion to `t0` with `s_for` steps, then regeneration with `s_gen` steps.
 * `image` and `out` hold [`geoedit_image_pixels`] values in [−1, 1].
 *
 * # Safety
 * `h` must be a live handle; `image` and `out` must hold `geoedit_image_pixels()` values.
 */
enum GeoeditStatus geoedit_denoiser_reconstruct(const struct GeoeditDenoiser *h,
                                                const double *image,
                                                double t0,
                                                size_t s_for,
                                                size_t s_gen,
                                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEOEDIT_H */
