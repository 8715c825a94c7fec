#ifndef FLOWALIGN_H
#define FLOWALIGN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every API call.
 */
typedef enum FaStatus {
  FaStatus_Ok = 0,
  FaStatus_NullPointer = 1,
  FaStatus_InvalidArgument = 2,
  FaStatus_ShapeMismatch = 3,
  FaStatus_DataError = 4,
  FaStatus_IoError = 5,
  FaStatus_Internal = 6,
} FaStatus;

/**
 * Opaque dense flow field handle.
 */
typedef struct FaFlow {
  uint8_t _private[0];
} FaFlow;

/**
 * Opaque alignment-model handle (parameters + reconstruction head).
 */
typedef struct FaModel {
  uint8_t _private[0];
} FaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message into `buf` (NUL-terminated, truncated to
 * `cap` bytes). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes (or be null to query length).
 */
uintptr_t fa_last_error(char *buf, uintptr_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fa_version(void);

/**
 * PSNR (dB) between two interleaved RGB images of equal size.
 *
 * # Safety
 * `a` and `b` must point to `width*height*3` readable bytes; `out` must
 * be a valid pointer.
 */
enum FaStatus fa_psnr(const uint8_t *a,
                      const uint8_t *b,
                      uintptr_t width,
                      uintptr_t height,
                      double *out);

/**
 * MS-SSIM between two interleaved RGB images of equal size.
 *
 * # Safety
 * Same contracts as [`fa_psnr`].
 */
enum FaStatus fa_ms_ssim(const uint8_t *a,
                         const uint8_t *b,
                         uintptr_t width,
                         uintptr_t height,
                         double *out);

/**
 * Bjøntegaard delta rate (percent) between two RD curves given as
 * parallel bpp/quality arrays (each at least 4 points).
 *
 * # Safety
 * The four array pointers must hold `anchor_len` / `test_len` doubles.
 */
enum FaStatus fa_bd_rate(const double *anchor_bpp,
                         const double *anchor_quality,
                         uintptr_t anchor_len,
                         const double *test_bpp,
                         const double *test_quality,
                         uintptr_t test_len,
                         double *out);

/**
 * Quality-aware weight schedule from a PSNR trace of `trace_len >= 2`
 * entries; writes `trace_len - 1` weights. `base_weights` may be null for
 * the default 7-entry pattern.
 *
 * # Safety
 * `psnr_trace` must hold `trace_len` doubles; `out_weights` must have
 * room for `trace_len - 1`; `base_weights`, when non-null, holds 7.
 */
enum FaStatus fa_mrqa_weights(const double *psnr_trace,
                              uintptr_t trace_len,
                              double lambda,
                              double lambda_max,
                              const double *base_weights,
                              double *out_weights);

/**
 * Estimate optical flow between two RGB images with the pyramidal
 * estimator (`levels` pyramid levels, `iters` refinements per level).
 *
 * # Safety
 * Image pointers as in [`fa_psnr`]; `out_flow` receives an owned handle
 * that must be released with [`fa_flow_free`].
 */
enum FaStatus fa_flow_estimate(const uint8_t *cur,
                               const uint8_t *reference,
                               uintptr_t width,
                               uintptr_t height,
                               uintptr_t levels,
                               uintptr_t iters,
                               struct FaFlow **out_flow);

/**
 * Flow dimensions.
 *
 * # Safety
 * `flow` must be a live handle; `out_*` must be valid pointers.
 */
enum FaStatus fa_flow_size(const struct FaFlow *flow, uintptr_t *out_width, uintptr_t *out_height);

/**
 * RMS flow magnitude (pixels) with the epsilon floor.
 *
 * # Safety
 * `flow` must be a live handle; `out` must be valid.
 */
enum FaStatus fa_flow_magnitude(const struct FaFlow *flow, double *out);

/**
 * Copy flow components into caller buffers of `width*height` floats each.
 *
 * # Safety
 * `flow` must be a live handle; the buffers must be large enough.
 */
enum FaStatus fa_flow_data(const struct FaFlow *flow, float *out_vx, float *out_vy);

/**
 * Release a flow handle (null is a no-op).
 *
 * # Safety
 * `flow` must have come from this library and not be freed twice.
 */
void fa_flow_free(struct FaFlow *flow);

/**
 * Warp an RGB reference image by a flow field into `out_rgb`
 * (`width*height*3` bytes, same layout as the input).
 *
 * # Safety
 * Pointers as in [`fa_psnr`]; `flow` must match the image size.
 */
enum FaStatus fa_warp_rgb(const uint8_t *reference,
                          uintptr_t width,
                          uintptr_t height,
                          const struct FaFlow *flow,
                          uint8_t *out_rgb);

/**
 * Adaptive-scale flow search (training-free). Writes the per-scale warp
 * PSNR into `out_psnr` (NaN for skipped scales), the winning scale into
 * `out_best_scale`, and the re-estimated flow into `out_flow`.
 *
 * # Safety
 * `scales`/`out_psnr` must hold `scales_len` doubles; other pointers as
 * in [`fa_flow_estimate`].
 */
enum FaStatus fa_sme_select(const uint8_t *cur,
                            const uint8_t *reference,
                            uintptr_t width,
                            uintptr_t height,
                            const double *scales,
                            uintptr_t scales_len,
                            double delta,
                            int parallel,
                            double *out_best_scale,
                            double *out_psnr,
                            struct FaFlow **out_flow);

/**
 * Magnitude-gated flow: estimates at scale 1 and runs the scale search
 * only when the magnitude exceeds `tau`. `out_searched` reports whether
 * the search ran.
 *
 * # Safety
 * Pointers as in [`fa_sme_select`].
 */
enum FaStatus fa_gated_flow(const uint8_t *cur,
                            const uint8_t *reference,
                            uintptr_t width,
                            uintptr_t height,
                            const double *scales,
                            uintptr_t scales_len,
                            double delta,
                            double tau,
                            int *out_searched,
                            struct FaFlow **out_flow);

/**
 * Load an alignment model from a checkpoint with the given channel/group
 * configuration (pass 0 for defaults: channels 32/64/96, 1 group, k=3).
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out_model` receives an
 * owned handle released with [`fa_model_free`].
 */
enum FaStatus fa_model_load(const char *path,
                            uintptr_t c1,
                            uintptr_t c2,
                            uintptr_t c3,
                            uintptr_t groups,
                            struct FaModel **out_model);

/**
 * Release a model handle (null is a no-op).
 *
 * # Safety
 * `model` must have come from [`fa_model_load`] and not be freed twice.
 */
void fa_model_free(struct FaModel *model);

/**
 * Run two-stage motion compensation of `reference` toward `cur` using the
 * given flow, and report the aligned-context and coarse-warp MSE against
 * the current frame's feature pyramid (mean over the three levels).
 * Frame dimensions must be multiples of 4.
 *
 * # Safety
 * Pointers as in [`fa_psnr`]; `model` and `flow` must be live handles.
 */
enum FaStatus fa_model_align_score(const struct FaModel *model,
                                   const uint8_t *cur,
                                   const uint8_t *reference,
                                   uintptr_t width,
                                   uintptr_t height,
                                   const struct FaFlow *flow,
                                   double *out_aligned_mse,
                                   double *out_coarse_mse);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWALIGN_H */
