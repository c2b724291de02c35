#ifndef GEOWARP_H
#define GEOWARP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum GwStatus {
  GW_STATUS_OK = 0,
  /**
   * Invalid configuration or argument value.
   */
  GW_STATUS_CONFIG = 1,
  /**
   * Missing, malformed or inconsistent data.
   */
  GW_STATUS_DATA = 2,
  /**
   * A computation produced a non-finite value.
   */
  GW_STATUS_NUMERIC = 3,
  /**
   * A required pointer was null.
   */
  GW_STATUS_NULL_ARGUMENT = 4,
  /**
   * A string argument was not valid UTF-8.
   */
  GW_STATUS_INVALID_UTF8 = 5,
  /**
   * The library panicked; the handle involved should be freed.
   */
  GW_STATUS_INTERNAL = 6,
} GwStatus;

/**
 * Opaque segmenter model.
 */
typedef struct GwModel GwModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call into the library on this thread.
 */
const char *gw_last_error_message(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *gw_version(void);

/**
 * Creates a model with the default configuration.
 *
 * # Safety
 * `out` must be valid for one pointer write.
 */
enum GwStatus gw_model_new_default(struct GwModel **out);

/**
 * Creates a model from a segmenter configuration TOML file.
 *
 * # Safety
 * `config_path` must be a nul-terminated string; `out` valid for one pointer write.
 */
enum GwStatus gw_model_from_config(const char *config_path, struct GwModel **out);

/**
 * Replaces the model's adapters with those in a checkpoint file.
 *
 * # Safety
 * `model` must come from this library; `path` must be a nul-terminated string.
 */
enum GwStatus gw_model_load_adapters(struct GwModel *model, const char *path);

/**
 * Number of trainable (adapter) parameters.
 *
 * # Safety
 * `model` must come from this library; `out` valid for one write.
 */
enum GwStatus gw_model_trainable_count(const struct GwModel *model, size_t *out);

/**
 * Per-pixel logits for `text` on an RGB image. `rgb` holds `height*width*3`
 * values, `out_logits` receives `height*width`.
 *
 * # Safety
 * Buffers must be valid for the sizes above; `text` nul-terminated.
 */
enum GwStatus gw_predict_logits(const struct GwModel *model,
                                const double *rgb,
                                size_t height,
                                size_t width,
                                const char *text,
                                double *out_logits);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void gw_model_free(struct GwModel *model);

/**
 * Warps logits of view `a` (`a_height × a_width`) into view `b` using `b`'s
 * depth (`b_height × b_width`, meters, 0 = invalid). Writes warped logits
 * (0 where invalid) and a validity byte per `b` pixel.
 *
 * # Safety
 * Buffers must be valid for the sizes above; `k_*` hold 9 and `e_*` 16 values.
 */
enum GwStatus gw_warp_logits(const double *logits_a,
                             size_t a_height,
                             size_t a_width,
                             const double *depth_b,
                             size_t b_height,
                             size_t b_width,
                             const double *k_a,
                             const double *k_b,
                             const double *e_a,
                             const double *e_b,
                             double *out_logits,
                             uint8_t *out_valid);

/**
 * IoU of two binary masks; 1 when both are empty.
 *
 * # Safety
 * `pred` and `gt` must hold `height*width` bytes; `out` valid for one write.
 */
enum GwStatus gw_miou(const uint8_t *pred,
                      const uint8_t *gt,
                      size_t height,
                      size_t width,
                      double *out);

/**
 * Symmetric Chamfer distance between two clouds of `n_x` and `n_y` xyz
 * triples, divided by `norm_scale` and scaled by 100.
 *
 * # Safety
 * `x` holds `3*n_x` and `y` `3*n_y` values; `out` valid for one write.
 */
enum GwStatus gw_chamfer(const double *x,
                         size_t n_x,
                         const double *y,
                         size_t n_y,
                         double norm_scale,
                         double *out);

/**
 * Point-cloud F-score at distance threshold `d`.
 *
 * # Safety
 * `x` holds `3*n_x` and `y` `3*n_y` values; `out` valid for one write.
 */
enum GwStatus gw_fscore(const double *x,
                        size_t n_x,
                        const double *y,
                        size_t n_y,
                        double d,
                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEOWARP_H */
