#ifndef CAPSROUTE_H
#define CAPSROUTE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CapsrouteStatus {
  CAPSROUTE_STATUS_OK = 0,
  /**
   * Invalid configuration or argument.
   */
  CAPSROUTE_STATUS_USAGE = 1,
  /**
   * Missing or malformed data, checkpoint or file.
   */
  CAPSROUTE_STATUS_DATA = 2,
  /**
   * Divergence, non-finite values or a failed gradient check.
   */
  CAPSROUTE_STATUS_NUMERIC = 3,
  CAPSROUTE_STATUS_NULL_POINTER = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  CAPSROUTE_STATUS_PANIC = 5,
} CapsrouteStatus;

/**
 * Opaque model handle.
 */
typedef struct CapsrouteModel CapsrouteModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *capsroute_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *capsroute_version(void);

/**
 * Freshly initialised model from `key = value` config text (may be empty).
 *
 * # Safety
 * `config_text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CapsrouteStatus capsroute_model_new(const char *config_text, struct CapsrouteModel **out);

/**
 * Loads a checkpoint written by `capsroute train` or [`capsroute_model_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CapsrouteStatus capsroute_model_load(const char *path, struct CapsrouteModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void capsroute_model_free(struct CapsrouteModel *model);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum CapsrouteStatus capsroute_model_save(const struct CapsrouteModel *model, const char *path);

/**
 * Number of output classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t capsroute_model_num_classes(const struct CapsrouteModel *model);

/**
 * Writes channels, height, width into `out[0..3]`.
 *
 * # Safety
 * `model` must be a live handle and `out` must point to 3 writable values.
 */
enum CapsrouteStatus capsroute_model_input_shape(const struct CapsrouteModel *model, size_t *out);

/**
 * Output capsule lengths for `count` images laid out N×C×H×W; writes
 * `count × classes` values into `lengths`, whose capacity is `lengths_len`.
 *
 * # Safety
 * `images` must hold `count·C·H·W` floats and `lengths` `lengths_len` floats.
 */
enum CapsrouteStatus capsroute_model_lengths(const struct CapsrouteModel *model,
                                             const float *images,
                                             size_t count,
                                             float *lengths,
                                             size_t lengths_len);

/**
 * Routing configuration of the model: writes λ and γ.
 *
 * # Safety
 * `model` must be a live handle; `lambda` and `gamma` may be null.
 */
enum CapsrouteStatus capsroute_model_routing(const struct CapsrouteModel *model,
                                             double *lambda,
                                             double *gamma);

/**
 * Trains with `config_text`, writing metrics.csv, config.cfg and model.ckpt
 * into `out_dir`. `final_error_pct` (nullable) receives the last test error.
 *
 * # Safety
 * String arguments must be NUL-terminated; `final_error_pct` null or writable.
 */
enum CapsrouteStatus capsroute_train(const char *config_text,
                                     const char *data_dir,
                                     const char *out_dir,
                                     double *final_error_pct);

/**
 * Runs the gradient-check suite on seeds `first_seed..first_seed + seeds`.
 * Returns `Numeric` if any component exceeds its threshold; `worst`
 * (nullable) receives the largest relative error seen.
 *
 * # Safety
 * `worst` must be null or writable.
 */
enum CapsrouteStatus capsroute_gradcheck(uint64_t first_seed,
                                         uint64_t seeds,
                                         bool use_f64,
                                         double *worst);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAPSROUTE_H */
