#ifndef RHOGAP_H
#define RHOGAP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes for every fallible entry point. Values 2–4 match the CLI's
 * exit codes for the same failure classes.
 */
typedef enum RgStatus {
  RG_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  RG_STATUS_NULL_ARGUMENT = 1,
  /**
   * Config rejected: parse failure, unknown key, or invalid value.
   */
  RG_STATUS_INVALID_CONFIG = 2,
  /**
   * Gram factorization failed even after jitter escalation.
   */
  RG_STATUS_NUMERICAL = 3,
  /**
   * An operation needed more samples than the dataset provides.
   */
  RG_STATUS_INSUFFICIENT_DATA = 4,
  /**
   * Any other argument or domain error.
   */
  RG_STATUS_INVALID_ARGUMENT = 5,
  /**
   * The callee panicked; the handle is untouched.
   */
  RG_STATUS_PANIC = 6,
} RgStatus;

/**
 * Fitted multi-output model handle (opaque).
 */
typedef struct RgModel RgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Parses a JSON experiment config, generates its training data, and fits
 * the full multi-output model. On success `*out` receives an owned handle.
 *
 * # Safety
 * `config_json` must point to a NUL-terminated UTF-8 string and `out` must
 * be a valid writable pointer. A handle returned here must be released with
 * [`rg_model_free`] exactly once.
 */
enum RgStatus rg_model_fit(const char *config_json, struct RgModel **out);

/**
 * Writes the model's state dimension and latent component count.
 *
 * # Safety
 * All pointers must be valid; `model` must come from [`rg_model_fit`].
 */
enum RgStatus rg_model_dims(const struct RgModel *model,
                            uintptr_t *state_dim,
                            uintptr_t *component_dim);

/**
 * Posterior mean of the dynamics g(x, u), written to `out_mean`
 * (`state_dim` entries).
 *
 * # Safety
 * `x`, `u`, and `out_mean` must point to arrays of the stated lengths;
 * `out_mean` must hold `state_dim` doubles.
 */
enum RgStatus rg_model_predict(const struct RgModel *model,
                               const double *x,
                               uintptr_t x_len,
                               const double *u,
                               uintptr_t u_len,
                               double *out_mean);

/**
 * Posterior standard deviation of each latent component at (x, u), written
 * to `out_sd` (`component_dim` entries).
 *
 * # Safety
 * Same contract as [`rg_model_predict`], with `out_sd` holding
 * `component_dim` doubles.
 */
enum RgStatus rg_model_component_sd(const struct RgModel *model,
                                    const double *x,
                                    uintptr_t x_len,
                                    const double *u,
                                    uintptr_t u_len,
                                    double *out_sd);

/**
 * Releases a model handle. NULL is a no-op.
 *
 * # Safety
 * `model` must be a handle from [`rg_model_fit`] not yet freed.
 */
void rg_model_free(struct RgModel *model);

/**
 * Copies the calling thread's most recent error message into `buf`
 * (truncated, always NUL-terminated) and returns the full message length in
 * bytes, or 0 when no error is pending. Passing a NULL or empty buffer just
 * queries the length.
 *
 * # Safety
 * `buf`, when non-NULL, must hold at least `len` bytes.
 */
uintptr_t rg_last_error_message(char *buf, uintptr_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rg_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RHOGAP_H */
