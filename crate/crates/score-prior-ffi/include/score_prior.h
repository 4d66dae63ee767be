/* C interface to the score-prior library: load a trained score model and query log-probabilities, gradients, score evaluations, and prior samples through opaque handles. Every fallible call returns an SP_* status code; sp_last_error_message retrieves the thread-local detail string. */

#ifndef SCORE_PRIOR_H
#define SCORE_PRIOR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Call succeeded.
 */
#define SP_OK 0

/**
 * A required pointer argument was null.
 */
#define SP_ERR_NULL 1

/**
 * An argument failed validation (bad UTF-8, wrong buffer length, ...).
 */
#define SP_ERR_ARG 2

/**
 * The computation itself failed; sp_last_error_message has the detail.
 */
#define SP_ERR_RUNTIME 3

/**
 * A panic was caught at the language boundary.
 */
#define SP_ERR_PANIC 4

/**
 * Opaque handle to a loaded score model.
 */
typedef struct SpScore {
  uint8_t _private[0];
} SpScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sp_version(void);

/**
 * Copies the last error message for this thread into `buf` (truncated to
 * `cap - 1` bytes, always NUL-terminated when `cap > 0`).
 *
 * Returns the full message length in bytes, so callers can re-query with a
 * larger buffer; a null `buf` returns the length without copying.
 */
uintptr_t sp_last_error_message(char *buf, uintptr_t cap);

/**
 * Loads a score-model checkpoint. Returns null on failure (see
 * sp_last_error_message); a non-null handle must be released with
 * sp_score_free.
 */
struct SpScore *sp_score_load(const char *path);

/**
 * Releases a handle from sp_score_load. Null is a no-op.
 */
void sp_score_free(struct SpScore *handle);

/**
 * Model dimension, or 0 for a null handle.
 */
uintptr_t sp_score_dim(const struct SpScore *handle);

/**
 * Evaluates the score (gradient of the diffused log-density) at `x` and
 * diffusion time `t`, writing `dim` values to `out`.
 */
int32_t sp_score_eval(const struct SpScore *handle,
                      const double *x,
                      uintptr_t len,
                      double t,
                      double *out);

/**
 * Log-probability of `x` under the model via the probability-flow ODE
 * (dopri5 with the given tolerances). `probes == 0` uses the exact
 * divergence; otherwise a Hutchinson estimate with that many Rademacher
 * probes keyed by `seed`. On success writes `*logp_out` and, when non-null,
 * `*nfe_out` (number of score evaluations spent).
 */
int32_t sp_logprob(const struct SpScore *handle,
                   const double *x,
                   uintptr_t len,
                   double rtol,
                   double atol,
                   uint32_t probes,
                   uint64_t seed,
                   double *logp_out,
                   uint64_t *nfe_out);

/**
 * Gradient of the log-probability with respect to `x`, computed by the
 * adjoint method. Writes `dim` values to `grad_out` and, when non-null,
 * the log-probability to `logp_out`.
 */
int32_t sp_grad_logprob(const struct SpScore *handle,
                        const double *x,
                        uintptr_t len,
                        double rtol,
                        double atol,
                        uint32_t probes,
                        uint64_t seed,
                        double *grad_out,
                        double *logp_out);

/**
 * Draws `n` samples from the model prior by the reverse SDE on an
 * `n_steps` grid, writing an `n x dim` row-major block to `out`.
 */
int32_t sp_sample(const struct SpScore *handle,
                  uintptr_t n,
                  uintptr_t n_steps,
                  uint64_t seed,
                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCORE_PRIOR_H */
