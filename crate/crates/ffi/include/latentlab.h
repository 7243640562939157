#ifndef LATENTLAB_H
#define LATENTLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  LL_STATUS_OK = 0,
  LL_STATUS_NULL_POINTER = 1,
  LL_STATUS_INVALID_UTF8 = 2,
  LL_STATUS_INVALID_ARGUMENT = 3,
  LL_STATUS_DATA = 4,
  LL_STATUS_CONFIG = 5,
  LL_STATUS_NUMERIC = 6,
  LL_STATUS_CHECKPOINT = 7,
  LL_STATUS_IO = 8,
  LL_STATUS_PANIC = 9,
} LlStatus;

/**
 * Opaque flow handle.
 */
typedef struct LlFlow LlFlow;

/**
 * Opaque VAE handle.
 */
typedef struct LlVae LlVae;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ll_version(void);

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * call into the library from the same thread.
 */
const char *ll_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void ll_string_free(char *s);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
LlStatus ll_vae_load(const char *path, LlVae **out);

/**
 * # Safety
 * `vae` must be null or a handle from [`ll_vae_load`] not yet freed.
 */
void ll_vae_free(LlVae *vae);

/**
 * Latent dimension, or 0 for a null handle.
 *
 * # Safety
 * `vae` must be null or a live handle.
 */
size_t ll_vae_latent_dim(const LlVae *vae);

/**
 * Posterior mean and log-variance of `text`; both buffers hold `len`
 * values, which must equal the latent dimension. `log_var` may be null.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
LlStatus ll_vae_encode(const LlVae *vae, const char *text, double *mu, double *log_var, size_t len);

/**
 * Greedy decoding of latent `z` (`len` values).
 *
 * # Safety
 * `z` must hold `len` values; `out` must be a valid pointer.
 */
LlStatus ll_vae_decode(const LlVae *vae, const double *z, size_t len, char **out);

/**
 * Encode then decode `text`.
 *
 * # Safety
 * `text` must be NUL-terminated; `out` must be a valid pointer.
 */
LlStatus ll_vae_reconstruct(const LlVae *vae, const char *text, char **out);

/**
 * # Safety
 * `path` must be NUL-terminated and `out` a valid pointer.
 */
LlStatus ll_flow_load(const char *path, LlFlow **out);

/**
 * # Safety
 * `flow` must be null or a handle from [`ll_flow_load`] not yet freed.
 */
void ll_flow_free(LlFlow *flow);

/**
 * Dimension of the flow, or 0 for a null handle.
 *
 * # Safety
 * `flow` must be null or a live handle.
 */
size_t ll_flow_dim(const LlFlow *flow);

/**
 * `z = f(x)` and `log|det ∂f/∂x|`; `logdet` may be null.
 *
 * # Safety
 * `x` and `z` must hold `len` values.
 */
LlStatus ll_flow_forward(const LlFlow *flow,
                         const double *x,
                         double *z,
                         size_t len,
                         double *logdet);

/**
 * `x = f⁻¹(z)`.
 *
 * # Safety
 * `z` and `x` must hold `len` values.
 */
LlStatus ll_flow_inverse(const LlFlow *flow, const double *z, double *x, size_t len);

/**
 * Exact earth mover's distance between two weighted point sets with
 * Euclidean ground cost. Points are row-major `[n, dim]`.
 *
 * # Safety
 * Buffers must hold the stated number of values.
 */
LlStatus ll_emd(const double *points_a,
                const double *weights_a,
                size_t n,
                const double *points_b,
                const double *weights_b,
                size_t m,
                size_t dim,
                double *out);

/**
 * Sentence BLEU (orders up to 4) over whitespace tokens.
 *
 * # Safety
 * Both strings must be NUL-terminated; `out` must be valid.
 */
LlStatus ll_bleu(const char *candidate, const char *reference, double *out);

/**
 * Every disentanglement metric on a TSV dataset (`z*` and `f*` columns)
 * with default settings and the given seed; the report is JSON.
 *
 * # Safety
 * `tsv` must be NUL-terminated; `out` must be valid.
 */
LlStatus ll_metrics_tsv(const char *tsv, uint64_t seed, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LATENTLAB_H */
