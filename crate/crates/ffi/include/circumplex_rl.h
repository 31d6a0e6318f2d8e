#ifndef CIRCUMPLEX_RL_H
#define CIRCUMPLEX_RL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CrlStatus {
  CRL_STATUS_OK = 0,
  CRL_STATUS_NULL_POINTER = 1,
  CRL_STATUS_INVALID_ARGUMENT = 2,
  CRL_STATUS_OUT_OF_RANGE = 3,
  CRL_STATUS_NON_FINITE = 4,
  CRL_STATUS_MISSING_FILE = 5,
  CRL_STATUS_IO = 6,
  CRL_STATUS_CHECKPOINT = 7,
  CRL_STATUS_BUFFER_TOO_SMALL = 8,
  CRL_STATUS_INTERNAL = 9,
  CRL_STATUS_PANIC = 10,
} CrlStatus;

/**
 * A loaded policy model.
 */
typedef struct CrlModel CrlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into this library from the same thread.
 */
const char *crl_last_error_message(void);

/**
 * Signed distance of an affect point from neutral: the sign of the valence
 * times the point's norm. Both coordinates must lie in [-1, 1].
 *
 * # Safety
 * `out` must be a valid pointer to a double.
 */
enum CrlStatus crl_circumplex_reward(double arousal, double valence, double *out);

/**
 * Reward minus `beta` times the log-probability ratio of policy to reference.
 *
 * # Safety
 * `out` must be a valid pointer to a double.
 */
enum CrlStatus crl_shaped_reward(double reward,
                                 double logp_policy,
                                 double logp_ref,
                                 double beta,
                                 double *out);

/**
 * Next KL coefficient: halved below the target band, doubled above it.
 *
 * # Safety
 * `out` must be a valid pointer to a double.
 */
enum CrlStatus crl_adapt_beta(double beta, double measured_kl, double kl_target, double *out);

/**
 * Load a model checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CrlStatus crl_model_load(const char *path, struct CrlModel **out);

/**
 * Release a handle from [`crl_model_load`]. NULL is ignored.
 *
 * # Safety
 * `handle` must be NULL or a handle not yet freed.
 */
void crl_model_free(struct CrlModel *handle);

/**
 * # Safety
 * `handle` must be a live handle and `out` a valid pointer.
 */
enum CrlStatus crl_model_vocab_size(const struct CrlModel *handle, size_t *out);

/**
 * # Safety
 * `handle` must be a live handle and `out` a valid pointer.
 */
enum CrlStatus crl_model_max_seq_len(const struct CrlModel *handle, size_t *out);

/**
 * Log-probability of `response` following `prompt`.
 *
 * # Safety
 * `handle` must be a live handle, the token arrays must hold the given
 * number of elements and `out` must be a valid pointer.
 */
enum CrlStatus crl_model_sequence_log_prob(const struct CrlModel *handle,
                                           const size_t *prompt,
                                           size_t prompt_len,
                                           const size_t *response,
                                           size_t response_len,
                                           double *out);

/**
 * Sample up to `max_new` tokens after `prompt`. A temperature of 0 decodes
 * greedily. Writes the response into `out_tokens` and its length into
 * `out_len`; if `capacity` is too small, only `out_len` is written and
 * `CRL_STATUS_BUFFER_TOO_SMALL` is returned.
 *
 * # Safety
 * `handle` must be a live handle, `prompt` must hold `prompt_len`
 * elements, `out_tokens` must hold `capacity` elements and `out_len` must
 * be a valid pointer.
 */
enum CrlStatus crl_model_generate(const struct CrlModel *handle,
                                  const size_t *prompt,
                                  size_t prompt_len,
                                  size_t max_new,
                                  double temperature,
                                  uint64_t seed,
                                  size_t *out_tokens,
                                  size_t capacity,
                                  size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CIRCUMPLEX_RL_H */
