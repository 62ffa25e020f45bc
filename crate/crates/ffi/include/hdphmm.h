#ifndef HDPHMM_H
#define HDPHMM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum HdphmmStatus {
  HDPHMM_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  HDPHMM_STATUS_NULL_POINTER = 1,
  /**
   * Invalid argument, configuration or data.
   */
  HDPHMM_STATUS_INVALID = 2,
  /**
   * Numerical failure during inference.
   */
  HDPHMM_STATUS_NUMERICAL = 3,
  /**
   * File missing or unreadable.
   */
  HDPHMM_STATUS_IO = 4,
  /**
   * Caller buffer too small; the needed length was written to the length argument.
   */
  HDPHMM_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * Internal panic caught at the boundary.
   */
  HDPHMM_STATUS_PANIC = 6,
} HdphmmStatus;

/**
 * A spike-count matrix, cells by bins.
 */
typedef struct HdphmmCounts HdphmmCounts;

/**
 * A synthetic dataset with its generating path.
 */
typedef struct HdphmmDataset HdphmmDataset;

/**
 * A fitted model: posterior samples or variational factors.
 */
typedef struct HdphmmFit HdphmmFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *hdphmm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hdphmm_version(void);

/**
 * Build a count matrix from `n_cells * n_bins` row-major values.
 *
 * # Safety
 * `data` must point to `n_cells * n_bins` readable values; `out` must be writable.
 */
enum HdphmmStatus hdphmm_counts_new(const uint64_t *data,
                                    size_t n_cells,
                                    size_t n_bins,
                                    struct HdphmmCounts **out);

/**
 * Load a count matrix from a CSV file (`cell_id,t0,t1,...`).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum HdphmmStatus hdphmm_counts_load_csv(const char *path, struct HdphmmCounts **out);

/**
 * Bins `[start, end)` as a new matrix.
 *
 * # Safety
 * `counts` must be a live handle; `out` must be writable.
 */
enum HdphmmStatus hdphmm_counts_slice(const struct HdphmmCounts *counts,
                                      size_t start,
                                      size_t end,
                                      struct HdphmmCounts **out);

/**
 * # Safety
 * `counts` must be a live handle; the output pointers must be writable.
 */
enum HdphmmStatus hdphmm_counts_shape(const struct HdphmmCounts *counts,
                                      size_t *n_cells,
                                      size_t *n_bins);

/**
 * Copy the counts out, row-major. On entry `*len` is the buffer capacity.
 *
 * # Safety
 * `buf` must hold `*len` values.
 */
enum HdphmmStatus hdphmm_counts_data(const struct HdphmmCounts *counts, uint64_t *buf, size_t *len);

/**
 * # Safety
 * `counts` must be null or a handle not yet freed.
 */
void hdphmm_counts_free(struct HdphmmCounts *counts);

/**
 * Simulate a dataset from a JSON generator configuration; `"{}"` gives the
 * defaults.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` must be writable.
 */
enum HdphmmStatus hdphmm_simulate(const char *config_json,
                                  uint64_t seed,
                                  struct HdphmmDataset **out);

/**
 * A copy of the dataset's counts as a new handle.
 *
 * # Safety
 * `dataset` must be a live handle; `out` must be writable.
 */
enum HdphmmStatus hdphmm_dataset_counts(const struct HdphmmDataset *dataset,
                                        struct HdphmmCounts **out);

/**
 * The generating state path, one label per bin.
 *
 * # Safety
 * `buf` must hold `*len` values.
 */
enum HdphmmStatus hdphmm_dataset_states(const struct HdphmmDataset *dataset,
                                        size_t *buf,
                                        size_t *len);

/**
 * # Safety
 * `dataset` must be null or a handle not yet freed.
 */
void hdphmm_dataset_free(struct HdphmmDataset *dataset);

/**
 * Fit `counts` with `method` (`mcmc-hmc`, `mcmc-eb`, `vb`, `hmm-mcmc` or
 * `hmm-vb`). `options_json` may be null or hold `gibbs`, `vb` and `n_keep`
 * settings.
 *
 * # Safety
 * `counts` must be a live handle; strings must be NUL-terminated or null
 * where allowed; `out` must be writable.
 */
enum HdphmmStatus hdphmm_fit(const struct HdphmmCounts *counts,
                             const char *method,
                             const char *options_json,
                             uint64_t seed,
                             struct HdphmmFit **out);

/**
 * Truncation level of the fitted model.
 *
 * # Safety
 * `fit` must be a live handle; `out` must be writable.
 */
enum HdphmmStatus hdphmm_fit_n_states(const struct HdphmmFit *fit, size_t *out);

/**
 * Predictive log-likelihood of `test`, without the `ln y!` constants.
 * Variational fits average over `vb_draws` parameter draws seeded by `seed`.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum HdphmmStatus hdphmm_fit_predictive_ll(const struct HdphmmFit *fit,
                                           const struct HdphmmCounts *test,
                                           size_t vb_draws,
                                           uint64_t seed,
                                           double *out);

/**
 * Posterior state probabilities of `counts`, bins by states, row-major.
 *
 * # Safety
 * Handles must be live; `buf` must hold `*len` values.
 */
enum HdphmmStatus hdphmm_fit_state_marginals(const struct HdphmmFit *fit,
                                             const struct HdphmmCounts *counts,
                                             double *buf,
                                             size_t *len);

/**
 * Predictive gain over a homogeneous Poisson fit to `train`, in bits per
 * test spike.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum HdphmmStatus hdphmm_bits_per_spike(const struct HdphmmCounts *train,
                                        const struct HdphmmCounts *test,
                                        double model_ll,
                                        double *out);

/**
 * # Safety
 * `fit` must be null or a handle not yet freed.
 */
void hdphmm_fit_free(struct HdphmmFit *fit);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HDPHMM_H */
