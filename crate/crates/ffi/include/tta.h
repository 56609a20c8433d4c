/* C interface to the test-time adaptation library. */

#ifndef TTA_H
#define TTA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call in this interface.
 */
typedef enum TtaStatus {
  TtaStatus_Ok = 0,
  /**
   * A required pointer argument was null.
   */
  TtaStatus_NullPointer = 1,
  /**
   * Arguments were malformed: bad JSON, bad shape, bad number.
   */
  TtaStatus_InvalidArgument = 2,
  /**
   * Dimensions of the operands disagree.
   */
  TtaStatus_DimMismatch = 3,
  /**
   * A covariance is not positive definite.
   */
  TtaStatus_NotPositiveDefinite = 4,
  /**
   * Filesystem trouble while running the pipeline.
   */
  TtaStatus_Io = 5,
  /**
   * Unexpected internal failure (including caught panics).
   */
  TtaStatus_Internal = 6,
} TtaStatus;

/**
 * Opaque handle to a mean-and-covariance summary of a feature
 * distribution.
 */
typedef struct TtaStats TtaStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string; do not free.
 */
const char *tta_version(void);

/**
 * Message describing the most recent failure on this thread. Valid
 * until the next call on the same thread; do not free.
 */
const char *tta_last_error(void);

/**
 * Release a string previously returned through an out-pointer.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void tta_string_free(char *s);

/**
 * Release a statistics handle.
 *
 * # Safety
 * `stats` must come from this library and not have been freed already.
 */
void tta_stats_free(struct TtaStats *stats);

/**
 * Build statistics from an explicit mean (length `dim`) and row-major
 * covariance (`dim * dim`).
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `out` must be valid.
 */
enum TtaStatus tta_stats_new(const double *mean,
                             const double *cov,
                             uintptr_t dim,
                             struct TtaStats **out);

/**
 * Parse statistics from their JSON representation.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be valid.
 */
enum TtaStatus tta_stats_from_json(const char *json, struct TtaStats **out);

/**
 * Serialize statistics to JSON; the result goes through
 * [`tta_string_free`].
 *
 * # Safety
 * `stats` must be a live handle; `out_json` must be valid.
 */
enum TtaStatus tta_stats_to_json(const struct TtaStats *stats, char **out_json);

/**
 * Dimension of the summarized features; 0 for a null handle.
 *
 * # Safety
 * `stats` must be a live handle or null.
 */
uintptr_t tta_stats_dim(const struct TtaStats *stats);

/**
 * Copy the mean into `out_mean` (length `dim`, from [`tta_stats_dim`]).
 *
 * # Safety
 * `stats` must be a live handle; `out_mean` valid for `dim` doubles.
 */
enum TtaStatus tta_stats_mean(const struct TtaStats *stats, double *out_mean);

/**
 * Fit statistics to `n` samples of dimension `dim` (row-major
 * `n * dim` buffer) with population (1/N) covariance normalization.
 *
 * # Safety
 * `data` must hold `n * dim` doubles; `out` must be valid.
 */
enum TtaStatus tta_stats_fit(const double *data, uintptr_t n, uintptr_t dim, struct TtaStats **out);

/**
 * One streaming update folding a batch (row-major `n * dim`) into the
 * running statistics at rate `gamma` per sample; returns the
 * post-update statistics as a new handle.
 *
 * # Safety
 * Pointer arguments as in [`tta_stats_fit`]; `stats` a live handle.
 */
enum TtaStatus tta_stats_update_streaming(const struct TtaStats *stats,
                                          const double *batch,
                                          uintptr_t n,
                                          uintptr_t dim,
                                          double gamma,
                                          struct TtaStats **out);

/**
 * Add the standard diagonal jitter to the covariance, returning a new
 * handle safe for Cholesky-based operations.
 *
 * # Safety
 * `stats` must be a live handle; `out` must be valid.
 */
enum TtaStatus tta_stats_regularize(const struct TtaStats *stats, struct TtaStats **out);

/**
 * Symmetric KL divergence between two Gaussian summaries.
 *
 * # Safety
 * `p` and `q` must be live handles; `out` must be valid.
 */
enum TtaStatus tta_sym_kl(const struct TtaStats *p, const struct TtaStats *q, double *out);

/**
 * Run the whole experiment described by a JSON config — pretrain, fit
 * source statistics, then adapt over each configured corruption — and
 * return a JSON summary. Artifacts land under the config's
 * `output_dir`. The caller controls cost entirely through the config.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out_summary_json`
 * must be valid. Free the result with [`tta_string_free`].
 */
enum TtaStatus tta_pipeline_run(const char *config_json, char **out_summary_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TTA_H */
