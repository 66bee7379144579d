#ifndef CENKF_H
#define CENKF_H

/* Generated by cbindgen at build time. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum cenkf_status {
  CENKF_STATUS_OK = 0,
  CENKF_STATUS_NULL_POINTER = 1,
  CENKF_STATUS_INVALID_ARGUMENT = 2,
  CENKF_STATUS_PARSE = 3,
  CENKF_STATUS_IO = 4,
  CENKF_STATUS_RUN = 5,
  CENKF_STATUS_NOT_AVAILABLE = 6,
  CENKF_STATUS_PANIC = 7,
} cenkf_status;

/**
 * Experiment configuration.
 */
typedef struct cenkf_config cenkf_config;

/**
 * Outcome of one filtering run.
 */
typedef struct cenkf_result cenkf_result;

/**
 * Parsed patient timeline.
 */
typedef struct cenkf_timeline cenkf_timeline;

/**
 * One forecast row of a result.
 */
typedef struct cenkf_record {
  double t;
  double y;
  double forecast_mean;
  double forecast_std;
  double forecast_min;
  double forecast_max;
  size_t forecast_violations;
  size_t replaced;
} cenkf_record;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next library call on the same thread.
 */
const char *cenkf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cenkf_version(void);

/**
 * Load a timeline from a `.csv` or `.json` file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum cenkf_status cenkf_timeline_from_path(const char *path, struct cenkf_timeline **out);

/**
 * Parse a timeline from CSV text.
 *
 * # Safety
 * `id` and `csv` must be NUL-terminated strings and `out` a valid pointer.
 */
enum cenkf_status cenkf_timeline_from_csv(const char *id,
                                          const char *csv,
                                          struct cenkf_timeline **out);

/**
 * Number of events in the timeline, or 0 for a null handle.
 *
 * # Safety
 * `tl` must be null or a live handle.
 */
size_t cenkf_timeline_len(const struct cenkf_timeline *tl);

/**
 * # Safety
 * `tl` must be null or a handle not yet freed.
 */
void cenkf_timeline_free(struct cenkf_timeline *tl);

/**
 * Build a configuration from JSON. Null or empty text gives the defaults;
 * missing keys keep their default values.
 *
 * # Safety
 * `json` must be null or a NUL-terminated string; `out` a valid pointer.
 */
enum cenkf_status cenkf_config_new(const char *json, struct cenkf_config **out);

/**
 * # Safety
 * `cfg` must be null or a handle not yet freed.
 */
void cenkf_config_free(struct cenkf_config *cfg);

/**
 * Run the filter over a timeline.
 *
 * # Safety
 * `tl` and `cfg` must be live handles and `out` a valid pointer.
 */
enum cenkf_status cenkf_run(const struct cenkf_timeline *tl,
                            const struct cenkf_config *cfg,
                            struct cenkf_result **out);

/**
 * Number of forecast records in the result.
 *
 * # Safety
 * `res` must be null or a live handle.
 */
size_t cenkf_result_len(const struct cenkf_result *res);

/**
 * Copy record `index` into `out`.
 *
 * # Safety
 * `res` must be a live handle and `out` a valid pointer.
 */
enum cenkf_status cenkf_result_record(const struct cenkf_result *res,
                                      size_t index,
                                      struct cenkf_record *out);

/**
 * Mean squared forecast error after the configured cutoff. Returns
 * `NotAvailable` when no record qualifies.
 *
 * # Safety
 * `res` must be a live handle and `out` a valid pointer.
 */
enum cenkf_status cenkf_result_mse(const struct cenkf_result *res, double *out);

/**
 * 1 if the run stopped early, else 0.
 *
 * # Safety
 * `res` must be null or a live handle.
 */
int32_t cenkf_result_aborted(const struct cenkf_result *res);

/**
 * Write the result tables into directory `dir`, creating it if needed.
 *
 * # Safety
 * `res` must be a live handle and `dir` a NUL-terminated string.
 */
enum cenkf_status cenkf_result_export(const struct cenkf_result *res, const char *dir);

/**
 * # Safety
 * `res` must be null or a handle not yet freed.
 */
void cenkf_result_free(struct cenkf_result *res);

/**
 * Number of physiological state variables.
 */
size_t cenkf_state_dim(void);

/**
 * Integrate the model at nominal parameters from `initial` (length
 * `cenkf_state_dim()`) and write the state at each of the `n_times`
 * increasing `times` into `out`, row by row. The first time is the start.
 * Nutrition events are given as parallel arrays of times (min) and
 * amounts (mg).
 *
 * # Safety
 * Array arguments must be valid for the stated lengths; `out` must hold
 * `n_times * cenkf_state_dim()` values.
 */
enum cenkf_status cenkf_simulate(const double *initial,
                                 const double *times,
                                 size_t n_times,
                                 const double *feed_times,
                                 const double *feed_amounts,
                                 size_t n_feeds,
                                 double *out);

/**
 * Solve `min ½ xᵀQx + cᵀx` subject to `A x = a` and `B x ≤ b`. Matrices
 * are row-major: `q` is n×n, `a_mat` n_eq×n, `b_mat` n_ineq×n. The
 * minimizer is written to `x` (length n).
 *
 * # Safety
 * Array arguments must be valid for the stated dimensions.
 */
enum cenkf_status cenkf_qp_solve(size_t n,
                                 const double *q,
                                 const double *c,
                                 size_t n_eq,
                                 const double *a_mat,
                                 const double *a,
                                 size_t n_ineq,
                                 const double *b_mat,
                                 const double *b,
                                 double *x);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CENKF_H */
