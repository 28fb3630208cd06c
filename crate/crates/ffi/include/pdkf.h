#ifndef PDKF_H
#define PDKF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PdkfStatus {
  PDKF_STATUS_OK = 0,
  // Null pointer, invalid UTF-8 or an index out of range.
  PDKF_STATUS_INVALID_ARGUMENT = 1,
  // Configuration or dimension error.
  PDKF_STATUS_CONFIG = 2,
  // Numerical failure, including non-convergence.
  PDKF_STATUS_NUMERIC = 3,
  PDKF_STATUS_IO = 4,
  // The requested value does not exist for this arm.
  PDKF_STATUS_INAPPLICABLE = 5,
  // A Rust panic was caught at the boundary.
  PDKF_STATUS_PANIC = 6,
} PdkfStatus;

// Validated experiment: network, sensors and experiment arms.
typedef struct PdkfExperiment PdkfExperiment;

// Results of [`pdkf_experiment_run`].
typedef struct PdkfReport PdkfReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *pdkf_last_error(void);

// Library version as a static NUL-terminated string.
const char *pdkf_version(void);

// Build an experiment from TOML text.
//
// # Safety
// `toml` must be a NUL-terminated string and `out` a writable pointer.
enum PdkfStatus pdkf_experiment_from_toml(const char *toml, struct PdkfExperiment **out);

// Build an experiment from a TOML file; `PDKF_SEED` overrides the seed.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum PdkfStatus pdkf_experiment_from_file(const char *path, struct PdkfExperiment **out);

// # Safety
// `exp` must come from `pdkf_experiment_from_*` and not be used afterwards.
void pdkf_experiment_free(struct PdkfExperiment *exp);

// Number of nodes, or 0 for a null handle.
//
// # Safety
// `exp` must be null or a live experiment.
size_t pdkf_experiment_node_count(const struct PdkfExperiment *exp);

// Number of experiment arms, or 0 for a null handle.
//
// # Safety
// `exp` must be null or a live experiment.
size_t pdkf_experiment_arm_count(const struct PdkfExperiment *exp);

// Steady-state network MSD predicted for `arm` (linear scale), without
// simulating. Returns [`PdkfStatus::Inapplicable`] when no prediction
// exists.
//
// # Safety
// `exp` must be a live experiment and `out` writable.
enum PdkfStatus pdkf_experiment_theory(const struct PdkfExperiment *exp, size_t arm, double *out);

// Run the Monte-Carlo ensemble.
//
// # Safety
// `exp` must be a live experiment and `out` writable.
enum PdkfStatus pdkf_experiment_run(const struct PdkfExperiment *exp, struct PdkfReport **out);

// # Safety
// `report` must come from `pdkf_experiment_run` and not be used afterwards.
void pdkf_report_free(struct PdkfReport *report);

// Shared entries `L` of `arm` and the scalars it transmits per iteration.
//
// # Safety
// `report` must be a live report; `l` and `scalars` writable or null.
enum PdkfStatus pdkf_report_arm_info(const struct PdkfReport *report,
                                     size_t arm,
                                     size_t *l,
                                     size_t *scalars);

// Copy up to `len` points of `arm`'s network MSD curve (linear scale) into
// `buf`; `total` receives the full curve length. Pass `buf = NULL` to
// query the length only.
//
// # Safety
// `buf` must hold `len` doubles when non-null; `total` writable or null.
enum PdkfStatus pdkf_report_curve(const struct PdkfReport *report,
                                  size_t arm,
                                  double *buf,
                                  size_t len,
                                  size_t *total);

// Empirical and (when available) theoretical steady-state network MSD of
// `arm`, linear scale. `theory` is set to NaN when inapplicable.
//
// # Safety
// `report` must be a live report; `empirical` and `theory` writable or null.
enum PdkfStatus pdkf_report_steady(const struct PdkfReport *report,
                                   size_t arm,
                                   double *empirical,
                                   double *theory);

// Write `curves.csv`, `steady.csv` and `meta.json` into `dir`.
//
// # Safety
// `report` must be a live report and `dir` a NUL-terminated string.
enum PdkfStatus pdkf_report_write(const struct PdkfReport *report, const char *dir);

// Steady-state prior covariance of a single Kalman filter with state
// dimension `m` and observation dimension `p`, iterated from `pi0`.
// `p_pred` receives the `m×m` result.
//
// # Safety
// Matrix pointers must hold the stated number of row-major doubles.
enum PdkfStatus pdkf_solve_riccati(size_t m,
                                   size_t p,
                                   const double *f,
                                   const double *g,
                                   const double *q,
                                   const double *pi0,
                                   const double *h,
                                   const double *r,
                                   double tol,
                                   size_t max_iter,
                                   double *p_pred);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PDKF_H */
