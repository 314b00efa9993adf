#ifndef NESTWAVE_H
#define NESTWAVE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of an FFI call.
 */
typedef enum {
  /**
   * Call succeeded; output parameters are valid.
   */
  NW_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  NW_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  NW_STATUS_INVALID_UTF8 = 2,
  /**
   * A size or numeric argument was out of range.
   */
  NW_STATUS_INVALID_ARGUMENT = 3,
  /**
   * The operation itself failed; see [`nw_last_error`].
   */
  NW_STATUS_FAILED = 4,
} NwStatus;

/**
 * Orthonormal wavelet basis handle.
 */
typedef struct NwBasis NwBasis;

/**
 * Haul count dataset handle.
 */
typedef struct NwDataset NwDataset;

/**
 * Shape of a loaded dataset.
 */
typedef struct {
  /**
   * Number of haul records.
   */
  size_t hauls;
  /**
   * Number of count categories per record.
   */
  size_t categories;
  /**
   * Largest trip identifier.
   */
  size_t trips;
  /**
   * Largest quarter index.
   */
  size_t quarters;
} NwDatasetSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread, or null if no
 * call has failed yet. The pointer stays valid until the next failing call
 * on the same thread; do not free it.
 */
const char *nw_last_error(void);

/**
 * Read a haul CSV (`trip,obs,quarter,<cat1>,...,<catK>`) into a new dataset.
 *
 * # Safety
 * `path` must point to a NUL-terminated string and `out` to writable
 * storage for one pointer. On success `*out` owns the dataset and must be
 * released with [`nw_dataset_free`]; on failure `*out` is untouched.
 */
NwStatus nw_dataset_read(const char *path, NwDataset **out);

/**
 * Fill `out` with the dataset's dimensions.
 *
 * # Safety
 * `dataset` must be a live handle from [`nw_dataset_read`] and `out` must
 * point to writable storage for one `NwDatasetSummary`.
 */
NwStatus nw_dataset_summary(const NwDataset *dataset, NwDatasetSummary *out);

/**
 * Release a dataset handle. Null is ignored.
 *
 * # Safety
 * `dataset` must be null or a handle from [`nw_dataset_read`] that has not
 * been freed already.
 */
void nw_dataset_free(NwDataset *dataset);

/**
 * Build the periodic symmlet basis with `depth` detail levels (grid size
 * `2^depth`, depth between 2 and 12).
 *
 * # Safety
 * `out` must point to writable storage for one pointer. On success `*out`
 * owns the basis and must be released with [`nw_basis_free`].
 */
NwStatus nw_basis_build(size_t depth, NwBasis **out);

/**
 * Grid size L of a basis, or 0 for a null handle.
 *
 * # Safety
 * `basis` must be null or a live handle from [`nw_basis_build`].
 */
size_t nw_basis_len(const NwBasis *basis);

/**
 * Release a basis handle. Null is ignored.
 *
 * # Safety
 * `basis` must be null or a handle from [`nw_basis_build`] that has not
 * been freed already.
 */
void nw_basis_free(NwBasis *basis);

/**
 * Forward wavelet transform of `len` values into `len` coefficients.
 * `len` must equal the basis grid size.
 *
 * # Safety
 * `basis` must be a live handle; `x` and `out` must be valid for `len`
 * doubles each. `x` and `out` may alias only if identical.
 */
NwStatus nw_dwt(const NwBasis *basis, const double *x, size_t len, double *out);

/**
 * Inverse wavelet transform of `len` coefficients into `len` values.
 * `len` must equal the basis grid size.
 *
 * # Safety
 * `basis` must be a live handle; `x` and `out` must be valid for `len`
 * doubles each. `x` and `out` may alias only if identical.
 */
NwStatus nw_idwt(const NwBasis *basis, const double *x, size_t len, double *out);

/**
 * Log-pmf of the zero-and-N-inflated binomial at count `y` of `n`, success
 * probability `p`, and inflation weights `lambda0`, `lambda_n` on the
 * log-odds scale (`-INFINITY` disables a spike).
 *
 * # Safety
 * `out` must point to writable storage for one double.
 */
NwStatus nw_zani_logpmf(uint64_t y,
                        uint64_t n,
                        double p,
                        double lambda0,
                        double lambda_n,
                        double *out);

/**
 * Log-pmf of the zero-inflated binomial at count `y` of `n`, success
 * probability `p`, and zero-spike weight `lambda0` on the log-odds scale.
 *
 * # Safety
 * `out` must point to writable storage for one double.
 */
NwStatus nw_zi_logpmf(uint64_t y, uint64_t n, double p, double lambda0, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NESTWAVE_H */
