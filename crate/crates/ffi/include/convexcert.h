#ifndef CONVEXCERT_H
#define CONVEXCERT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define CC_NORM_L1 1

#define CC_NORM_L2 2

#define CC_NORM_LINF 3

/**
 * Result code of every fallible call.
 */
typedef enum {
  CC_STATUS_OK = 0,
  CC_STATUS_NULL_POINTER = 1,
  CC_STATUS_INVALID_ARGUMENT = 2,
  CC_STATUS_SHAPE = 3,
  CC_STATUS_IO = 4,
  CC_STATUS_FORMAT = 5,
  CC_STATUS_VERSION = 6,
  CC_STATUS_NUMERIC = 7,
  CC_STATUS_UNSUPPORTED_NORM = 8,
  CC_STATUS_PANIC = 9,
} CcStatus;

/**
 * Opaque classifier handle.
 */
typedef struct CcClassifier CcClassifier;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread; empty after a
 * success. The pointer stays valid until the next call on this thread.
 */
const char *cc_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cc_version(void);

/**
 * Loads a saved classifier. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
CcStatus cc_classifier_load(const char *path, CcClassifier **out);

/**
 * Writes the classifier to `path`.
 *
 * # Safety
 * `h` must come from `cc_classifier_load`; `path` must be NUL-terminated.
 */
CcStatus cc_classifier_save(const CcClassifier *h, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `h` must be null or a live handle from `cc_classifier_load`, freed once.
 */
void cc_classifier_free(CcClassifier *h);

/**
 * # Safety
 * `h` must be a live handle and `out` writable.
 */
CcStatus cc_classifier_input_dim(const CcClassifier *h, size_t *out);

/**
 * # Safety
 * `h` must be a live handle and `out` writable.
 */
CcStatus cc_classifier_tau(const CcClassifier *h, float *out);

/**
 * Replaces the threshold shift; it must be finite.
 *
 * # Safety
 * `h` must be a live handle.
 */
CcStatus cc_classifier_set_tau(CcClassifier *h, float tau);

/**
 * Predicted class (1 or 2) and shifted logit for `x[0..len]`. Either
 * output pointer may be null.
 *
 * # Safety
 * `h` must be a live handle and `x` must point to `len` floats.
 */
CcStatus cc_classifier_predict(const CcClassifier *h,
                               const float *x,
                               size_t len,
                               uint8_t *out_class,
                               float *out_shifted_logit);

/**
 * Certified radius of `x[0..len]` under the norm `norm` (`CC_NORM_*`).
 * Zero when the prediction is class 2, `+inf` for a flat network.
 *
 * # Safety
 * `h` must be a live handle, `x` must point to `len` floats and
 * `out_radius` must be writable.
 */
CcStatus cc_classifier_certify(const CcClassifier *h,
                               const float *x,
                               size_t len,
                               uint32_t norm,
                               double *out_radius);

/**
 * Dual norm of `v[0..len]` for the primal norm `norm` (`CC_NORM_*`).
 *
 * # Safety
 * `v` must point to `len` floats and `out` must be writable.
 */
CcStatus cc_dual_norm(const float *v, size_t len, uint32_t norm, double *out);

/**
 * Lower bound on the probability that `m` and `n` random points in `d`
 * dimensions are convexly separable.
 *
 * # Safety
 * `out` must be writable.
 */
CcStatus cc_separability_bound(size_t m, size_t n, size_t d, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONVEXCERT_H */
