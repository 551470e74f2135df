#ifndef SAAK_H
#define SAAK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Cap value meaning "keep every AC kernel".
#define SAAK_CAP_ALL UINT32_MAX

// Call outcome.
typedef enum SaakStatus {
  SAAK_STATUS_OK = 0,
  // A required pointer was null or a string was not UTF-8.
  SAAK_STATUS_NULL_ARGUMENT = 1,
  // Invalid argument or dimension mismatch.
  SAAK_STATUS_INVALID_ARGUMENT = 2,
  // Unreadable or malformed input data.
  SAAK_STATUS_DATA_ERROR = 3,
  // Numerical failure (no convergence, malformed position vector, ...).
  SAAK_STATUS_NUMERICAL_ERROR = 4,
  // A Rust panic was caught at the boundary.
  SAAK_STATUS_INTERNAL = 5,
} SaakStatus;

// Opaque fitted cascade.
typedef struct SaakModel SaakModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next call into this library on the same thread.
const char *saak_last_error(void);

// Fits a cascade on `count` images of `side × side` pixels. `caps` holds
// one AC kernel cap per stage (`log2(side)` entries); `SAAK_CAP_ALL` keeps
// every kernel. A null `caps` means lossless.
//
// # Safety
// `pixels` must point to `count·side·side` doubles, `caps` to `n_caps`
// values, and `out` to writable storage for one handle.
enum SaakStatus saak_model_fit(const double *pixels,
                               size_t count,
                               size_t side,
                               const uint32_t *caps,
                               size_t n_caps,
                               struct SaakModel **out);

// Reads a model file.
//
// # Safety
// `file` must be a NUL-terminated string and `out` writable.
enum SaakStatus saak_model_load(const char *file, struct SaakModel **out);

// Writes a model file.
//
// # Safety
// `model` must be a live handle and `file` a NUL-terminated string.
enum SaakStatus saak_model_save(const struct SaakModel *model, const char *file);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void saak_model_free(struct SaakModel *model);

// Input side, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t saak_model_side(const struct SaakModel *model);

// Stage count, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t saak_model_stage_count(const struct SaakModel *model);

// Signed coefficient count per spatial position of stage `stage`
// (1-based), or 0 when out of range.
//
// # Safety
// `model` must be null or a live handle.
size_t saak_model_signed_dim(const struct SaakModel *model, size_t stage);

// Number of values in stage `stage`'s grid (side² · signed dim), or 0.
//
// # Safety
// `model` must be null or a live handle.
size_t saak_model_stage_len(const struct SaakModel *model, size_t stage);

// 1 when every stage keeps all kernels, 0 otherwise or for null.
//
// # Safety
// `model` must be null or a live handle.
int32_t saak_model_is_lossless(const struct SaakModel *model);

// Forward transform of one image; writes stage `stage`'s signed grid
// (`saak_model_stage_len` values, position-major, channel fastest).
//
// # Safety
// `pixels` must hold `side²` doubles and `out` `out_len` doubles.
enum SaakStatus saak_model_forward(const struct SaakModel *model,
                                   const double *pixels,
                                   size_t n_pixels,
                                   size_t stage,
                                   double *out,
                                   size_t out_len);

// Inverts a last-stage signed grid to pixels (strict P/S for lossless
// models, nearest valid pairs otherwise).
//
// # Safety
// `coeffs` must hold `n_coeffs` doubles and `out` `out_len` doubles.
enum SaakStatus saak_model_inverse(const struct SaakModel *model,
                                   const double *coeffs,
                                   size_t n_coeffs,
                                   double *out,
                                   size_t out_len);

// Synthesizes an image from its `k` leading last-stage coefficients.
//
// # Safety
// `pixels` must hold `n_pixels` doubles and `out` `out_len` doubles.
enum SaakStatus saak_model_reconstruct_topk(const struct SaakModel *model,
                                            const double *pixels,
                                            size_t n_pixels,
                                            size_t k,
                                            double *out,
                                            size_t out_len);

// Sign-to-position conversion: writes `2·n` values.
//
// # Safety
// `values` must hold `n` doubles and `out` `2·n`.
enum SaakStatus saak_sign_to_position(const double *values, size_t n, double *out);

// Position-to-sign conversion of `2·n` values; rejects pairs with two
// nonzero slots or a negative slot.
//
// # Safety
// `position` must hold `2·n` doubles and `out` `n`.
enum SaakStatus saak_position_to_sign(const double *position, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAAK_H */
