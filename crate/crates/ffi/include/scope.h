#ifndef SCOPE_H
#define SCOPE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum ScopeStatus {
  SCOPE_STATUS_OK = 0,
  SCOPE_STATUS_NULL_POINTER = 1,
  SCOPE_STATUS_INVALID_ARGUMENT = 2,
  SCOPE_STATUS_DIMENSION_MISMATCH = 3,
  SCOPE_STATUS_DEGENERATE_VECTOR = 4,
  SCOPE_STATUS_EMPTY_INPUT = 5,
  SCOPE_STATUS_IO = 6,
  SCOPE_STATUS_FORMAT = 7,
  SCOPE_STATUS_DUPLICATE_CLASS = 8,
  SCOPE_STATUS_INTERNAL = 9,
} ScopeStatus;

// A frozen instance prototype bank.
typedef struct ScopeBank ScopeBank;

// A classifier matrix grown stage by stage.
typedef struct ScopeClassifier ScopeClassifier;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *scope_version(void);

// Message of the last failed call on this thread, or null. Valid until the next call.
const char *scope_last_error(void);

// Harmonic mean `2bn / (b + n)`, 0 when both are 0.
double scope_harmonic_mean(double base, double novel);

// Mean of the `features` rows whose `mask` byte is non-zero.
//
// # Safety
// `features` holds `rows * dim` floats, `mask` holds `rows` bytes and `out` has room for
// `dim` floats.
enum ScopeStatus scope_masked_mean(const float *features,
                                   size_t rows,
                                   size_t dim,
                                   const uint8_t *mask,
                                   float *out);

// Cosine similarity of two `dim`-vectors, written to `out`.
//
// # Safety
// `a` and `b` hold `dim` floats; `out` is writable.
enum ScopeStatus scope_cosine(const float *a,
                              const float *b,
                              size_t dim,
                              double epsilon,
                              double *out);

// Build a frozen bank from `n` row-major prototypes of width `dim`.
//
// # Safety
// `rows` holds `n * dim` floats; `out` is writable.
enum ScopeStatus scope_bank_from_rows(const float *rows,
                                      size_t n,
                                      size_t dim,
                                      struct ScopeBank **out);

// Load an IPBB bank file.
//
// # Safety
// `path` is a NUL-terminated UTF-8 string; `out` is writable.
enum ScopeStatus scope_bank_load(const char *path, struct ScopeBank **out);

// Write `bank` as an IPBB file.
//
// # Safety
// `bank` comes from this library; `path` is a NUL-terminated UTF-8 string.
enum ScopeStatus scope_bank_save(const struct ScopeBank *bank, const char *path);

// Number of prototypes, 0 for a null handle.
//
// # Safety
// `bank` is null or comes from this library.
size_t scope_bank_len(const struct ScopeBank *bank);

// Prototype width, 0 for a null handle.
//
// # Safety
// `bank` is null or comes from this library.
size_t scope_bank_dim(const struct ScopeBank *bank);

// Copy prototype `index` into `out`, which has room for `dim` floats.
//
// # Safety
// `bank` comes from this library; `out` holds `dim` floats.
enum ScopeStatus scope_bank_get(const struct ScopeBank *bank, size_t index, float *out, size_t dim);

// Release a bank. Null is a no-op.
//
// # Safety
// `bank` is null or an unreleased handle from this library.
void scope_bank_free(struct ScopeBank *bank);

// Top-`min(top_r, len)` bank entries by cosine similarity to `query`, best first, ties by
// ascending index. `indices` and `similarities` need room for `top_r` entries; `count`
// receives the number written.
//
// # Safety
// `bank` comes from this library; `query` holds `dim` floats; the output buffers are
// writable for `top_r` entries.
enum ScopeStatus scope_retrieve(const struct ScopeBank *bank,
                                const float *query,
                                size_t dim,
                                size_t top_r,
                                double epsilon,
                                size_t *indices,
                                double *similarities,
                                size_t *count);

// Enriched prototype `lambda * p + (1 - lambda) * h` over `n` row-major context vectors.
// With `n == 0` the output equals `p`.
//
// # Safety
// `p` and `out` hold `dim` floats; `context` holds `n * dim` floats.
enum ScopeStatus scope_enrich(const float *p,
                              const float *context,
                              size_t n,
                              size_t dim,
                              double lambda,
                              double epsilon,
                              float *out);

// New empty classifier of width `dim`.
//
// # Safety
// `out` is writable.
enum ScopeStatus scope_classifier_new(size_t dim, struct ScopeClassifier **out);

// Append `n` rows for `stage`, which must exceed every stage already added. Existing rows
// are left untouched.
//
// # Safety
// `classifier` comes from this library; `class_ids` holds `n` ids and `rows` holds
// `n * dim` floats.
enum ScopeStatus scope_classifier_append_stage(struct ScopeClassifier *classifier,
                                               size_t stage,
                                               const int32_t *class_ids,
                                               const float *rows,
                                               size_t n);

// Number of classifier rows, 0 for a null handle.
//
// # Safety
// `classifier` is null or comes from this library.
size_t scope_classifier_len(const struct ScopeClassifier *classifier);

// Arg-max class per embedding row; ties go to the earliest row.
//
// # Safety
// `classifier` comes from this library; `embeddings` holds `rows * dim` floats and `out`
// holds `rows` ints.
enum ScopeStatus scope_classifier_predict(const struct ScopeClassifier *classifier,
                                          const float *embeddings,
                                          size_t rows,
                                          size_t dim,
                                          int32_t *out);

// Release a classifier. Null is a no-op.
//
// # Safety
// `classifier` is null or an unreleased handle from this library.
void scope_classifier_free(struct ScopeClassifier *classifier);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCOPE_H */
