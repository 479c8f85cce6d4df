#ifndef CONFLAB_H
#define CONFLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes; zero is success.
 */
typedef enum ConflabStatus {
  CONFLAB_STATUS_OK = 0,
  CONFLAB_STATUS_NULL_POINTER = 1,
  CONFLAB_STATUS_INVALID_UTF8 = 2,
  CONFLAB_STATUS_MALFORMED = 3,
  CONFLAB_STATUS_DIMENSION = 4,
  CONFLAB_STATUS_BUDGET_EXCEEDED = 5,
  CONFLAB_STATUS_INVALID_ARGUMENT = 6,
  /**
   * Input failed a precondition oracle (e.g. not an IID e-variable).
   */
  CONFLAB_STATUS_CHECK_FAILED = 7,
  CONFLAB_STATUS_IO = 8,
  CONFLAB_STATUS_PANIC = 9,
} ConflabStatus;

/**
 * Opaque table handle.
 */
typedef struct ConflabTable ConflabTable;

/**
 * Oracle verdict, see the library's `CheckReport`.
 */
typedef struct ConflabCheck {
  bool ok;
  double worst_value;
  double bound;
  double tolerance;
  /**
   * False when the IID search did not settle; `worst_value` is then a lower bound.
   */
  bool converged;
} ConflabCheck;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Parses a table from its JSON form (`{"space": .., "n": .., "values": [..]}`, `"inf"` for infinity).
 *
 * # Safety
 * `json` must be a nul-terminated string and `out` a valid pointer.
 */
enum ConflabStatus conflab_table_from_json(const char *json,
                                           struct ConflabTable **out);

/**
 * Reads a table from a JSON file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum ConflabStatus conflab_table_load(const char *path, struct ConflabTable **out);

/**
 * Builds a table over `x_card x y_card` with training length `n` from `len` values in
 * row-major order (position 0 most significant). `len` must equal `(x_card y_card)^(n+1)`.
 *
 * # Safety
 * `values` must point to `len` readable doubles and `out` must be valid.
 */
enum ConflabStatus conflab_table_from_values(size_t x_card,
                                             size_t y_card,
                                             size_t n,
                                             const double *values,
                                             size_t len,
                                             struct ConflabTable **out);

/**
 * Number of entries, or 0 for a null handle.
 *
 * # Safety
 * `table` must be null or a live handle.
 */
size_t conflab_table_len(const struct ConflabTable *table);

/**
 * Copies the entries into `buf`, which must hold `conflab_table_len` doubles.
 *
 * # Safety
 * `table` must be a live handle and `buf` must point to `cap` writable doubles.
 */
enum ConflabStatus conflab_table_values(const struct ConflabTable *table, double *buf, size_t cap);

/**
 * Serializes a table; release the string with [`conflab_string_free`].
 *
 * # Safety
 * `table` must be a live handle and `out` a valid pointer.
 */
enum ConflabStatus conflab_table_to_json(const struct ConflabTable *table, char **out);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void conflab_string_free(char *s);

/**
 * # Safety
 * `table` must be null or a live handle; it is invalid afterwards.
 */
void conflab_table_free(struct ConflabTable *table);

/**
 * IID e-variable check: `sup_Q E_Q[table] <= 1 + tol`.
 *
 * # Safety
 * `table` must be a live handle and `out` a valid pointer.
 */
enum ConflabStatus conflab_check_e_iid(const struct ConflabTable *table,
                                       double tol,
                                       struct ConflabCheck *out);

/**
 * Exchangeability e-variable check: every orbit mean at most `1 + tol`.
 *
 * # Safety
 * `table` must be a live handle and `out` a valid pointer.
 */
enum ConflabStatus conflab_check_e_exchangeable(const struct ConflabTable *table,
                                                double tol,
                                                struct ConflabCheck *out);

/**
 * Membership check for a class named as on the command line (`ER`, `PtX`, `TestCondEX`, ...).
 *
 * # Safety
 * `table` must be a live handle, `class` a nul-terminated string and `out` valid.
 */
enum ConflabStatus conflab_check_class(const struct ConflabTable *table,
                                       const char *class_,
                                       double tol_exch,
                                       double tol_iid,
                                       struct ConflabCheck *out);

/**
 * Splits an IID e-variable into an exchangeability factor and a fully invariant
 * IID factor. Fails with `CheckFailed` when the input is not an IID e-variable.
 *
 * # Safety
 * `table` must be a live handle; `out_exch` and `out_invariant` valid pointers.
 */
enum ConflabStatus conflab_decompose(const struct ConflabTable *table,
                                     double tol_iid,
                                     struct ConflabTable **out_exch,
                                     struct ConflabTable **out_invariant);

/**
 * Message for the most recent failure on this thread, or null. Owned by the library.
 */
const char *conflab_last_error_message(void);

/**
 * Library version, static.
 */
const char *conflab_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONFLAB_H */
