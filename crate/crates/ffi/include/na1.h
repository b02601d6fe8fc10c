#ifndef NA1_H
#define NA1_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. The nonzero values match the CLI exit codes where they
 * overlap.
 */
typedef enum Na1Status {
  NA1_OK = 0,
  NA1_ERR_OTHER = 1,
  NA1_ERR_INVALID = 2,
  NA1_ERR_REFUSED = 3,
  NA1_ERR_NULL = 4,
  NA1_ERR_PANIC = 5,
} Na1Status;

/**
 * Verdict of [`na1_classify`].
 */
typedef enum Na1Classification {
  NA1_CLASS_OK = 0,
  NA1_CLASS_STRUCTURE_FAIL = 1,
  NA1_CLASS_MASS_DIVERGES = 2,
  NA1_CLASS_INCONCLUSIVE = 3,
} Na1Classification;

/**
 * A catalog market model.
 */
typedef struct Na1Model Na1Model;

/**
 * A parsed finite tree with exact rational data.
 */
typedef struct Na1Tree Na1Tree;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *na1_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *na1_version(void);

/**
 * Minimum-norm solution `ρ = c⁺a` and residual `a − cρ` for a symmetric
 * PSD `d × d` matrix `c` (row-major).
 *
 * # Safety
 * `c` must point to `d*d` doubles; `a`, `rho_out` and `residual_out` to
 * `d` doubles each.
 */
enum Na1Status na1_pseudo_solve(const double *c,
                                const double *a,
                                size_t d,
                                double tol,
                                double *rho_out,
                                double *residual_out);

/**
 * Build a catalog model. `keys`/`values` hold `n` parameter overrides and
 * may be null when `n` is 0. Returns null on failure.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `keys` must point to `n` such
 * strings and `values` to `n` doubles.
 */
struct Na1Model *na1_model_new(const char *name,
                               const char *const *keys,
                               const double *values,
                               size_t n);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`na1_model_new`] and not be used afterwards.
 */
void na1_model_free(struct Na1Model *model);

/**
 * Number of assets; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t na1_model_dim(const struct Na1Model *model);

/**
 * Classify a model from `paths` paths on a uniform grid refined `levels − 1`
 * times by `factor`. `overall_ratio_out` may be null.
 *
 * # Safety
 * `model` must be a live handle; `class_out` must be writable.
 */
enum Na1Status na1_classify(const struct Na1Model *model,
                            double horizon,
                            size_t steps,
                            size_t paths,
                            uint64_t seed,
                            size_t levels,
                            size_t factor,
                            enum Na1Classification *class_out,
                            double *overall_ratio_out);

/**
 * Parse a tree description (TOML text). Returns null on failure.
 *
 * # Safety
 * `text` must be a NUL-terminated string.
 */
struct Na1Tree *na1_tree_parse(const char *text);

/**
 * Release a tree. Null is ignored.
 *
 * # Safety
 * `tree` must come from [`na1_tree_parse`] and not be used afterwards.
 */
void na1_tree_free(struct Na1Tree *tree);

/**
 * Number of nodes; 0 for a null handle.
 *
 * # Safety
 * `tree` must be null or a live handle.
 */
size_t na1_tree_len(const struct Na1Tree *tree);

/**
 * Solve for a deflator in exact arithmetic. On success `*feasible_out` is
 * 1 and `y_out` receives the density at each node (file order), rounded
 * to double; otherwise `*feasible_out` is 0 and `*arbitrage_node_out` is
 * the first node admitting a one-period arbitrage.
 *
 * # Safety
 * `tree` must be a live handle, `y_out` must hold `len` doubles with
 * `len == na1_tree_len(tree)`, and the two int pointers must be writable.
 */
enum Na1Status na1_tree_deflator(const struct Na1Tree *tree,
                                 double *y_out,
                                 size_t len,
                                 int32_t *feasible_out,
                                 size_t *arbitrage_node_out);

/**
 * Run a CLI command, e.g. `{"na1", "check-na1", "--config", "x.toml"}`,
 * and return its exit code.
 *
 * # Safety
 * `argv` must point to `argc` NUL-terminated strings.
 */
int32_t na1_run_command(int32_t argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NA1_H */
