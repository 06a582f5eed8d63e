#ifndef TRANSFER_ITR_H
#define TRANSFER_ITR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum TitrStatus {
  TITR_STATUS_OK = 0,
  TITR_STATUS_NULL_POINTER = 1,
  // Bad sizes or values supplied by the caller.
  TITR_STATUS_INVALID_ARGUMENT = 2,
  // Data failed validation.
  TITR_STATUS_INPUT = 3,
  TITR_STATUS_INFEASIBLE = 4,
  TITR_STATUS_NUMERICAL = 5,
  TITR_STATUS_IO = 6,
  // A Rust panic was caught at the boundary.
  TITR_STATUS_PANIC = 7,
} TitrStatus;

// Experimental sample: covariates, binary treatment, outcome.
typedef struct TitrExperimental TitrExperimental;

// Linear rule `1{eta0 + eta1'x > 0}`.
typedef struct TitrRule TitrRule;

// Covariate-only sample from the target population.
typedef struct TitrTarget TitrTarget;

// Per-row transfer weights summing to one.
typedef struct TitrWeights TitrWeights;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if none. The
// pointer stays valid until the next failing call on the same thread.
const char *titr_last_error_message(void);

// Build an experimental sample from `n x p` covariates, `n` treatments in
// {0, 1} and `n` outcomes.
//
// # Safety
// `x` must hold `n * p` doubles, `a` and `y` `n` entries each; `out` must be writable.
enum TitrStatus titr_experimental_new(const double *x,
                                      size_t n,
                                      size_t p,
                                      const uint8_t *a,
                                      const double *y,
                                      struct TitrExperimental **out);

// # Safety
// `h` must be null or a handle from [`titr_experimental_new`] not yet freed.
void titr_experimental_free(struct TitrExperimental *h);

// Build a target sample from `m x p` covariates.
//
// # Safety
// `x` must hold `m * p` doubles; `out` must be writable.
enum TitrStatus titr_target_new(const double *x, size_t m, size_t p, struct TitrTarget **out);

// # Safety
// `h` must be null or a handle from [`titr_target_new`] not yet freed.
void titr_target_free(struct TitrTarget *h);

// Minimum-entropy balancing weights on first and second moments, with
// tolerances tuned automatically.
//
// # Safety
// Handles must be live; `out` must be writable.
enum TitrStatus titr_weights_nonparametric(const struct TitrExperimental *exp,
                                           const struct TitrTarget *target,
                                           struct TitrWeights **out);

// Equal weights `1/n`.
//
// # Safety
// `out` must be writable.
enum TitrStatus titr_weights_uniform(size_t n, struct TitrWeights **out);

// Number of weights, or 0 for a null handle.
//
// # Safety
// `w` must be null or live.
size_t titr_weights_len(const struct TitrWeights *w);

// Copy the weights into `buf`, which must have room for exactly `len` values.
//
// # Safety
// `w` must be live and `buf` writable for `len` doubles.
enum TitrStatus titr_weights_copy(const struct TitrWeights *w, double *buf, size_t len);

// Kish effective sample size.
//
// # Safety
// `w` must be live and `out` writable.
enum TitrStatus titr_weights_ess(const struct TitrWeights *w, double *out);

// # Safety
// `h` must be null or a weights handle not yet freed.
void titr_weights_free(struct TitrWeights *h);

// Rule from `len = p + 1` coefficients (intercept first).
//
// # Safety
// `eta` must hold `len` doubles; `out` must be writable.
enum TitrStatus titr_rule_new(const double *eta, size_t len, struct TitrRule **out);

// Learn a rule: weighted nuisances with constant propensity, augmented
// contrast, then the multi-start difference-of-convex fit. The rule is
// scaled so its largest coefficient has magnitude one.
//
// # Safety
// Handles must be live; `out` must be writable.
enum TitrStatus titr_rule_fit(const struct TitrExperimental *exp,
                              const struct TitrWeights *w,
                              uint64_t seed,
                              struct TitrRule **out);

// Number of coefficients, or 0 for a null handle.
//
// # Safety
// `rule` must be null or live.
size_t titr_rule_len(const struct TitrRule *rule);

// Copy the coefficients into `buf`, which must have room for exactly `len`.
//
// # Safety
// `rule` must be live and `buf` writable for `len` doubles.
enum TitrStatus titr_rule_eta(const struct TitrRule *rule, double *buf, size_t len);

// Decision (0 or 1) for one covariate vector of length `p`.
//
// # Safety
// `rule` must be live, `x` readable for `p` doubles and `out` writable.
enum TitrStatus titr_rule_predict(const struct TitrRule *rule,
                                  const double *x,
                                  size_t p,
                                  uint8_t *out);

// Weighted augmented value of `rule`, with nuisances refitted under `w`.
//
// # Safety
// Handles must be live; `value` must be writable; `ess` may be null.
enum TitrStatus titr_rule_value(const struct TitrRule *rule,
                                const struct TitrExperimental *exp,
                                const struct TitrWeights *w,
                                double *value,
                                double *ess);

// # Safety
// `h` must be null or a rule handle not yet freed.
void titr_rule_free(struct TitrRule *h);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRANSFER_ITR_H */
