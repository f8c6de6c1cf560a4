#ifndef FEEDBACK_OPF_H
#define FEEDBACK_OPF_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FopfStatus {
  FOPF_STATUS_OK = 0,
  FOPF_STATUS_NULL_POINTER = 1,
  FOPF_STATUS_INVALID_ARGUMENT = 2,
  FOPF_STATUS_PARSE = 3,
  FOPF_STATUS_NUMERICAL = 4,
  FOPF_STATUS_IO = 5,
  FOPF_STATUS_PANIC = 6,
} FopfStatus;

/**
 * Loaded feeder together with its linearized voltage model.
 */
typedef struct FopfFeeder FopfFeeder;

/**
 * Trained policy checkpoint.
 */
typedef struct FopfPolicy FopfPolicy;

/**
 * Quantities one node needs for its update.
 */
typedef struct FopfLocalView {
  double p;
  double q;
  double v_hat;
  double p_u;
  double q_u;
  double p_floor;
  double q_floor;
  double weight;
  double p_lo;
  double p_hi;
  double q_lo;
  double q_hi;
} FopfLocalView;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the next call.
 */
const char *fopf_last_error(void);

/**
 * Load a feeder file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FopfStatus fopf_feeder_load(const char *path, struct FopfFeeder **out);

/**
 * Parse feeder text.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FopfStatus fopf_feeder_parse(const char *text, struct FopfFeeder **out);

/**
 * Release a feeder handle. NULL is ignored.
 *
 * # Safety
 * `feeder` must come from a feeder constructor and not be freed twice.
 */
void fopf_feeder_free(struct FopfFeeder *feeder);

/**
 * Number of non-substation buses.
 *
 * # Safety
 * `feeder` must be a live handle and `out` a valid pointer.
 */
enum FopfStatus fopf_feeder_bus_count(const struct FopfFeeder *feeder, size_t *out);

/**
 * Copy the R and X sensitivity matrices, row-major, into buffers of `len` = N*N doubles.
 *
 * # Safety
 * `r_out` and `x_out` must each hold `len` doubles.
 */
enum FopfStatus fopf_feeder_sensitivities(const struct FopfFeeder *feeder,
                                          double *r_out,
                                          double *x_out,
                                          size_t len);

/**
 * Spectral norm of `[R X]`.
 *
 * # Safety
 * `feeder` must be a live handle and `out` a valid pointer.
 */
enum FopfStatus fopf_feeder_spectral_norm(const struct FopfFeeder *feeder, double *out);

/**
 * Nonlinear power flow. Inputs hold `n` per-bus values (bus 1..N); `v_out`
 * receives squared voltage magnitudes. `iterations_out` may be NULL.
 *
 * # Safety
 * All arrays must hold `n` doubles.
 */
enum FopfStatus fopf_power_flow(const struct FopfFeeder *feeder,
                                const double *p,
                                const double *q,
                                const double *p_u,
                                const double *q_u,
                                size_t n,
                                double *v_out,
                                size_t *iterations_out);

/**
 * Load a policy checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FopfStatus fopf_policy_load(const char *path, struct FopfPolicy **out);

/**
 * Release a policy handle. NULL is ignored.
 *
 * # Safety
 * `policy` must come from [`fopf_policy_load`] and not be freed twice.
 */
void fopf_policy_free(struct FopfPolicy *policy);

/**
 * Policy output `MLP(d) + k v` for `bus`; `channel` 0 is active power, 1 reactive.
 *
 * # Safety
 * `policy` must be a live handle and `out` a valid pointer.
 */
enum FopfStatus fopf_policy_eval(const struct FopfPolicy *policy,
                                 size_t bus,
                                 uint32_t channel,
                                 double v,
                                 double d,
                                 double *out);

/**
 * One local controller update for `bus`. `policy` may be NULL, which means no learned term.
 *
 * # Safety
 * `view`, `p_out` and `q_out` must be valid pointers.
 */
enum FopfStatus fopf_local_update(const struct FopfPolicy *policy,
                                  size_t bus,
                                  const struct FopfLocalView *view,
                                  double alpha,
                                  double *p_out,
                                  double *q_out);

/**
 * Contraction factor of the closed loop.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FopfStatus fopf_rho(double m,
                         double xi,
                         double l_theta,
                         double a_norm,
                         double alpha,
                         double *out);

/**
 * Asymptotic tracking bound; fails when `rho >= 1`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FopfStatus fopf_tracking_bound(double rho,
                                    double gamma,
                                    double l_h,
                                    double approx_eps,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEEDBACK_OPF_H */
