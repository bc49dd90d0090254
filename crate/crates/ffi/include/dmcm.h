#ifndef DMCM_H
#define DMCM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum DmcmStatus {
  DMCM_STATUS_OK = 0,
  DMCM_STATUS_NULL_ARGUMENT = 1,
  DMCM_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad config, bad checkpoint or bad argument value.
   */
  DMCM_STATUS_CONFIG = 3,
  /**
   * Non-finite values or failed sampling.
   */
  DMCM_STATUS_NUMERICAL = 4,
  /**
   * Array sizes that do not fit the model.
   */
  DMCM_STATUS_SHAPE = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  DMCM_STATUS_PANIC = 6,
} DmcmStatus;

/**
 * Opaque training state.
 */
typedef struct DmcmTrainer DmcmTrainer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *dmcm_last_error(void);

/**
 * Library version, static storage.
 */
const char *dmcm_version(void);

/**
 * Builds a trainer from an experiment config in TOML for `seed`, using the
 * first trial of its range partition.
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DmcmStatus dmcm_trainer_from_toml(const char *config_toml,
                                       uint64_t seed,
                                       struct DmcmTrainer **out);

/**
 * Restores a trainer saved with [`dmcm_trainer_to_json`].
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DmcmStatus dmcm_trainer_from_json(const char *json, struct DmcmTrainer **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `trainer` must come from this library and not be used afterwards.
 */
void dmcm_trainer_free(struct DmcmTrainer *trainer);

/**
 * One meta-update. `loss_out`, when not null, receives the pre-update outer loss.
 *
 * # Safety
 * `trainer` must be a live handle; `loss_out` null or writable.
 */
enum DmcmStatus dmcm_trainer_step(struct DmcmTrainer *trainer, double *loss_out);

/**
 * Meta-updates applied so far; 0 for a null handle.
 *
 * # Safety
 * `trainer` must be null or a live handle.
 */
uint64_t dmcm_trainer_meta_steps(const struct DmcmTrainer *trainer);

/**
 * Order-sensitive checksum of every parameter's bit pattern.
 *
 * # Safety
 * `trainer` must be null or a live handle.
 */
uint64_t dmcm_trainer_checksum(const struct DmcmTrainer *trainer);

/**
 * Mean adapted MSE and its 95% half-width over `tasks` tasks drawn from the
 * full factor ranges with `seed`, each scored on `test_points` query points.
 *
 * # Safety
 * `trainer` must be a live handle; `mean_out` and `ci_out` writable.
 */
enum DmcmStatus dmcm_trainer_evaluate(const struct DmcmTrainer *trainer,
                                      size_t tasks,
                                      size_t test_points,
                                      uint64_t seed,
                                      double *mean_out,
                                      double *ci_out);

/**
 * Adapts to the support points `(xs, ys)` and writes predictions for the
 * `m` query inputs `qx` into `out`. The trainer itself is not modified.
 *
 * # Safety
 * `xs`, `ys` must hold `n` values, `qx` and `out` `m` values.
 */
enum DmcmStatus dmcm_trainer_adapt_predict(const struct DmcmTrainer *trainer,
                                           const double *xs,
                                           const double *ys,
                                           size_t n,
                                           const double *qx,
                                           size_t m,
                                           double *out);

/**
 * Serializes the full training state. Free the string with [`dmcm_string_free`].
 *
 * # Safety
 * `trainer` must be a live handle and `out` writable.
 */
enum DmcmStatus dmcm_trainer_to_json(const struct DmcmTrainer *trainer, char **out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void dmcm_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DMCM_H */
