#ifndef MMRL_H
#define MMRL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes shared by every entry point.
typedef enum MmrlStatus {
  MMRL_STATUS_OK = 0,
  MMRL_STATUS_NULL_POINTER = 1,
  MMRL_STATUS_INVALID_ARGUMENT = 2,
  MMRL_STATUS_CONFIG = 3,
  MMRL_STATUS_DEGENERATE = 4,
  MMRL_STATUS_FORMAT = 5,
  MMRL_STATUS_IO = 6,
  MMRL_STATUS_BUFFER_TOO_SMALL = 7,
  MMRL_STATUS_INTERNAL = 8,
} MmrlStatus;

// A loaded checkpoint.
typedef struct MmrlCheckpoint MmrlCheckpoint;

// A simulator instance.
typedef struct MmrlEnv MmrlEnv;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *mmrl_last_error(void);

// Library version as a static NUL-terminated string.
const char *mmrl_version(void);

// W₂ distance between two diagonal Gaussians of dimension `dim`.
//
// # Safety
// Each input must point to `dim` readable doubles; `out` must be writable.
enum MmrlStatus mmrl_w2_bures_diag(const double *mean_a,
                                   const double *std_a,
                                   const double *mean_b,
                                   const double *std_b,
                                   size_t dim,
                                   double *out);

// Diversity estimate of `behaviors` deviations (row-major,
// `behaviors × action_dim`) at one observation out of `obs_count`.
//
// # Safety
// `devs` must point to `behaviors * action_dim` doubles; `out` must be writable.
enum MmrlStatus mmrl_nmd_hat_deviations(const double *devs,
                                        size_t behaviors,
                                        size_t action_dim,
                                        size_t obs_count,
                                        double *out);

// Gradient of [`mmrl_nmd_hat_deviations`] with respect to deviation `m`,
// written to `grad_out` (`action_dim` doubles).
//
// # Safety
// `devs` must point to `behaviors * action_dim` doubles and `grad_out` to
// `action_dim` writable doubles.
enum MmrlStatus mmrl_nmd_grad(const double *devs,
                              size_t behaviors,
                              size_t action_dim,
                              size_t obs_count,
                              size_t m,
                              double *grad_out);

// Diversity scalar `min(nmd_des / max(measured, floor), cap)`.
//
// # Safety
// `out` must be writable.
enum MmrlStatus mmrl_compute_alpha(double nmd_des,
                                   double measured,
                                   double floor,
                                   double cap,
                                   double *out);

// Creates an environment for `task` (`dispersion`, `pressure_plate` or
// `wind_flocking`) with its default layout, reset with `seed`.
//
// # Safety
// `task` must be a NUL-terminated string; `out` must be writable.
enum MmrlStatus mmrl_env_new(const char *task, uint64_t seed, struct MmrlEnv **out);

// # Safety
// `env` must come from [`mmrl_env_new`] and not be used afterwards; null is ignored.
void mmrl_env_free(struct MmrlEnv *env);

// # Safety
// `env` must be a live handle.
enum MmrlStatus mmrl_env_reset(struct MmrlEnv *env, uint64_t seed);

// Observation width per agent and the current number of live agents.
//
// # Safety
// `env` must be a live handle; the out pointers must be writable.
enum MmrlStatus mmrl_env_dims(const struct MmrlEnv *env, size_t *obs_width, size_t *live_agents);

// Writes the live agents' observations row-major into `out`
// (`live_agents × obs_width` doubles, capacity `cap`).
//
// # Safety
// `env` must be a live handle and `out` must hold `cap` doubles.
enum MmrlStatus mmrl_env_observe(const struct MmrlEnv *env, double *out, size_t cap);

// Advances one step with `actions` (`live_agents × 2` doubles in [-1, 1]).
// `event_kind` receives 0 for no event, then AgentRemoved,
// CapabilityChanged, DiversityTargetChanged, EnvSignal as 1..=4.
//
// # Safety
// `env` must be a live handle; `actions` must hold `live_agents * 2` doubles;
// the out pointers must be writable.
enum MmrlStatus mmrl_env_step(struct MmrlEnv *env,
                              const double *actions,
                              size_t live_agents,
                              double *reward,
                              bool *done,
                              uint32_t *event_kind);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MmrlStatus mmrl_checkpoint_load(const char *path, struct MmrlCheckpoint **out);

// # Safety
// `ck` must be a live handle and `path` a NUL-terminated string.
enum MmrlStatus mmrl_checkpoint_save(const struct MmrlCheckpoint *ck, const char *path);

// # Safety
// `ck` must come from [`mmrl_checkpoint_load`] and not be used afterwards; null is ignored.
void mmrl_checkpoint_free(struct MmrlCheckpoint *ck);

// Copies the metadata JSON (NUL-terminated) into `buf`. `needed` always
// receives the required size including the terminator.
//
// # Safety
// `ck` must be a live handle; `buf` must hold `cap` bytes (may be null when
// `cap` is 0); `needed` must be writable.
enum MmrlStatus mmrl_checkpoint_meta_json(const struct MmrlCheckpoint *ck,
                                          char *buf,
                                          size_t cap,
                                          size_t *needed);

// Number of named arrays in the checkpoint.
//
// # Safety
// `ck` must be a live handle and `out` writable.
enum MmrlStatus mmrl_checkpoint_array_count(const struct MmrlCheckpoint *ck, size_t *out);

// Deterministic evaluation of `episodes` episodes at diversity target
// `nmd_des` (negative selects the default target).
//
// # Safety
// `ck` must be a live handle; the out pointers must be writable.
enum MmrlStatus mmrl_checkpoint_evaluate(const struct MmrlCheckpoint *ck,
                                         size_t episodes,
                                         uint64_t seed,
                                         double nmd_des,
                                         double *completion_rate,
                                         double *mean_reward);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMRL_H */
