#ifndef LORASA_H
#define LORASA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LorasaStatus {
  LORASA_STATUS_OK = 0,
  LORASA_STATUS_NULL_POINTER = 1,
  LORASA_STATUS_INVALID_ARGUMENT = 2,
  LORASA_STATUS_IO = 3,
  LORASA_STATUS_INTEGRITY = 4,
  LORASA_STATUS_SHAPE = 5,
  LORASA_STATUS_PANIC = 6,
} LorasaStatus;

// A loaded policy plus per-agent recurrent state.
typedef struct LorasaPolicy LorasaPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread; empty if none. Valid
// until the next failing call on the same thread.
const char *lorasa_last_error(void);

// Library version as a static NUL-terminated string.
const char *lorasa_version(void);

// Loads an exported policy file. On success `*out` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum LorasaStatus lorasa_policy_load(const char *path, struct LorasaPolicy **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `policy` must come from `lorasa_policy_load` and not be used afterwards.
void lorasa_policy_free(struct LorasaPolicy *policy);

// Clears every agent's recurrent state and reseeds stochastic sampling.
//
// # Safety
// `policy` must be a live handle.
enum LorasaStatus lorasa_policy_reset(struct LorasaPolicy *policy, uint64_t seed);

// # Safety
// `policy` must be a live handle; `out` writable.
enum LorasaStatus lorasa_policy_n_agents(const struct LorasaPolicy *policy, size_t *out);

// Observation length expected by `lorasa_policy_act` (agent id excluded).
//
// # Safety
// `policy` must be a live handle; `out` writable.
enum LorasaStatus lorasa_policy_obs_dim(const struct LorasaPolicy *policy, size_t *out);

// Number of values `lorasa_policy_act` writes: 1 for discrete actions,
// the action dimension for continuous ones.
//
// # Safety
// `policy` must be a live handle; `out` writable.
enum LorasaStatus lorasa_policy_action_len(const struct LorasaPolicy *policy, size_t *out);

// 1 when actions are continuous, 0 when discrete.
//
// # Safety
// `policy` must be a live handle; `out` writable.
enum LorasaStatus lorasa_policy_is_continuous(const struct LorasaPolicy *policy, int *out);

// Parameter count of one agent's merged network.
//
// # Safety
// `policy` must be a live handle; `out` writable.
enum LorasaStatus lorasa_policy_param_count(const struct LorasaPolicy *policy,
                                            size_t agent,
                                            size_t *out);

// Advances `agent`'s recurrent state by one observation and writes its
// action: the action index (as a double) for discrete policies, the squashed
// action vector for continuous ones. `deterministic` non-zero takes the
// mode; otherwise the action is sampled.
//
// # Safety
// `policy` must be a live handle; `obs` must point to `obs_len` doubles and
// `action` to `action_len` writable doubles.
enum LorasaStatus lorasa_policy_act(struct LorasaPolicy *policy,
                                    size_t agent,
                                    const double *obs,
                                    size_t obs_len,
                                    int deterministic,
                                    double *action,
                                    size_t action_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LORASA_H */
