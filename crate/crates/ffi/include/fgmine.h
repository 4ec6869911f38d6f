#ifndef FGMINE_H
#define FGMINE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum FgmStatus {
  FGM_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  FGM_STATUS_NULL_ARGUMENT = 1,
  /**
   * Bad configuration, argument or index.
   */
  FGM_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Non-finite input or result.
   */
  FGM_STATUS_NUMERIC = 3,
  /**
   * File system, parse or load failure.
   */
  FGM_STATUS_IO = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  FGM_STATUS_INTERNAL = 5,
} FgmStatus;

/**
 * Encoder and scorer parameters.
 */
typedef struct FgmEncoder FgmEncoder;

/**
 * One TPE session over fixed-cardinality frame masks.
 */
typedef struct FgmTpe FgmTpe;

/**
 * A generated world.
 */
typedef struct FgmWorld FgmWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread, or an empty string.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *fgm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fgm_version(void);

/**
 * `-log softmax([s_pos, negs...])[0]`.
 *
 * # Safety
 * `negs` must point to `n_negs` doubles and `out` to one writable double.
 */
enum FgmStatus fgm_pr_loss(double s_pos, const double *negs, size_t n_negs, double *out);

/**
 * Generates a world from `key=value` lines (`world.*` keys; other
 * sections are accepted and ignored). `config` may be null or empty for
 * the defaults.
 *
 * # Safety
 * `config` must be null or a NUL-terminated string; `out` must be writable.
 */
enum FgmStatus fgm_world_new(const char *config, struct FgmWorld **out);

/**
 * # Safety
 * `world` must come from [`fgm_world_new`] and not be used afterwards.
 */
void fgm_world_free(struct FgmWorld *world);

/**
 * Frame feature dimension of a world.
 *
 * # Safety
 * `world` must be a live handle and `out` writable.
 */
enum FgmStatus fgm_world_frame_dim(const struct FgmWorld *world, size_t *out);

/**
 * Vocabulary size of a world.
 *
 * # Safety
 * `world` must be a live handle and `out` writable.
 */
enum FgmStatus fgm_world_vocab_size(const struct FgmWorld *world, size_t *out);

/**
 * Loads encoder parameters from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FgmStatus fgm_encoder_load(const char *path, struct FgmEncoder **out);

/**
 * Freshly initialized encoder for a world, with the default layer sizes.
 *
 * # Safety
 * `world` must be a live handle; `out` must be writable.
 */
enum FgmStatus fgm_encoder_init(const struct FgmWorld *world,
                                uint64_t seed,
                                struct FgmEncoder **out);

/**
 * # Safety
 * `encoder` must come from an `fgm_encoder_*` constructor and not be used
 * afterwards.
 */
void fgm_encoder_free(struct FgmEncoder *encoder);

/**
 * Compatibility score of one trajectory and one instruction.
 *
 * `frames` holds `n_frames * frame_dim` doubles, frame-major; `tokens`
 * holds `n_tokens` token ids.
 *
 * # Safety
 * Pointers must be valid for the given lengths; `out` must be writable.
 */
enum FgmStatus fgm_encoder_score(const struct FgmEncoder *encoder,
                                 const double *frames,
                                 size_t n_frames,
                                 size_t frame_dim,
                                 const uint32_t *tokens,
                                 size_t n_tokens,
                                 double *out);

/**
 * Opens a TPE session over masks of `n_rep` positions out of `traj_len`,
 * with `n_startup` uniform proposals before the density model is used.
 *
 * # Safety
 * `out` must be writable.
 */
enum FgmStatus fgm_tpe_new(size_t traj_len,
                           size_t n_rep,
                           size_t n_startup,
                           uint64_t seed,
                           struct FgmTpe **out);

/**
 * # Safety
 * `session` must come from [`fgm_tpe_new`] and not be used afterwards.
 */
void fgm_tpe_free(struct FgmTpe *session);

/**
 * Writes the next proposal's `n_rep` sorted frame positions to `indices`.
 *
 * # Safety
 * `session` must be live; `indices` must hold `capacity` writable slots.
 */
enum FgmStatus fgm_tpe_propose(struct FgmTpe *session, size_t *indices, size_t capacity);

/**
 * Records the objective of a mask given as `n` frame positions.
 *
 * # Safety
 * `session` must be live; `indices` must point to `n` values.
 */
enum FgmStatus fgm_tpe_observe(struct FgmTpe *session,
                               const size_t *indices,
                               size_t n,
                               double objective);

/**
 * Number of observed trials and the best objective so far (NaN when no
 * trial has been observed).
 *
 * # Safety
 * `session` must be live; `n_trials` and `best` must be writable.
 */
enum FgmStatus fgm_tpe_best(const struct FgmTpe *session, size_t *n_trials, double *best);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FGMINE_H */
