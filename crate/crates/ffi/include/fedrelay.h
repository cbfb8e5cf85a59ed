#ifndef FEDRELAY_H
#define FEDRELAY_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FrStatus {
  FR_STATUS_OK = 0,
  FR_STATUS_NULL_ARGUMENT = 1,
  FR_STATUS_INVALID_UTF8 = 2,
  /**
   * Config or envelope JSON failed to parse or validate.
   */
  FR_STATUS_INVALID_CONFIG = 3,
  FR_STATUS_TRUNCATED = 4,
  FR_STATUS_MALFORMED = 5,
  FR_STATUS_FRAME_TOO_LARGE = 6,
  FR_STATUS_INVALID_ENVELOPE = 7,
  /**
   * The control plane refused a submission.
   */
  FR_STATUS_REJECTED = 8,
  FR_STATUS_NOT_FOUND = 9,
  /**
   * A run stopped before every job or round completed.
   */
  FR_STATUS_INCOMPLETE = 10,
  FR_STATUS_IO = 11,
  FR_STATUS_PANIC = 12,
} FrStatus;

/**
 * Opaque simulator handle.
 */
typedef struct FrSim FrSim;

/**
 * Owned byte buffer returned across the boundary.
 */
typedef struct FrBuffer {
  uint8_t *data;
  uintptr_t len;
} FrBuffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * The last error recorded on this thread, or null. The pointer stays valid
 * until the next call into this library on the same thread.
 */
const char *fr_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void fr_string_free(char *s);

/**
 * Releases a buffer returned by this library.
 *
 * # Safety
 * `buf` must come from this library and not have been freed.
 */
void fr_buffer_free(struct FrBuffer buf);

/**
 * Builds a frame from an envelope body in JSON form. The body is checked
 * exactly as the decoder would check it, and the frame carries the
 * canonical encoding.
 *
 * # Safety
 * `body_json` must be a NUL-terminated string; `out` must be writable.
 */
enum FrStatus fr_frame_encode(const char *body_json, struct FrBuffer *out);

/**
 * Decodes one frame and returns its canonical JSON body.
 *
 * # Safety
 * `frame` must point to `len` readable bytes; `out_json` must be writable.
 */
enum FrStatus fr_frame_decode(const uint8_t *frame, uintptr_t len, char **out_json);

/**
 * Runs an app with every node calling the link in-process and returns
 * `history.json`.
 *
 * # Safety
 * `app_json` must be a NUL-terminated string; `out_history` must be writable.
 */
enum FrStatus fr_direct_run(const char *app_json, char **out_history);

/**
 * Creates a simulator for `scenario_json`. When `runs_dir` is non-null,
 * run artifacts are written below it.
 *
 * # Safety
 * String arguments must be NUL-terminated or (for `runs_dir`) null;
 * `out` must be writable.
 */
enum FrStatus fr_sim_new(const char *scenario_json, const char *runs_dir, struct FrSim **out);

/**
 * Releases a simulator. Null is ignored.
 *
 * # Safety
 * `sim` must come from [`fr_sim_new`] and not have been freed.
 */
void fr_sim_free(struct FrSim *sim);

/**
 * Queues a job. `app_json` may be null when the job needs no guest app.
 * The control plane accepts or refuses it once the simulator runs.
 *
 * # Safety
 * `sim` must be a live handle; strings must be NUL-terminated or null.
 */
enum FrStatus fr_sim_submit(struct FrSim *sim, const char *job_json, const char *app_json);

/**
 * Runs until every accepted job is terminal or the scenario horizon is
 * reached, then writes each job's artifacts. Returns `Rejected` if any
 * queued submission was refused; the accepted ones still run.
 *
 * # Safety
 * `sim` must be a live handle.
 */
enum FrStatus fr_sim_run(struct FrSim *sim);

/**
 * Submits one job and runs it to a terminal state. Writes the final
 * status as JSON.
 *
 * # Safety
 * `sim` must be a live handle; strings must be NUL-terminated or (for
 * `app_json`) null; `out_status` must be writable.
 */
enum FrStatus fr_sim_run_job(struct FrSim *sim,
                             const char *job_json,
                             const char *app_json,
                             char **out_status);

/**
 * Current status of `job_id` as JSON.
 *
 * # Safety
 * `sim` must be a live handle; `job_id` NUL-terminated; `out_status`
 * writable.
 */
enum FrStatus fr_sim_status_json(struct FrSim *sim, const char *job_id, char **out_status);

/**
 * Simulated time in milliseconds.
 *
 * # Safety
 * `sim` must be a live handle or null (which yields 0).
 */
uint64_t fr_sim_now(const struct FrSim *sim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDRELAY_H */
