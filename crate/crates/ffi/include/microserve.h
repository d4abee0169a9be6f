/* SPDX-License-Identifier: Apache-2.0 */

#ifndef MICROSERVE_H
#define MICROSERVE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum MsStatus {
  MS_STATUS_OK = 0,
  MS_STATUS_NULL_POINTER = 1,
  MS_STATUS_INVALID_UTF8 = 2,
  MS_STATUS_INVALID_JSON = 3,
  MS_STATUS_BUFFER_TOO_SMALL = 4,
  MS_STATUS_OUT_OF_PAGES = 10,
  MS_STATUS_MISSING_KV = 11,
  MS_STATUS_ADDR_MISMATCH = 12,
  MS_STATUS_PEER_UNREACHABLE = 13,
  MS_STATUS_BAD_REQUEST = 14,
  MS_STATUS_DUPLICATE_REQUEST = 15,
  MS_STATUS_UNKNOWN_REQUEST = 16,
  MS_STATUS_TRANSFER_FAILED = 17,
  MS_STATUS_ABORTED = 18,
  MS_STATUS_INTERNAL = 19,
  MS_STATUS_PANIC = 99,
} MsStatus;

/**
 * Opaque engine handle.
 */
typedef struct MsEngine MsEngine;

/**
 * Summary of one engine step.
 */
typedef struct MsStepReport {
  double start_ms;
  double end_ms;
  double layer_ms;
  size_t prefill_tokens;
  size_t decode_seqs;
} MsStepReport;

/**
 * One generated token. `finished` is set on the last event of a stream;
 * `status` is nonzero when the stream ended with an error.
 */
typedef struct MsTokenEvent {
  uint64_t request_id;
  size_t index;
  uint32_t token;
  double t_ms;
  bool finished;
  bool aborted;
  enum MsStatus status;
} MsTokenEvent;

/**
 * Completion of a `remote_send`.
 */
typedef struct MsSendDone {
  uint64_t request_id;
  double t_ms;
  enum MsStatus status;
} MsSendDone;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ms_version(void);

/**
 * Copies the last error message of this thread, or returns NULL when the
 * last call succeeded. Free the result with [`ms_string_free`].
 */
char *ms_last_error_message(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` is NULL or a string returned by this library that was not yet freed.
 */
void ms_string_free(char *s);

/**
 * Creates an engine from a JSON [`EngineConfig`]; missing fields take
 * their defaults, so `"{}"` is valid. Writes the handle to `*out`.
 *
 * # Safety
 * `config_json` is a NUL-terminated string and `out` is writable.
 */
enum MsStatus ms_engine_new(const char *config_json, struct MsEngine **out);

/**
 * Destroys an engine. Passing NULL is a no-op.
 *
 * # Safety
 * `e` is NULL or a handle from [`ms_engine_new`] that was not yet freed.
 */
void ms_engine_free(struct MsEngine *e);

/**
 * Reserves receive slots. `request_json` is a `prep_recv` request and the
 * response JSON (with `kv_addr_info`) is written to `*response_json`.
 *
 * # Safety
 * `e` is a live handle, `request_json` a NUL-terminated string and
 * `response_json` writable.
 */
enum MsStatus ms_engine_prep_recv(struct MsEngine *e,
                                  const char *request_json,
                                  double now_ms,
                                  char **response_json);

/**
 * Queues a `remote_send`. Its completion is reported by
 * [`ms_engine_poll_sends`] once every layer write was delivered with
 * [`ms_engine_deliver`].
 *
 * # Safety
 * `e` is a live handle, `request_json` a NUL-terminated string and
 * `request_id` NULL or writable.
 */
enum MsStatus ms_engine_remote_send(struct MsEngine *e,
                                    const char *request_json,
                                    double now_ms,
                                    uint64_t *request_id);

/**
 * Starts a generation over `prompt[0..len]`. `begin` is 0 to prefill from
 * the local cache, or -1 when the prompt KV was received with
 * `prep_recv`. `request_id` is an input when `*request_id` is nonzero and
 * receives the assigned id.
 *
 * # Safety
 * `e` is a live handle, `prompt` valid for `len` reads and `request_id`
 * NULL or readable and writable.
 */
enum MsStatus ms_engine_start_generate(struct MsEngine *e,
                                       const uint32_t *prompt,
                                       size_t len,
                                       int64_t begin,
                                       size_t max_tokens,
                                       double now_ms,
                                       uint64_t *request_id);

/**
 * Runs one batch step at `now_ms`. Sets `*stepped` to false when the
 * engine had nothing to do; otherwise fills `*report`.
 *
 * # Safety
 * `e` is a live handle; `report` and `stepped` are writable.
 */
enum MsStatus ms_engine_step(struct MsEngine *e,
                             double now_ms,
                             struct MsStepReport *report,
                             bool *stepped);

/**
 * True when queued or running work remains.
 *
 * # Safety
 * `e` is NULL or a live handle.
 */
bool ms_engine_has_work(const struct MsEngine *e);

/**
 * Moves up to `cap` buffered token events into `buf` and returns how many
 * were written.
 *
 * # Safety
 * `e` is a live handle and `buf` valid for `cap` writes.
 */
size_t ms_engine_poll_tokens(struct MsEngine *e, struct MsTokenEvent *buf, size_t cap);

/**
 * Moves up to `cap` send completions into `buf` and returns how many were
 * written.
 *
 * # Safety
 * `e` is a live handle and `buf` valid for `cap` writes.
 */
size_t ms_engine_poll_sends(struct MsEngine *e, struct MsSendDone *buf, size_t cap);

/**
 * Delivers every layer write of `from` whose KV is ready by `now_ms` into
 * `to`, acknowledges it on `from` and returns the number delivered in
 * `*delivered`. Writes that are not ready yet stay queued.
 *
 * # Safety
 * `from` and `to` are distinct live handles; `delivered` is NULL or
 * writable.
 */
enum MsStatus ms_engine_deliver(struct MsEngine *from,
                                struct MsEngine *to,
                                double now_ms,
                                size_t *delivered);

/**
 * Drops a request and releases its slots. Returns true if it existed.
 *
 * # Safety
 * `e` is NULL or a live handle.
 */
bool ms_engine_cancel(struct MsEngine *e, uint64_t request_id);

/**
 * Writes the engine's statistics as JSON to `*stats_json`.
 *
 * # Safety
 * `e` is a live handle and `stats_json` writable.
 */
enum MsStatus ms_engine_stats(struct MsEngine *e, double now_ms, char **stats_json);

/**
 * Reference output of the model described by `model_json` for a prompt:
 * writes `max_tokens` tokens to `out`.
 *
 * # Safety
 * `model_json` is a NUL-terminated string, `prompt` valid for `len` reads
 * and `out` valid for `cap` writes.
 */
enum MsStatus ms_reference_generate(const char *model_json,
                                    const uint32_t *prompt,
                                    size_t len,
                                    size_t max_tokens,
                                    uint32_t *out,
                                    size_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MICROSERVE_H */
