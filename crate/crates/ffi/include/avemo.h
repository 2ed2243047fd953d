#ifndef AVEMO_H
#define AVEMO_H

#pragma once

#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum AvemoStatus {
  AVEMO_STATUS_OK = 0,
  AVEMO_STATUS_NULL_ARGUMENT = 1,
  AVEMO_STATUS_INVALID_UTF8 = 2,
  AVEMO_STATUS_CONFIG = 3,
  AVEMO_STATUS_CHECKPOINT = 4,
  AVEMO_STATUS_INVALID_MEDIA = 5,
  AVEMO_STATUS_UNKNOWN_SESSION = 6,
  AVEMO_STATUS_NOT_READY = 7,
  AVEMO_STATUS_TURN_TOO_LARGE = 8,
  AVEMO_STATUS_TIMEOUT = 9,
  AVEMO_STATUS_INTERNAL = 10,
  AVEMO_STATUS_PANIC = 11,
} AvemoStatus;

// Which metric [`avemo_metric`] computes.
typedef enum AvemoMetric {
  AVEMO_METRIC_BLEU1 = 0,
  AVEMO_METRIC_BLEU2 = 1,
  AVEMO_METRIC_BLEU3 = 2,
  AVEMO_METRIC_BLEU4 = 3,
  AVEMO_METRIC_ROUGE_L = 4,
  AVEMO_METRIC_METEOR = 5,
} AvemoMetric;

// Opaque engine: one loaded checkpoint and its sessions.
typedef struct AvemoEngine AvemoEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the next call.
const char *avemo_last_error(void);

// Library version as a static string.
const char *avemo_version(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void avemo_string_free(char *s);

// Loads a checkpoint directory. `config_json` holds service settings and may be null for
// defaults.
//
// # Safety
// Pointer arguments must be valid; `out` receives a handle for [`avemo_engine_free`].
enum AvemoStatus avemo_engine_open(const char *checkpoint_dir,
                                   const char *config_json,
                                   struct AvemoEngine **out);

// Releases an engine and all of its sessions. Null is ignored.
//
// # Safety
// `engine` must come from [`avemo_engine_open`] and no other thread may still use it.
void avemo_engine_free(struct AvemoEngine *engine);

// Health record as JSON: status and the checkpoint and prompt-set hashes.
//
// # Safety
// Pointer arguments must be valid.
enum AvemoStatus avemo_engine_health(const struct AvemoEngine *engine, char **out_json);

// Opens a session. `options_json` may be null for greedy decoding.
//
// # Safety
// Pointer arguments must be valid; the id in `out_id` is freed with [`avemo_string_free`].
enum AvemoStatus avemo_session_create(const struct AvemoEngine *engine,
                                      const char *options_json,
                                      char **out_id);

// # Safety
// Pointer arguments must be valid.
enum AvemoStatus avemo_session_delete(const struct AvemoEngine *engine, const char *session_id);

// Runs one turn. `wav` is 16-bit PCM WAV; `frames_tar` is a tar of PNG frames and may be
// null for audio only; `transcript` may be null. On success `out_json` holds the reply
// (emotion, text, round index, warnings). On failure the session is unchanged.
//
// # Safety
// Buffers must be readable for the given lengths; other pointers must be valid.
enum AvemoStatus avemo_session_post_turn(const struct AvemoEngine *engine,
                                         const char *session_id,
                                         const uint8_t *wav,
                                         size_t wav_len,
                                         const uint8_t *frames_tar,
                                         size_t frames_tar_len,
                                         const char *transcript,
                                         char **out_json);

// Session history as JSON.
//
// # Safety
// Pointer arguments must be valid.
enum AvemoStatus avemo_session_transcript(const struct AvemoEngine *engine,
                                          const char *session_id,
                                          char **out_json);

// Number of newest rounds kept under the context budget. The last entry of `round_tokens`
// is the current round.
//
// # Safety
// `round_tokens` must be readable for `n` entries.
enum AvemoStatus avemo_truncate_history(const size_t *round_tokens,
                                        size_t n,
                                        size_t overhead,
                                        size_t reserve,
                                        size_t limit,
                                        size_t *out_kept);

// Scores one candidate against one reference after the shared metric tokenization.
//
// # Safety
// Pointer arguments must be valid.
enum AvemoStatus avemo_metric(enum AvemoMetric metric,
                              const char *candidate,
                              const char *reference,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AVEMO_H */
