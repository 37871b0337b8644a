#ifndef STORYREEL_H
#define STORYREEL_H

/* This file is generated by cbindgen from storyreel-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes for every fallible entry point.
 */
typedef enum StoryreelStatus {
  STORYREEL_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  STORYREEL_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  STORYREEL_STATUS_INVALID_UTF8 = 2,
  /**
   * Malformed input: bad JSON, bad dimensions, invalid configuration.
   */
  STORYREEL_STATUS_INVALID_ARGUMENT = 3,
  /**
   * A referenced entity (video id, clip span, file) does not exist.
   */
  STORYREEL_STATUS_NOT_FOUND = 4,
  /**
   * An ingest conflicted with existing content.
   */
  STORYREEL_STATUS_CONFLICT = 5,
  /**
   * Filesystem or encoding failure.
   */
  STORYREEL_STATUS_IO = 6,
  /**
   * A numeric failure (degenerate input, non-finite value).
   */
  STORYREEL_STATUS_NUMERIC = 7,
  /**
   * A panic or other internal error.
   */
  STORYREEL_STATUS_INTERNAL = 8,
} StoryreelStatus;

/**
 * Opaque handle to a loaded feature store.
 */
typedef struct StoryreelStore StoryreelStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread; never free it.
 */
const char *storyreel_last_error_message(void);

/**
 * Crate version as a static NUL-terminated string; never free it.
 */
const char *storyreel_version(void);

/**
 * Release a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must be a pointer previously returned by a `_json` output parameter
 * of this library, not yet freed.
 */
void storyreel_string_free(char *s);

/**
 * Open the feature store at `path` and return a handle through `out`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum StoryreelStatus storyreel_store_open(const char *path, struct StoryreelStore **out);

/**
 * Release a store handle. Null is a no-op.
 *
 * # Safety
 * `store` must have been returned by [`storyreel_store_open`] and not yet
 * freed.
 */
void storyreel_store_free(struct StoryreelStore *store);

/**
 * Number of videos in the store.
 *
 * # Safety
 * `store` must be a live handle and `out` a valid pointer.
 */
enum StoryreelStatus storyreel_store_video_count(const struct StoryreelStore *store, size_t *out);

/**
 * Feature dimension of the store; 0 when the store is empty.
 *
 * # Safety
 * `store` must be a live handle and `out` a valid pointer.
 */
enum StoryreelStatus storyreel_store_feature_dim(const struct StoryreelStore *store, size_t *out);

/**
 * Retrieve the top-k moments per query.
 *
 * `queries_json` is a JSON array of query strings. `joint_dim` selects the
 * joint embedding dimension (pass 0 for the default). The ranked results
 * are returned as JSON through `out_json` (caller frees).
 *
 * # Safety
 * Pointer arguments must be valid; `out_json` receives an owned string.
 */
enum StoryreelStatus storyreel_ground_json(const struct StoryreelStore *store,
                                           const char *queries_json,
                                           size_t top_k,
                                           size_t joint_dim,
                                           char **out_json);

/**
 * Run the full pipeline from a storyboard config file, writing frames and
 * the manifest into `out_dir`. When `out_manifest_json` is non-null it
 * receives the manifest as JSON (caller frees).
 *
 * # Safety
 * `config_path` and `out_dir` must be valid NUL-terminated strings;
 * `out_manifest_json` may be null.
 */
enum StoryreelStatus storyreel_generate(const char *config_path,
                                        const char *out_dir,
                                        char **out_manifest_json);

/**
 * Temporal flickering score of a frame directory, in [0, 100].
 *
 * # Safety
 * `frames_dir` must be a valid NUL-terminated string and `out_score` a
 * valid pointer.
 */
enum StoryreelStatus storyreel_temporal_flickering(const char *frames_dir, double *out_score);

/**
 * Score a frame directory with the built-in metric plus plugin
 * executables. `plugins_json` is an optional JSON array of plugin paths
 * (null for none). The metric table is returned as JSON via `out_json`
 * (caller frees).
 *
 * # Safety
 * Pointer arguments must be valid; `plugins_json` may be null.
 */
enum StoryreelStatus storyreel_metrics_report_json(const char *frames_dir,
                                                   const char *plugins_json,
                                                   char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STORYREEL_H */
