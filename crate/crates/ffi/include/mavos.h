#ifndef MAVOS_H
#define MAVOS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every fallible entry point.
typedef enum MavosStatus {
  MAVOS_STATUS_OK = 0,
  MAVOS_STATUS_NULL_POINTER = 1,
  MAVOS_STATUS_INVALID_ARGUMENT = 2,
  MAVOS_STATUS_VALIDATION = 3,
  MAVOS_STATUS_CONFIG = 4,
  MAVOS_STATUS_IO = 5,
  MAVOS_STATUS_FORMAT = 6,
  MAVOS_STATUS_NUMERIC = 7,
  MAVOS_STATUS_USAGE = 8,
  MAVOS_STATUS_PANIC = 9,
} MavosStatus;

// Trained or freshly initialized segmenter weights.
typedef struct MavosModel MavosModel;

// Streaming inference state for one video.
typedef struct MavosTracker MavosTracker;

// Memory bank accounting for a tracker.
typedef struct MavosMemoryStats {
  size_t slot_count;
  size_t token_count;
  size_t logical_bytes;
  size_t id_bytes;
  size_t update_count;
} MavosMemoryStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Version string of the library, statically allocated.
const char *mavos_version(void);

// Message for the last failed call on this thread, or an empty string.
//
// The pointer stays valid until the next failing call on the same thread.
const char *mavos_last_error(void);

// Creates a model with random weights.
//
// `config_json` may be null for the default configuration; otherwise it is a
// JSON object with any of `grid`, `stride`, `dim`, `levels`, `blocks`,
// `max_objects` and `decoder_hidden`.
//
// # Safety
// `config_json` is null or a NUL-terminated string; `out` is writable.
enum MavosStatus mavos_model_init(const char *config_json, uint64_t seed, struct MavosModel **out);

// Loads a 64-bit checkpoint written by `mavos train` or [`mavos_model_save`].
//
// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum MavosStatus mavos_model_load(const char *path, struct MavosModel **out);

// # Safety
// `model` is a live handle; `path` is a NUL-terminated string.
enum MavosStatus mavos_model_save(const struct MavosModel *model, const char *path);

// Frame side length in pixels, or 0 for a null handle.
//
// # Safety
// `model` is null or a live handle.
size_t mavos_model_grid(const struct MavosModel *model);

// Largest object count a mask may carry, or 0 for a null handle.
//
// # Safety
// `model` is null or a live handle.
size_t mavos_model_max_objects(const struct MavosModel *model);

// # Safety
// `model` is null or a handle not yet freed.
void mavos_model_free(struct MavosModel *model);

// Creates a tracker that copies the model weights.
//
// `policy` is one of `mca`, `full`, `refprev` or `window:N`; `delta` is the
// memory update period in frames.
//
// # Safety
// `model` is a live handle; `policy` is a NUL-terminated string; `out` is writable.
enum MavosStatus mavos_tracker_new(const struct MavosModel *model,
                                   const char *policy,
                                   size_t delta,
                                   struct MavosTracker **out);

// Starts a video from its first frame and object labels.
//
// `rgb` holds `grid * grid * 3` interleaved bytes in row-major order.
// `labels` holds `grid * grid` bytes: 0 for background, `k` for object `k`,
// with `1 <= k <= objects`.
//
// # Safety
// `tracker` is a live handle; `rgb` and `labels` point to the stated lengths.
enum MavosStatus mavos_tracker_reset(struct MavosTracker *tracker,
                                     const uint8_t *rgb,
                                     size_t rgb_len,
                                     const uint8_t *labels,
                                     size_t labels_len,
                                     size_t objects);

// Segments the next frame and writes one label byte per pixel to `out_labels`.
//
// # Safety
// `tracker` is a live handle; `rgb` points to `rgb_len` bytes and
// `out_labels` to `out_len` writable bytes.
enum MavosStatus mavos_tracker_step(struct MavosTracker *tracker,
                                    const uint8_t *rgb,
                                    size_t rgb_len,
                                    uint8_t *out_labels,
                                    size_t out_len);

// # Safety
// `tracker` is a live handle; `out` is writable.
enum MavosStatus mavos_tracker_memory_stats(const struct MavosTracker *tracker,
                                            struct MavosMemoryStats *out);

// # Safety
// `tracker` is null or a handle not yet freed.
void mavos_tracker_free(struct MavosTracker *tracker);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAVOS_H */
