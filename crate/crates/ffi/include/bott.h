#ifndef BOTT_H
#define BOTT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Written for detections not published under a track.
#define BOTT_NO_TRACK UINT64_MAX

// Result code of every fallible call.
typedef enum BottStatus {
  BOTT_STATUS_OK = 0,
  BOTT_STATUS_NULL_POINTER = 1,
  BOTT_STATUS_INVALID_ARGUMENT = 2,
  BOTT_STATUS_IO = 3,
  BOTT_STATUS_DATA = 4,
  BOTT_STATUS_PANIC = 5,
} BottStatus;

// A loaded model.
typedef struct BottModel BottModel;

// An online tracker. Owns a private copy of its model.
typedef struct BottTracker BottTracker;

// One detection as seen from C. `class_id` indexes the model's classes and
// `score` becomes that class's score; velocity is used only when
// `has_velocity` is set.
typedef struct BottBox {
  int64_t frame_idx;
  double t;
  double x;
  double y;
  double z;
  double w;
  double l;
  double h;
  double yaw;
  uint32_t class_id;
  double score;
  double vx;
  double vy;
  bool has_velocity;
} BottBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *bott_version(void);

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *bott_last_error(void);

// Loads a checkpoint (and its JSON sidecar) into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum BottStatus bott_model_load(const char *path, struct BottModel **out);

// Number of classes the model was trained on; 0 for a null model.
//
// # Safety
// `model` must be null or come from [`bott_model_load`].
size_t bott_model_num_classes(const struct BottModel *model);

// Linking scores of `n` boxes forming one window, written row-major into
// `out_scores` (`n * n` values) in input order. Boxes are grouped into
// frames by `frame_idx`.
//
// # Safety
// `boxes` must point to `n` boxes and `out_scores` to `n * n` doubles.
enum BottStatus bott_model_link_scores(const struct BottModel *model,
                                       const struct BottBox *boxes,
                                       size_t n,
                                       double *out_scores);

// Frees a model. Null is ignored.
//
// # Safety
// `model` must be null or come from [`bott_model_load`], and not be used again.
void bott_model_free(struct BottModel *model);

// Creates an online tracker. With a null `model` the tracker uses the
// nearest-neighbor baseline and `class_names` must list the taxonomy;
// otherwise the model's classes are used and `class_names` is ignored.
// `config_json` optionally holds an online-tracker configuration object.
//
// # Safety
// Pointers must be null or valid; `class_names` must hold `n_classes`
// NUL-terminated strings when used.
enum BottStatus bott_tracker_new(const struct BottModel *model,
                                 const char *const *class_names,
                                 size_t n_classes,
                                 const char *config_json,
                                 struct BottTracker **out);

// Feeds one frame. `out_track_ids[i]` receives the track id published for
// `boxes[i]`, or [`BOTT_NO_TRACK`]. The boxes' own `frame_idx` and `t` are
// replaced by the arguments.
//
// # Safety
// `boxes` must point to `n` boxes and `out_track_ids` to `n` slots.
enum BottStatus bott_tracker_step(struct BottTracker *tracker,
                                  int64_t frame_idx,
                                  double t,
                                  const struct BottBox *boxes,
                                  size_t n,
                                  uint64_t *out_track_ids);

// Number of live tracks; 0 for a null tracker.
//
// # Safety
// `tracker` must be null or come from [`bott_tracker_new`].
size_t bott_tracker_num_tracks(const struct BottTracker *tracker);

// Frees a tracker. Null is ignored.
//
// # Safety
// `tracker` must be null or come from [`bott_tracker_new`], and not be used again.
void bott_tracker_free(struct BottTracker *tracker);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BOTT_H */
