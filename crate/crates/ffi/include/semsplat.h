#ifndef SEMSPLAT_H
#define SEMSPLAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes. Values 1 to 5 match the CLI exit codes.
typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_INVALID_INPUT = 1,
  SS_STATUS_CONFIG = 2,
  SS_STATUS_FORMAT = 3,
  SS_STATUS_NUMERIC = 4,
  SS_STATUS_ACCEPTANCE = 5,
  SS_STATUS_NULL_POINTER = 6,
  SS_STATUS_PANIC = 7,
} SsStatus;

// A trained feed-forward model.
typedef struct SsModel SsModel;

// A gaussian scene, with its class table when it came from a scene file.
typedef struct SsScene SsScene;

// Pinhole camera. `rotation` is a unit quaternion (w, x, y, z) and together
// with `translation` maps camera coordinates to world coordinates.
typedef struct SsCamera {
  double fx;
  double fy;
  double cx;
  double cy;
  double rotation[4];
  double translation[3];
  uint32_t width;
  uint32_t height;
} SsCamera;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ss_version(void);

// Copy the calling thread's last error message into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length without the NUL.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t ss_last_error(char *buf, size_t len);

// Load a scene file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SsStatus ss_scene_load(const char *path, struct SsScene **out);

// Write a scene loaded from a file back out. Predicted scenes carry no
// class table and cannot be saved.
//
// # Safety
// `scene` must come from this library; `path` must be NUL-terminated.
enum SsStatus ss_scene_save(const struct SsScene *scene, const char *path);

// # Safety
// `scene` must be null or come from this library, and not be used afterwards.
void ss_scene_free(struct SsScene *scene);

// Number of gaussians; 0 for a null handle.
//
// # Safety
// `scene` must be null or come from this library.
size_t ss_scene_len(const struct SsScene *scene);

// Semantic feature channels; 0 for a null handle.
//
// # Safety
// `scene` must be null or come from this library.
size_t ss_scene_feature_dim(const struct SsScene *scene);

// Read a `.cam` file.
//
// # Safety
// `path` must be NUL-terminated and `out` valid.
enum SsStatus ss_camera_load(const char *path, struct SsCamera *out);

// Render `scene` at `camera` over `background` (3 doubles).
//
// `rgb` receives width·height·3 values. `feature` (width·height·feature_dim),
// `depth` (width·height) and `labels` (width·height class ids, −1 for
// background) are optional and skipped when null. Labels need a scene
// loaded from a file.
//
// # Safety
// Pointers must be valid for the stated lengths.
enum SsStatus ss_render(const struct SsScene *scene,
                        const struct SsCamera *camera,
                        const double *background,
                        double *rgb,
                        size_t rgb_len,
                        double *feature,
                        size_t feature_len,
                        double *depth,
                        size_t depth_len,
                        int32_t *labels,
                        size_t labels_len);

// Load a model checkpoint.
//
// # Safety
// `path` must be NUL-terminated and `out` valid.
enum SsStatus ss_model_load(const char *path, struct SsModel **out);

// Save a model checkpoint.
//
// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum SsStatus ss_model_save(const struct SsModel *model, const char *path);

// # Safety
// `model` must be null or come from this library, and not be used afterwards.
void ss_model_free(struct SsModel *model);

// Input image size the model was built for.
//
// # Safety
// All pointers must be valid.
enum SsStatus ss_model_image_size(const struct SsModel *model, uint32_t *width, uint32_t *height);

// Reconstruct gaussians from two RGB views of width·height·3 values each.
// The scene lives in the first camera's frame. `pose` (7 doubles, may be
// null) receives the second camera's pose as w, x, y, z, tx, ty, tz.
//
// # Safety
// Image pointers must hold `len` doubles; `out` must be valid.
enum SsStatus ss_model_infer(const struct SsModel *model,
                             const double *image0,
                             const double *image1,
                             size_t len,
                             struct SsScene **out,
                             double *pose);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEMSPLAT_H */
