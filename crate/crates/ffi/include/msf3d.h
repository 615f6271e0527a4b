#ifndef MSF3D_H
#define MSF3D_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum Msf3dStatus {
  MSF3D_STATUS_OK = 0,
  MSF3D_STATUS_INPUT_ERROR = 1,
  MSF3D_STATUS_CONTRACT_VIOLATION = 2,
  MSF3D_STATUS_NUMERIC_FAILURE = 3,
  MSF3D_STATUS_NULL_POINTER = 4,
  MSF3D_STATUS_PANIC = 5,
} Msf3dStatus;

/**
 * A trained detector loaded from a checkpoint.
 */
typedef struct Msf3dModel Msf3dModel;

/**
 * One synthetic scene: boxes, camera rig and point cloud.
 */
typedef struct Msf3dScene Msf3dScene;

typedef struct Msf3dBox {
  double center[3];
  /**
   * `(w, l, h)` in meters.
   */
  double size[3];
  double yaw;
  double velocity[2];
  uint32_t class_id;
  double score;
} Msf3dBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or an empty string.
 * Valid until the next call into this library on the same thread.
 */
const char *msf3d_last_error(void);

const char *msf3d_version(void);

/**
 * Loads a checkpoint written by `msf3d train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum Msf3dStatus msf3d_model_load(const char *path, struct Msf3dModel **out);

/**
 * # Safety
 * `model` must come from `msf3d_model_load` and not be used afterwards.
 */
void msf3d_model_free(struct Msf3dModel *model);

/**
 * Number of detections `msf3d_model_detect` produces per scene.
 *
 * # Safety
 * `model` must be a live handle or NULL (which yields 0).
 */
uintptr_t msf3d_model_top_k(const struct Msf3dModel *model);

/**
 * Runs the detector on a scene; boxes are sorted by descending score.
 *
 * # Safety
 * Handles must be live; `out` must hold `capacity` boxes (or be NULL with
 * `capacity == 0`); `written` must be writable.
 */
enum Msf3dStatus msf3d_model_detect(const struct Msf3dModel *model,
                                    const struct Msf3dScene *scene,
                                    struct Msf3dBox *out,
                                    uintptr_t capacity,
                                    uintptr_t *written);

/**
 * Generates the scene for `seed` from the `scene` table of a training
 * config in TOML. `config_toml` may be NULL for the defaults.
 *
 * # Safety
 * `config_toml` must be NULL or NUL-terminated; `out` must be writable.
 */
enum Msf3dStatus msf3d_scene_generate(const char *config_toml,
                                      uint64_t seed,
                                      struct Msf3dScene **out);

/**
 * Reads a scene JSON file written by `msf3d generate`.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum Msf3dStatus msf3d_scene_read(const char *path, struct Msf3dScene **out);

/**
 * # Safety
 * `scene` must come from this library and not be used afterwards.
 */
void msf3d_scene_free(struct Msf3dScene *scene);

/**
 * Copies the ground-truth boxes (score 1).
 *
 * # Safety
 * As for `msf3d_model_detect`.
 */
enum Msf3dStatus msf3d_scene_ground_truth(const struct Msf3dScene *scene,
                                          struct Msf3dBox *out,
                                          uintptr_t capacity,
                                          uintptr_t *written);

/**
 * Number of LiDAR points in the scene, or 0 for NULL.
 *
 * # Safety
 * `scene` must be a live handle or NULL.
 */
uintptr_t msf3d_scene_point_count(const struct Msf3dScene *scene);

/**
 * Detection score from mAP and the five mean true-positive errors
 * (translation, scale, orientation, velocity, attribute).
 *
 * # Safety
 * `tp_errors` must point to 5 doubles; `out` must be writable.
 */
enum Msf3dStatus msf3d_nds(double map, const double *tp_errors, double *out);

/**
 * Minimum-cost assignment of every row of a row-major `rows x cols` cost
 * matrix (`rows <= cols`) to a distinct column, written to `out_cols`.
 *
 * # Safety
 * `cost` must hold `rows * cols` doubles and `out_cols` `rows` entries.
 */
enum Msf3dStatus msf3d_hungarian(const double *cost,
                                 uintptr_t rows,
                                 uintptr_t cols,
                                 uintptr_t *out_cols);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MSF3D_H */
