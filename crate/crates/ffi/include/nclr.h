#ifndef NCLR_H
#define NCLR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum NclrStatus {
  NCLR_STATUS_OK = 0,
  NCLR_STATUS_NULL_POINTER = 1,
  NCLR_STATUS_INVALID_ARGUMENT = 2,
  NCLR_STATUS_IO = 3,
  NCLR_STATUS_FORMAT = 4,
  NCLR_STATUS_VERSION = 5,
  NCLR_STATUS_INSUFFICIENT_CORRESPONDENCES = 6,
  NCLR_STATUS_CONDITIONING = 7,
  NCLR_STATUS_SOLVER = 8,
  NCLR_STATUS_CONFIG = 9,
  NCLR_STATUS_INTERNAL = 10,
  NCLR_STATUS_PANIC = 11,
} NclrStatus;

/**
 * Opaque trained model: parameters plus the configs they were built with.
 */
typedef struct NclrModel NclrModel;

/**
 * Opaque synthetic scene.
 */
typedef struct NclrScene NclrScene;

/**
 * Pinhole intrinsics of a `width`×`height` feature grid.
 */
typedef struct NclrIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} NclrIntrinsics;

/**
 * Per-scene evaluation of a model.
 */
typedef struct NclrSceneMetrics {
  /**
   * NaN when the pose solve failed.
   */
  double rte_m;
  double rre_deg;
  double match_mean_px;
  double match_std_px;
  double acc_at_5px;
  /**
   * 1 when the pose solve succeeded.
   */
  uint8_t pose_ok;
} NclrSceneMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *nclr_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t nclr_last_error(char *buf, size_t len);

/**
 * Projects `n` points (n×3, row-major) with `pose` and `k`. Writes n×2
 * pixel coordinates to `out_uv` and a 0/1 flag per point to `out_valid`;
 * points at or behind the camera get flag 0 and NaN coordinates.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum NclrStatus nclr_project(const double *points,
                             size_t n,
                             const double *pose,
                             const struct NclrIntrinsics *k,
                             double *out_uv,
                             uint8_t *out_valid);

/**
 * EPnP followed by `iters` Gauss-Newton steps on `n` correspondences
 * (points n×3, targets n×2). Writes the pose (12 doubles) and the RMS
 * reprojection residual in pixels.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum NclrStatus nclr_solve_pose(const double *points,
                                const double *targets,
                                size_t n,
                                const struct NclrIntrinsics *k,
                                uint32_t iters,
                                double *out_pose,
                                double *out_residual);

/**
 * Translation error in meters between two poses.
 *
 * # Safety
 * `est` and `gt` must point to 12 doubles; `out_m` must be writable.
 */
enum NclrStatus nclr_rte(const double *est, const double *gt, double *out_m);

/**
 * Rotation error in degrees: Euler-angle sum, or the geodesic angle when
 * `geodesic` is nonzero.
 *
 * # Safety
 * `est` and `gt` must point to 12 doubles; `out_deg` must be writable.
 */
enum NclrStatus nclr_rre(const double *est, const double *gt, uint8_t geodesic, double *out_deg);

/**
 * Generates one scene with default settings for everything except the
 * point count and grid size; the focal length equals the grid width.
 *
 * # Safety
 * `out_scene` must be writable.
 */
enum NclrStatus nclr_scene_generate(uint64_t seed,
                                    uint32_t n_points,
                                    uint32_t grid_height,
                                    uint32_t grid_width,
                                    struct NclrScene **out_scene);

/**
 * Reads a scene file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_scene` must be writable.
 */
enum NclrStatus nclr_scene_load(const char *path, struct NclrScene **out_scene);

/**
 * Writes a scene file.
 *
 * # Safety
 * `scene` must come from this library; `path` must be NUL-terminated.
 */
enum NclrStatus nclr_scene_save(const struct NclrScene *scene, const char *path);

/**
 * # Safety
 * `scene` must be null or come from this library and not be used again.
 */
void nclr_scene_free(struct NclrScene *scene);

/**
 * Point count and grid size of a scene.
 *
 * # Safety
 * `scene` must come from this library; outputs must be writable.
 */
enum NclrStatus nclr_scene_dims(const struct NclrScene *scene,
                                size_t *out_points,
                                size_t *out_height,
                                size_t *out_width);

/**
 * Copies the points (n×3), the raw pose (12) and the intrinsics.
 *
 * # Safety
 * `points` must hold 3n doubles and `pose` 12; `k` must be writable.
 */
enum NclrStatus nclr_scene_geometry(const struct NclrScene *scene,
                                    double *points,
                                    double *pose,
                                    struct NclrIntrinsics *k);

/**
 * Loads a parameter file. `config_path` may be null for default model
 * widths; otherwise its `[train.encoder]` and `[train.matching]` apply.
 *
 * # Safety
 * Paths must be NUL-terminated (or null where allowed); `out_model` must
 * be writable.
 */
enum NclrStatus nclr_model_load(const char *params_path,
                                const char *config_path,
                                struct NclrModel **out_model);

/**
 * # Safety
 * `model` must be null or come from this library and not be used again.
 */
void nclr_model_free(struct NclrModel *model);

/**
 * Runs matching and pose estimation on one scene. `ablation` is one of
 * "cosine-hard", "cosine-soft", "learnable-hard", "learnable-soft", or
 * null for learnable-soft. A failed pose solve is reported through
 * `pose_ok` and NaN errors, not as an error status.
 *
 * # Safety
 * Handles must come from this library; `ablation` must be null or
 * NUL-terminated; `out_metrics` must be writable.
 */
enum NclrStatus nclr_model_evaluate(const struct NclrModel *model,
                                    const struct NclrScene *scene,
                                    const char *ablation,
                                    struct NclrSceneMetrics *out_metrics);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NCLR_H */
