#ifndef HYBRIDLOC_H
#define HYBRIDLOC_H

#include <stddef.h>
#include <stdint.h>

typedef enum HlStatus {
  HL_STATUS_OK = 0,
  HL_STATUS_INVALID_ARGUMENT = 1,
  HL_STATUS_DEGENERATE_GEOMETRY = 2,
  HL_STATUS_EMPTY_RECONSTRUCTION = 3,
  HL_STATUS_ALIGNMENT_INFEASIBLE = 4,
  HL_STATUS_NO_POSE = 5,
  HL_STATUS_NO_DETECTION = 6,
  HL_STATUS_UNDEFINED_ANGLE = 7,
  HL_STATUS_STAGE_DEPENDENCY = 8,
  HL_STATUS_IO = 9,
  HL_STATUS_PARSE = 10,
  HL_STATUS_NULL_POINTER = 11,
  HL_STATUS_NOT_FOUND = 12,
  HL_STATUS_BEHIND_CAMERA = 13,
  HL_STATUS_PANIC = 14,
} HlStatus;

typedef enum HlProvenance {
  HL_PROVENANCE_SFM = 0,
  HL_PROVENANCE_PNP = 1,
  HL_PROVENANCE_HYBRID_SFM = 2,
  HL_PROVENANCE_HYBRID_PNP = 3,
} HlProvenance;

typedef enum HlPreference {
  HL_PREFERENCE_PREFER_SFM = 0,
  HL_PREFERENCE_PREFER_PNP = 1,
} HlPreference;

// Opaque pose table.
typedef struct HlPoseTable HlPoseTable;

typedef struct HlPose {
  double rotation[9];
  double translation[3];
} HlPose;

typedef struct HlIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} HlIntrinsics;

typedef struct HlSim3 {
  double scale;
  double rotation[9];
  double translation[3];
} HlSim3;

typedef struct HlRansacParams {
  size_t max_iterations;
  double inlier_threshold;
  size_t min_inliers;
  double confidence;
  uint64_t seed;
} HlRansacParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *hl_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *hl_version(void);

// Projects `point[3]` into `out_uv[2]`; `out_depth` may be null.
//
// # Safety
// Pointers must be valid for the stated number of elements.
enum HlStatus hl_project(const double *point,
                         const struct HlPose *pose,
                         const struct HlIntrinsics *k,
                         double *out_uv,
                         double *out_depth);

// Lifts pixel `uv[2]` at `depth` to the world point `out_xyz[3]`.
//
// # Safety
// Pointers must be valid for the stated number of elements.
enum HlStatus hl_backproject(const double *uv,
                             double depth,
                             const struct HlIntrinsics *k,
                             const struct HlPose *pose,
                             double *out_xyz);

// Least-squares similarity mapping `src` onto `dst`, each `3 * n` doubles.
//
// # Safety
// `src` and `dst` must hold `3 * n` doubles; `out` must be writable.
enum HlStatus hl_umeyama(const double *src, const double *dst, size_t n, struct HlSim3 *out);

// Default RANSAC settings.
struct HlRansacParams hl_ransac_params_default(void);

// Robust PnP from `n` matches (`pixels`: 2n doubles, `points`: 3n doubles).
// Returns `HL_STATUS_NO_POSE` when no hypothesis reaches `min_inliers`.
// `out_inliers` (capacity `n`) and `out_inlier_count` may be null.
//
// # Safety
// Pointers must be valid for the stated number of elements.
enum HlStatus hl_ransac_pnp(const double *pixels,
                            const double *points,
                            size_t n,
                            const struct HlIntrinsics *k,
                            const struct HlRansacParams *params,
                            struct HlPose *out_pose,
                            size_t *out_inliers,
                            size_t *out_inlier_count);

// New empty table.
struct HlPoseTable *hl_pose_table_new(void);

// Reads a pose table file into a new handle stored in `*out`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum HlStatus hl_pose_table_load(const char *path, struct HlPoseTable **out);

// Writes the table in the pose file format.
//
// # Safety
// `table` must be a live handle and `path` a NUL-terminated string.
enum HlStatus hl_pose_table_save(const struct HlPoseTable *table, const char *path);

// Number of posed frames; 0 for a null handle.
//
// # Safety
// `table` must be null or a live handle.
size_t hl_pose_table_len(const struct HlPoseTable *table);

// Writes the ascending frame indices into `out_frames` (capacity `cap`) and
// returns how many the table holds.
//
// # Safety
// `table` must be null or a live handle; `out_frames` must hold `cap` values.
size_t hl_pose_table_frames(const struct HlPoseTable *table, size_t *out_frames, size_t cap);

// Inserts or replaces the pose for `frame`.
//
// # Safety
// `table` must be a live handle and `pose` valid.
enum HlStatus hl_pose_table_insert(struct HlPoseTable *table,
                                   size_t frame,
                                   const struct HlPose *pose,
                                   enum HlProvenance provenance);

// Pose and provenance for `frame`; `HL_STATUS_NOT_FOUND` when absent.
// `out_provenance` may be null.
//
// # Safety
// `table` must be a live handle; outputs must be writable.
enum HlStatus hl_pose_table_get(const struct HlPoseTable *table,
                                size_t frame,
                                struct HlPose *out_pose,
                                enum HlProvenance *out_provenance);

// Releases a handle; null is ignored.
//
// # Safety
// `table` must be null or a handle not freed before.
void hl_pose_table_free(struct HlPoseTable *table);

// Maps `sfm` into the frame of `pnp` using their shared frames. The mapped
// table goes to `*out_aligned`; `out_sim3` may be null.
//
// # Safety
// Handles must be live; outputs must be writable.
enum HlStatus hl_align_sfm_to_scan(const struct HlPoseTable *sfm,
                                   const struct HlPoseTable *pnp,
                                   struct HlPoseTable **out_aligned,
                                   struct HlSim3 *out_sim3);

// Union of an aligned SfM table and a PnP table. A `consistency_gate` of
// zero or less disables the gate.
//
// # Safety
// Handles must be live; `out` must be writable.
enum HlStatus hl_union_poses(const struct HlPoseTable *aligned_sfm,
                             const struct HlPoseTable *pnp,
                             enum HlPreference preference,
                             double consistency_gate,
                             struct HlPoseTable **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HYBRIDLOC_H */
