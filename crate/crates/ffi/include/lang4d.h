#ifndef LANG4D_H
#define LANG4D_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum L4dBranch {
  L4D_BRANCH_AGNOSTIC = 0,
  L4D_BRANCH_SENSITIVE = 1,
} L4dBranch;

typedef enum L4dStatus {
  L4D_STATUS_OK = 0,
  L4D_STATUS_NULL_POINTER = 1,
  L4D_STATUS_INVALID_ARGUMENT = 2,
  L4D_STATUS_IO = 3,
  L4D_STATUS_FORMAT = 4,
  L4D_STATUS_CHECKPOINT = 5,
  L4D_STATUS_NOT_FOUND = 6,
  L4D_STATUS_BUFFER_TOO_SMALL = 7,
  L4D_STATUS_PANIC = 8,
} L4dStatus;

/**
 * A trained model restored from a checkpoint.
 */
typedef struct L4dModel L4dModel;

/**
 * Masks, segment and point clouds of one query.
 */
typedef struct L4dQueryResult L4dQueryResult;

/**
 * A synthetic scene directory (`<bundle>/scene/<name>`).
 */
typedef struct L4dScene L4dScene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t l4d_last_error(char *buf, size_t len);

/**
 * Width of a branch's compressed feature space (3 or 6).
 */
size_t l4d_branch_dim(enum L4dBranch branch);

/**
 * Loads a checkpoint written by `lang4d train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum L4dStatus l4d_model_load(const char *path, struct L4dModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`l4d_model_load`], freed once.
 */
void l4d_model_free(struct L4dModel *model);

/**
 * Loads one scene directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum L4dStatus l4d_scene_load(const char *dir, struct L4dScene **out);

/**
 * # Safety
 * `scene` must be null or a handle from [`l4d_scene_load`], freed once.
 */
void l4d_scene_free(struct L4dScene *scene);

/**
 * Number of frames of a scene, 0 for a null handle.
 *
 * # Safety
 * `scene` must be null or a live handle.
 */
size_t l4d_scene_num_frames(const struct L4dScene *scene);

/**
 * Runs a query stored with the scene. Pass NaN for `tau` or `tau_t` to
 * use the checkpoint's thresholds.
 *
 * # Safety
 * Handles must be live, `name` NUL-terminated, `out` writable.
 */
enum L4dStatus l4d_query_named(const struct L4dModel *model,
                               const struct L4dScene *scene,
                               const char *name,
                               float tau,
                               float tau_t,
                               bool oracle_geometry,
                               struct L4dQueryResult **out);

/**
 * Runs a query given as a vector: either full-size (compressed with the
 * scene's autoencoder) or already of the branch's width.
 *
 * # Safety
 * Handles must be live, `embedding` must point to `len` floats, `out`
 * writable.
 */
enum L4dStatus l4d_query_embedding(const struct L4dModel *model,
                                   const struct L4dScene *scene,
                                   enum L4dBranch branch,
                                   const float *embedding,
                                   size_t len,
                                   float tau,
                                   float tau_t,
                                   bool oracle_geometry,
                                   struct L4dQueryResult **out);

/**
 * # Safety
 * `result` must be null or a handle from a query call, freed once.
 */
void l4d_result_free(struct L4dQueryResult *result);

/**
 * Number of frames covered by a result, 0 for a null handle.
 *
 * # Safety
 * `result` must be null or a live handle.
 */
size_t l4d_result_num_frames(const struct L4dQueryResult *result);

/**
 * Copies the temporal segment (ascending frame indices) into `frames`.
 * `written` receives the segment length; if it exceeds `cap` nothing is
 * copied and `BufferTooSmall` is returned.
 *
 * # Safety
 * `frames` must point to `cap` writable values (or be null with cap 0);
 * `written` must be writable.
 */
enum L4dStatus l4d_result_segment(const struct L4dQueryResult *result,
                                  size_t *frames,
                                  size_t cap,
                                  size_t *written);

/**
 * Copies frame `t`'s binary mask (row-major, token grid) into `mask`;
 * `height` and `width` receive its size.
 *
 * # Safety
 * `mask` must point to `cap` writable bytes; `height` and `width` must be
 * writable.
 */
enum L4dStatus l4d_result_mask(const struct L4dQueryResult *result,
                               size_t t,
                               uint8_t *mask,
                               size_t cap,
                               size_t *height,
                               size_t *width);

/**
 * Number of lifted points in frame `t` (0 outside the segment).
 *
 * # Safety
 * `result` must be null or a live handle.
 */
size_t l4d_result_num_points(const struct L4dQueryResult *result, size_t t);

/**
 * Copies frame `t`'s points as `x y z` triples into `xyz` (`cap` floats).
 *
 * # Safety
 * `xyz` must point to `cap` writable floats.
 */
enum L4dStatus l4d_result_points(const struct L4dQueryResult *result,
                                 size_t t,
                                 float *xyz,
                                 size_t cap);

/**
 * Writes the result to `dir` in the same layout as `lang4d query`.
 *
 * # Safety
 * `dir` and `name` must be NUL-terminated strings.
 */
enum L4dStatus l4d_result_write(const struct L4dQueryResult *result,
                                const char *dir,
                                const char *name);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LANG4D_H */
