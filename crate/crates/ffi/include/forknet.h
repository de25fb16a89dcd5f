#ifndef FORKNET_H
#define FORKNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum ForknetStatus {
  FORKNET_STATUS_OK = 0,
  FORKNET_STATUS_NULL_POINTER = 1,
  FORKNET_STATUS_INVALID_ARGUMENT = 2,
  FORKNET_STATUS_IO = 3,
  FORKNET_STATUS_FORMAT = 4,
  FORKNET_STATUS_SHAPE = 5,
  FORKNET_STATUS_CONFIG = 6,
  FORKNET_STATUS_CHECKPOINT = 7,
  FORKNET_STATUS_NON_FINITE = 8,
  FORKNET_STATUS_CONTRACT = 9,
  FORKNET_STATUS_DATA = 10,
  FORKNET_STATUS_STATE = 11,
  FORKNET_STATUS_PANIC = 12,
} ForknetStatus;

/**
 * A loaded network.
 */
typedef struct ForknetModel ForknetModel;

/**
 * A channel-major voxel volume.
 */
typedef struct ForknetVolume ForknetVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *forknet_version(void);

/**
 * Copies the last error message of this thread into `buf` (truncated and
 * NUL-terminated when `len > 0`) and returns its full length in bytes.
 *
 * # Safety
 * `buf` must be null or valid for `len` writable bytes.
 */
size_t forknet_last_error(char *buf, size_t len);

/**
 * Loads a checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ForknetStatus forknet_model_load(const char *path, struct ForknetModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`forknet_model_load`] and not be used again.
 */
void forknet_model_free(struct ForknetModel *model);

/**
 * Writes the model grid extents into `dims[0..3]` and the number of
 * non-empty classes into `*classes`.
 *
 * # Safety
 * `dims` must be valid for 3 writes and `classes` for one.
 */
enum ForknetStatus forknet_model_layout(const struct ForknetModel *model,
                                        size_t *dims,
                                        size_t *classes);

/**
 * Completes a stored depth image (PGM plus sidecar) on the model grid
 * with the given voxel size, returning SDF (meters), occupancy and
 * semantic volumes.
 *
 * # Safety
 * Pointers must be valid; `depth_path` NUL-terminated.
 */
enum ForknetStatus forknet_model_complete_depth(const struct ForknetModel *model,
                                                const char *depth_path,
                                                float voxel_size,
                                                struct ForknetVolume **sdf,
                                                struct ForknetVolume **geometry,
                                                struct ForknetVolume **semantic);

/**
 * Completes a precomputed truncated SDF given in meters, `len` values in
 * grid order. The truncation is four voxels.
 *
 * # Safety
 * `values` must be valid for `len` reads; outputs must be valid.
 */
enum ForknetStatus forknet_model_complete_sdf(const struct ForknetModel *model,
                                              const float *values,
                                              size_t len,
                                              float voxel_size,
                                              struct ForknetVolume **sdf,
                                              struct ForknetVolume **geometry,
                                              struct ForknetVolume **semantic);

/**
 * Reads an FVOX file into `*out`.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum ForknetStatus forknet_volume_read(const char *path, struct ForknetVolume **out);

/**
 * Writes a volume as FVOX.
 *
 * # Safety
 * `volume` must be a live handle and `path` NUL-terminated.
 */
enum ForknetStatus forknet_volume_write(const struct ForknetVolume *volume, const char *path);

/**
 * Releases a volume; null is ignored.
 *
 * # Safety
 * `volume` must be a handle returned by this library and not used again.
 */
void forknet_volume_free(struct ForknetVolume *volume);

/**
 * Writes `[channels, L, H, W]` into `shape[0..4]`.
 *
 * # Safety
 * `shape` must be valid for 4 writes.
 */
enum ForknetStatus forknet_volume_shape(const struct ForknetVolume *volume, size_t *shape);

/**
 * Copies all values (channel-major) into `out`; `len` must equal the
 * element count.
 *
 * # Safety
 * `out` must be valid for `len` writes.
 */
enum ForknetStatus forknet_volume_copy(const struct ForknetVolume *volume, float *out, size_t len);

/**
 * Writes the per-voxel argmax class (ties to the lowest) into `out`;
 * `len` must equal the voxel count.
 *
 * # Safety
 * `out` must be valid for `len` writes.
 */
enum ForknetStatus forknet_volume_labels(const struct ForknetVolume *volume,
                                         uint8_t *out,
                                         size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FORKNET_H */
