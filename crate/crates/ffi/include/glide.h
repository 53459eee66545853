#ifndef GLIDE_H
#define GLIDE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GlideDimred {
  GLIDE_DIMRED_PCA = 0,
  GLIDE_DIMRED_SDR = 1,
  GLIDE_DIMRED_DDR = 2,
} GlideDimred;

typedef enum GlideMode {
  GLIDE_MODE_GLIDE = 0,
  GLIDE_MODE_GLOBAL_ONLY = 1,
  GLIDE_MODE_LOCAL_ONLY = 2,
} GlideMode;

typedef enum GlideStatus {
  GLIDE_STATUS_OK = 0,
  GLIDE_STATUS_NULL_POINTER = 1,
  GLIDE_STATUS_INVALID_ARGUMENT = 2,
  GLIDE_STATUS_DIMENSION_MISMATCH = 3,
  GLIDE_STATUS_IO = 4,
  GLIDE_STATUS_FORMAT = 5,
  GLIDE_STATUS_NON_FINITE = 6,
  GLIDE_STATUS_PANIC = 7,
} GlideStatus;

/**
 * Registration configuration.
 */
typedef struct GlideConfig GlideConfig;

/**
 * Multi-channel feature volume.
 */
typedef struct GlideFeatures GlideFeatures;

/**
 * Displacement field in voxels.
 */
typedef struct GlideField GlideField;

/**
 * Scalar intensity volume.
 */
typedef struct GlideVolume GlideVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *glide_version(void);

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *glide_last_error(void);

/**
 * Create a volume from `len = dims[0]*dims[1]*dims[2]` values, x fastest.
 *
 * # Safety
 * `dims` and `spacing` point to 3 values, `data` to `len` values.
 */
enum GlideStatus glide_volume_new(const size_t *dims,
                                  const double *spacing,
                                  const double *data,
                                  size_t len,
                                  struct GlideVolume **out);

/**
 * # Safety
 * `path` is a NUL-terminated string.
 */
enum GlideStatus glide_volume_read(const char *path, struct GlideVolume **out);

/**
 * # Safety
 * `v` is a live volume handle and `path` a NUL-terminated string.
 */
enum GlideStatus glide_volume_write(const struct GlideVolume *v, const char *path);

/**
 * # Safety
 * `out_dims` points to space for 3 values.
 */
enum GlideStatus glide_volume_dims(const struct GlideVolume *v, size_t *out_dims);

/**
 * Copy the voxel values into `out`, which must hold exactly `len` values.
 *
 * # Safety
 * `out` points to `len` writable values.
 */
enum GlideStatus glide_volume_copy_data(const struct GlideVolume *v, double *out, size_t len);

/**
 * # Safety
 * `v` is null or a handle not yet freed.
 */
void glide_volume_free(struct GlideVolume *v);

/**
 * Create a feature volume with channels interleaved per voxel.
 *
 * # Safety
 * `dims` and `spacing` point to 3 values, `data` to `len` values.
 */
enum GlideStatus glide_features_new(const size_t *dims,
                                    size_t channels,
                                    const double *spacing,
                                    const double *data,
                                    size_t len,
                                    struct GlideFeatures **out);

/**
 * # Safety
 * `path` is a NUL-terminated string.
 */
enum GlideStatus glide_features_read(const char *path, struct GlideFeatures **out);

/**
 * # Safety
 * `f` is a live handle and `path` a NUL-terminated string.
 */
enum GlideStatus glide_features_write(const struct GlideFeatures *f, const char *path);

/**
 * # Safety
 * `out_dims` points to space for 3 values and `out_channels` to one.
 */
enum GlideStatus glide_features_shape(const struct GlideFeatures *f,
                                      size_t *out_dims,
                                      size_t *out_channels);

/**
 * # Safety
 * `out` points to `len` writable values.
 */
enum GlideStatus glide_features_copy_data(const struct GlideFeatures *f, double *out, size_t len);

/**
 * # Safety
 * `f` is null or a handle not yet freed.
 */
void glide_features_free(struct GlideFeatures *f);

/**
 * MIND descriptors with default settings.
 *
 * # Safety
 * `v` is a live volume handle.
 */
enum GlideStatus glide_extract_mind(const struct GlideVolume *v, struct GlideFeatures **out);

/**
 * # Safety
 * `out` is null or points to writable storage for a handle.
 */
enum GlideStatus glide_config_default(struct GlideConfig **out);

/**
 * Parse a JSON object; missing keys keep their defaults.
 *
 * # Safety
 * `json` is a NUL-terminated string.
 */
enum GlideStatus glide_config_from_json(const char *json, struct GlideConfig **out);

/**
 * # Safety
 * `cfg` is a live handle.
 */
enum GlideStatus glide_config_set_iterations(struct GlideConfig *cfg, size_t iters);

/**
 * # Safety
 * `cfg` is a live handle.
 */
enum GlideStatus glide_config_set_seed(struct GlideConfig *cfg, uint64_t seed);

/**
 * # Safety
 * `cfg` is a live handle.
 */
enum GlideStatus glide_config_set_mode(struct GlideConfig *cfg, enum GlideMode mode);

/**
 * # Safety
 * `cfg` is a live handle.
 */
enum GlideStatus glide_config_set_dimred(struct GlideConfig *cfg, enum GlideDimred method);

/**
 * # Safety
 * `cfg` is null or a handle not yet freed.
 */
void glide_config_free(struct GlideConfig *cfg);

/**
 * Register `moving` onto `fixed`. The global features may both be null
 * when the mode is local-only.
 *
 * # Safety
 * Non-null pointers are live handles.
 */
enum GlideStatus glide_register(const struct GlideVolume *fixed,
                                const struct GlideVolume *moving,
                                const struct GlideFeatures *global_fixed,
                                const struct GlideFeatures *global_moving,
                                const struct GlideConfig *cfg,
                                struct GlideField **out);

/**
 * # Safety
 * `path` is a NUL-terminated string.
 */
enum GlideStatus glide_field_read(const char *path, struct GlideField **out);

/**
 * # Safety
 * `u` is a live handle and `path` a NUL-terminated string.
 */
enum GlideStatus glide_field_write(const struct GlideField *u, const char *path);

/**
 * # Safety
 * `out_dims` points to space for 3 values.
 */
enum GlideStatus glide_field_dims(const struct GlideField *u, size_t *out_dims);

/**
 * Copy the displacement (3 interleaved components per voxel).
 *
 * # Safety
 * `out` points to `len` writable values.
 */
enum GlideStatus glide_field_copy_data(const struct GlideField *u, double *out, size_t len);

/**
 * Trilinearly warp `moving` by `u`.
 *
 * # Safety
 * `moving` and `u` are live handles.
 */
enum GlideStatus glide_warp(const struct GlideVolume *moving,
                            const struct GlideField *u,
                            struct GlideVolume **out);

/**
 * # Safety
 * `u` is null or a handle not yet freed.
 */
void glide_field_free(struct GlideField *u);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GLIDE_H */
