/* C ABI for the cystseg OCT cyst segmentation library. */

#ifndef CYSTSEG_H
#define CYSTSEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by fallible functions.
typedef enum CystsegStatus {
  CYSTSEG_STATUS_OK = 0,
  // A required pointer argument was NULL.
  CYSTSEG_STATUS_NULL_ARGUMENT = 1,
  // An argument failed validation (bad key, bad value, bad index).
  CYSTSEG_STATUS_INVALID_ARGUMENT = 2,
  // File system or image format failure.
  CYSTSEG_STATUS_IO_ERROR = 3,
  // Data or model error (dimensions, classes, corrupt files).
  CYSTSEG_STATUS_DATA_ERROR = 4,
  // Unexpected internal failure.
  CYSTSEG_STATUS_INTERNAL_ERROR = 5,
} CystsegStatus;

// Opaque pipeline configuration.
typedef struct CystsegConfig CystsegConfig;

// Opaque trained random-forest model.
typedef struct CystsegModel CystsegModel;

// Opaque segmentation result: one mask per slice on the 512x256 grid.
typedef struct CystsegResult CystsegResult;

// Opaque loaded volume (slices plus any ground truth).
typedef struct CystsegVolume CystsegVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread, or NULL.
// The pointer stays valid until the next failing call on the same thread.
const char *cystseg_last_error_message(void);

// Library version as a static string.
const char *cystseg_version(void);

// Creates a configuration with the library defaults.
struct CystsegConfig *cystseg_config_new(void);

// Sets one configuration key (same keys as the config-file format, e.g.
// `tv_lambda`, `mser_min_area`, `threshold`, `seed`).
//
// # Safety
// `cfg` must come from [`cystseg_config_new`]; `key` and `value` must be
// valid NUL-terminated strings.
enum CystsegStatus cystseg_config_set(struct CystsegConfig *cfg,
                                      const char *key,
                                      const char *value);

// # Safety
// `cfg` must be NULL or an unfreed pointer from [`cystseg_config_new`].
void cystseg_config_free(struct CystsegConfig *cfg);

// Loads a volume (and any ground truth) from a manifest file.
// Returns NULL on failure.
//
// # Safety
// `manifest_path` must be a valid NUL-terminated string.
struct CystsegVolume *cystseg_volume_load(const char *manifest_path);

// Number of slices, or -1 if the handle is NULL.
//
// # Safety
// `vol` must be NULL or an unfreed pointer from [`cystseg_volume_load`].
int64_t cystseg_volume_slice_count(const struct CystsegVolume *vol);

// # Safety
// `vol` must be NULL or an unfreed pointer from [`cystseg_volume_load`].
void cystseg_volume_free(struct CystsegVolume *vol);

// Writes one synthetic phantom volume (manifest + PGM slices + ground
// truth) under `dir`.
//
// # Safety
// `dir` must be a valid NUL-terminated string.
enum CystsegStatus cystseg_phantom_write(const char *dir,
                                         size_t n_slices,
                                         double speckle_sigma,
                                         uint64_t seed);

// Loads a `.ocsf` model file. Returns NULL on failure.
//
// # Safety
// `path` must be a valid NUL-terminated string.
struct CystsegModel *cystseg_model_load(const char *path);

// # Safety
// `model` must be an unfreed pointer from a model constructor; `path` must
// be a valid NUL-terminated string.
enum CystsegStatus cystseg_model_save(const struct CystsegModel *model, const char *path);

// Number of trees, or -1 if the handle is NULL.
//
// # Safety
// `model` must be NULL or an unfreed model pointer.
int32_t cystseg_model_n_trees(const struct CystsegModel *model);

// # Safety
// `model` must be NULL or an unfreed model pointer.
void cystseg_model_free(struct CystsegModel *model);

// Trains a model on manifests that carry ground truth. `manifests` is an
// array of `n_manifests` NUL-terminated paths. Returns NULL on failure.
//
// # Safety
// `cfg` must be an unfreed config pointer; `manifests` must point to
// `n_manifests` valid strings.
struct CystsegModel *cystseg_train(const struct CystsegConfig *cfg,
                                   const char *const *manifests,
                                   size_t n_manifests);

// Runs the full pipeline on a volume with a trained model. Returns NULL
// on failure.
//
// # Safety
// All three handles must be unfreed pointers from their constructors.
struct CystsegResult *cystseg_segment(const struct CystsegConfig *cfg,
                                      const struct CystsegVolume *volume,
                                      const struct CystsegModel *model);

// Number of per-slice masks, or -1 if the handle is NULL.
//
// # Safety
// `result` must be NULL or an unfreed pointer from [`cystseg_segment`].
int64_t cystseg_result_slice_count(const struct CystsegResult *result);

// Mask width in pixels (the standard grid), or -1 on NULL/empty.
//
// # Safety
// `result` must be NULL or an unfreed pointer from [`cystseg_segment`].
int64_t cystseg_result_width(const struct CystsegResult *result);

// Mask height in pixels, or -1 on NULL/empty.
//
// # Safety
// `result` must be NULL or an unfreed pointer from [`cystseg_segment`].
int64_t cystseg_result_height(const struct CystsegResult *result);

// Copies one slice's mask into `buffer` as 0/255 bytes, row-major.
// `buffer_len` must be at least `width * height`.
//
// # Safety
// `result` must be an unfreed pointer from [`cystseg_segment`]; `buffer`
// must point to at least `buffer_len` writable bytes.
enum CystsegStatus cystseg_result_mask(const struct CystsegResult *result,
                                       size_t slice_index,
                                       uint8_t *buffer,
                                       size_t buffer_len);

// # Safety
// `result` must be NULL or an unfreed pointer from [`cystseg_segment`].
void cystseg_result_free(struct CystsegResult *result);

// Dice coefficient of two row-major byte masks of `width * height` pixels
// (nonzero = foreground). Returns a value in [0,1], or -1.0 on bad input.
//
// # Safety
// `pred` and `gt` must each point to `width * height` readable bytes.
double cystseg_dice(const uint8_t *pred, const uint8_t *gt, size_t width, size_t height);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CYSTSEG_H */
