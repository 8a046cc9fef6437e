/* C interface to the magnet-da domain-adaptation toolkit. */

#ifndef MAGNET_DA_H
#define MAGNET_DA_H

/* Generated by cbindgen from magnet-da-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes returned by every fallible call.
 */
typedef enum MagnetStatus {
  MAGNET_OK = 0,
  /**
   * A required pointer argument was null.
   */
  MAGNET_NULL_ARGUMENT = 1,
  /**
   * An argument failed validation; see `magnet_last_error_message`.
   */
  MAGNET_INVALID_ARGUMENT = 2,
  /**
   * File or parsing failure.
   */
  MAGNET_IO_ERROR = 3,
  /**
   * Training or evaluation failed.
   */
  MAGNET_RUNTIME_ERROR = 4,
} MagnetStatus;

/**
 * Opaque dataset handle.
 */
typedef struct MagnetDataset MagnetDataset;

/**
 * Opaque model handle.
 */
typedef struct MagnetModelHandle MagnetModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent error on this thread. The pointer is
 * valid until the next failing call on the same thread; do not free it.
 */
const char *magnet_last_error_message(void);

/**
 * Crate version as a static string; do not free it.
 */
const char *magnet_version(void);

/**
 * Generate a synthetic shape dataset.
 *
 * `domain` is one of `"photo"`, `"cad"`, `"sketch"`.
 *
 * # Safety
 * `domain` must be a valid NUL-terminated string and `out` a valid pointer;
 * the returned handle must be released with `magnet_dataset_free`.
 */
enum MagnetStatus magnet_dataset_generate(const char *domain,
                                          uint32_t classes,
                                          uint64_t n,
                                          uint32_t image_size,
                                          uint64_t seed,
                                          struct MagnetDataset **out);

/**
 * Read a DMDS file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer;
 * the returned handle must be released with `magnet_dataset_free`.
 */
enum MagnetStatus magnet_dataset_read(const char *path, struct MagnetDataset **out);

/**
 * Write a dataset as a DMDS file.
 *
 * # Safety
 * `ds` must be a live handle from this library and `path` a valid string.
 */
enum MagnetStatus magnet_dataset_write(const struct MagnetDataset *ds, const char *path);

/**
 * Number of images in a dataset; 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle from this library.
 */
uint64_t magnet_dataset_len(const struct MagnetDataset *ds);

/**
 * Number of classes in a dataset's vocabulary; 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle from this library.
 */
uint32_t magnet_dataset_num_classes(const struct MagnetDataset *ds);

/**
 * Copy one image's pixels (row-major, `[0, 1]`) into `buffer`.
 *
 * # Safety
 * `buffer` must point to at least `buffer_len` writable doubles.
 */
enum MagnetStatus magnet_dataset_pixels(const struct MagnetDataset *ds,
                                        uint64_t index,
                                        double *buffer,
                                        uint64_t buffer_len);

/**
 * Release a dataset handle (null is ignored).
 *
 * # Safety
 * `ds` must be null or a handle previously returned by this library, not
 * yet freed.
 */
void magnet_dataset_free(struct MagnetDataset *ds);

/**
 * Load a DMCK checkpoint.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer;
 * the returned handle must be released with `magnet_model_free`.
 */
enum MagnetStatus magnet_model_load(const char *path, struct MagnetModelHandle **out);

/**
 * Save a model as a DMCK checkpoint.
 *
 * # Safety
 * `model` must be a live handle and `path` a valid string.
 */
enum MagnetStatus magnet_model_save(const struct MagnetModelHandle *model, const char *path);

/**
 * Total scalar parameter count; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle from this library.
 */
uint64_t magnet_model_param_count(const struct MagnetModelHandle *model);

/**
 * Release a model handle (null is ignored).
 *
 * # Safety
 * `model` must be null or a handle previously returned by this library, not
 * yet freed.
 */
void magnet_model_free(struct MagnetModelHandle *model);

/**
 * Train a model on a labeled source and an unlabeled target dataset.
 *
 * `config` is optional `key = value` text with the same keys as the CLI
 * config files (pass null for defaults). On success writes a new model
 * handle to `out`.
 *
 * # Safety
 * `source` and `target` must be live dataset handles, `config` null or a
 * valid string, and `out` a valid pointer. The returned handle must be
 * released with `magnet_model_free`.
 */
enum MagnetStatus magnet_train(const struct MagnetDataset *source,
                               const struct MagnetDataset *target,
                               const char *config,
                               uint64_t seed,
                               struct MagnetModelHandle **out);

/**
 * Classification accuracy of a model on a labeled dataset.
 *
 * # Safety
 * `model` and `ds` must be live handles; `out_accuracy` must be valid.
 */
enum MagnetStatus magnet_evaluate(struct MagnetModelHandle *model,
                                  const struct MagnetDataset *ds,
                                  double *out_accuracy);

/**
 * Biased Gaussian-kernel MMD between two row-major sample matrices.
 *
 * # Safety
 * `zs` must point to `ns * d` doubles and `zt` to `nt * d`; `out` must be a
 * valid pointer.
 */
enum MagnetStatus magnet_mmd_biased(const double *zs,
                                    uint64_t ns,
                                    const double *zt,
                                    uint64_t nt,
                                    uint64_t d,
                                    double sigma,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAGNET_DA_H */
