/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef ALPHA_POOLING_H
#define ALPHA_POOLING_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AlphaPoolStatus {
  ALPHA_POOL_STATUS_OK = 0,
  ALPHA_POOL_STATUS_NULL_POINTER = 1,
  ALPHA_POOL_STATUS_INVALID_ARGUMENT = 2,
  ALPHA_POOL_STATUS_IO = 3,
  ALPHA_POOL_STATUS_FORMAT = 4,
  ALPHA_POOL_STATUS_COMPUTE = 5,
  ALPHA_POOL_STATUS_BUFFER_TOO_SMALL = 6,
  ALPHA_POOL_STATUS_PANIC = 7,
} AlphaPoolStatus;

typedef struct AlphaPoolClassifier AlphaPoolClassifier;

typedef struct AlphaPoolFeatureMap AlphaPoolFeatureMap;

typedef struct AlphaPoolSketchPlan AlphaPoolSketchPlan;

/*
 Pooling parameters; see `alpha_pool_default_config`.
 */
typedef struct AlphaPoolConfig {
  double alpha;
  double epsilon;
  bool signed_sqrt;
  bool l2_normalize;
} AlphaPoolConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL after a success.
 The pointer stays valid until the next call into this library on the same thread.
 */
const char *alpha_pool_last_error_message(void);

/*
 Alpha 1.5, epsilon 1e-4, signed square root and L2 normalization on.
 */
struct AlphaPoolConfig alpha_pool_default_config(void);

/*
 Reads an FMAP1 file.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AlphaPoolStatus alpha_pool_fmap_read(const char *path, struct AlphaPoolFeatureMap **out);

/*
 Parses FMAP1 bytes.

 # Safety
 `bytes` must point to `len` readable bytes and `out` be a valid pointer.
 */
enum AlphaPoolStatus alpha_pool_fmap_from_buffer(const uint8_t *bytes,
                                                 size_t len,
                                                 struct AlphaPoolFeatureMap **out);

/*
 Builds a single-scale map from `height * width * dim` row-major values.

 # Safety
 `image_id` must be NUL-terminated (or NULL for an empty id), `values` must
 hold `height * width * dim` doubles and `out` be a valid pointer.
 */
enum AlphaPoolStatus alpha_pool_fmap_from_values(const char *image_id,
                                                 size_t height,
                                                 size_t width,
                                                 size_t dim,
                                                 const double *values,
                                                 struct AlphaPoolFeatureMap **out);

/*
 Feature dimension D, or 0 for NULL.

 # Safety
 `map` must be NULL or a live handle.
 */
size_t alpha_pool_fmap_dim(const struct AlphaPoolFeatureMap *map);

/*
 Number of locations over all scales, or 0 for NULL.

 # Safety
 `map` must be NULL or a live handle.
 */
size_t alpha_pool_fmap_location_count(const struct AlphaPoolFeatureMap *map);

/*
 # Safety
 `map` must be NULL or a handle not yet freed.
 */
void alpha_pool_fmap_free(struct AlphaPoolFeatureMap *map);

/*
 Tensor-sketch plan from `input_dim` to `sketch_dim` values.

 # Safety
 `out` must be a valid pointer.
 */
enum AlphaPoolStatus alpha_pool_sketch_plan_new(size_t input_dim,
                                                size_t sketch_dim,
                                                uint64_t seed,
                                                struct AlphaPoolSketchPlan **out);

/*
 # Safety
 `plan` must be NULL or a handle not yet freed.
 */
void alpha_pool_sketch_plan_free(struct AlphaPoolSketchPlan *plan);

/*
 Post-normalized descriptor of `map`: `D*D` values, or the sketch length
 when `plan` is non-NULL. `*written` receives the length. With a NULL or too
 short `out` the call only reports the length and returns
 `ALPHA_POOL_STATUS_BUFFER_TOO_SMALL` (NULL `out` with `out_len` 0 is a size query).

 # Safety
 `map` must be a live handle, `plan` NULL or a live handle, `out` NULL or
 `out_len` writable doubles, and `written` a valid pointer.
 */
enum AlphaPoolStatus alpha_pool_pool(const struct AlphaPoolFeatureMap *map,
                                     struct AlphaPoolConfig config,
                                     const struct AlphaPoolSketchPlan *plan,
                                     double *out,
                                     size_t out_len,
                                     size_t *written);

/*
 Kernel between the post-normalized descriptors of two maps.

 # Safety
 `a` and `b` must be live handles, `plan` NULL or a live handle and `out` valid.
 */
enum AlphaPoolStatus alpha_pool_kernel(const struct AlphaPoolFeatureMap *a,
                                       const struct AlphaPoolFeatureMap *b,
                                       struct AlphaPoolConfig config,
                                       const struct AlphaPoolSketchPlan *plan,
                                       double *out);

/*
 Loads a classifier artifact written by `alpha-pool train`.

 # Safety
 `path` must be NUL-terminated and `out` a valid pointer.
 */
enum AlphaPoolStatus alpha_pool_classifier_read(const char *path, struct AlphaPoolClassifier **out);

/*
 # Safety
 `clf` must be NULL or a live handle.
 */
size_t alpha_pool_classifier_class_count(const struct AlphaPoolClassifier *clf);

/*
 # Safety
 `clf` must be NULL or a live handle.
 */
size_t alpha_pool_classifier_train_count(const struct AlphaPoolClassifier *clf);

/*
 Class scores for one kernel row (kernel of the query against every
 training image, in training order).

 # Safety
 `clf` must be a live handle, `kernel_row` hold `row_len` doubles and
 `scores` have room for `scores_len` doubles.
 */
enum AlphaPoolStatus alpha_pool_classifier_score(const struct AlphaPoolClassifier *clf,
                                                 const double *kernel_row,
                                                 size_t row_len,
                                                 double *scores,
                                                 size_t scores_len);

/*
 # Safety
 `clf` must be NULL or a handle not yet freed.
 */
void alpha_pool_classifier_free(struct AlphaPoolClassifier *clf);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ALPHA_POOLING_H */
