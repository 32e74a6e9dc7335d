#ifndef CROCO_H
#define CROCO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CrocoStatus {
  CROCO_STATUS_OK = 0,
  CROCO_STATUS_NULL_POINTER = 1,
  CROCO_STATUS_CONFIG = 2,
  CROCO_STATUS_DATA = 3,
  CROCO_STATUS_NUMERICAL = 4,
  CROCO_STATUS_PANIC = 5,
} CrocoStatus;

// Opaque model handle.
typedef struct CrocoModel CrocoModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message on this thread, or null. Valid until the next
// failing call on the same thread.
const char *croco_last_error(void);

// Creates a freshly initialized model. `base` selects the ViT-Base sizes
// (with `catblock` choosing the decoder), otherwise the tiny 64×64 config.
//
// # Safety
// `out` must be a valid pointer.
enum CrocoStatus croco_model_new(bool base, bool catblock, uint64_t seed, struct CrocoModel **out);

// Loads a model from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CrocoStatus croco_model_load(const char *path, struct CrocoModel **out);

// Saves the model weights (without optimizer state).
//
// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum CrocoStatus croco_model_save(const struct CrocoModel *model, const char *path);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void croco_model_free(struct CrocoModel *model);

// Input side in pixels and number of parameters.
//
// # Safety
// `model` must come from this library; outputs may be null.
enum CrocoStatus croco_model_info(const struct CrocoModel *model,
                                  size_t *image_size,
                                  size_t *num_params);

// Pre-training loss of one pair under a mask drawn from `seed`.
//
// # Safety
// `view1` and `view2` must hold `image_size² · 3` floats; `loss` must be valid.
enum CrocoStatus croco_model_loss(const struct CrocoModel *model,
                                  const float *view1,
                                  const float *view2,
                                  double mask_ratio,
                                  uint64_t seed,
                                  double *loss);

// Writes the reconstruction composite (prediction at masked patches, input
// elsewhere) into `composite`.
//
// # Safety
// All image buffers must hold `image_size² · 3` floats.
enum CrocoStatus croco_model_reconstruct(const struct CrocoModel *model,
                                         const float *view1,
                                         const float *view2,
                                         double mask_ratio,
                                         uint64_t seed,
                                         float *composite);

// Number of masked tokens out of `n` at ratio `r`.
size_t croco_masked_count(size_t n, double r);

// Parameter count and forward FLOPs (both encoder passes) of the ViT-Base
// configuration with the chosen decoder.
//
// # Safety
// Outputs may be null.
enum CrocoStatus croco_base_counts(bool catblock, uint64_t *params, uint64_t *flops);

// Average endpoint error of two `height × width × 2` flow fields.
//
// # Safety
// `pred` and `gt` must hold `height · width · 2` floats; `out` must be valid.
enum CrocoStatus croco_aepe(const float *pred,
                            const float *gt,
                            size_t height,
                            size_t width,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CROCO_H */
