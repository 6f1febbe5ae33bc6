#ifndef WSOL_H
#define WSOL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum WsolStatus {
  WSOL_STATUS_OK = 0,
  // Null pointer, wrong buffer length or out-of-range value.
  WSOL_STATUS_INVALID_ARGUMENT = 1,
  WSOL_STATUS_IO = 2,
  // Malformed checkpoint or image file.
  WSOL_STATUS_FORMAT = 3,
  // Input does not match the model.
  WSOL_STATUS_SHAPE = 4,
  WSOL_STATUS_CONFIG = 5,
  // A Rust panic was caught at the boundary.
  WSOL_STATUS_INTERNAL = 6,
} WsolStatus;

// Localization map method.
typedef enum WsolMethod {
  // Attention rollout, class-agnostic.
  WSOL_METHOD_AR = 0,
  // Gradient-weighted attention rollout.
  WSOL_METHOD_GAR = 1,
} WsolMethod;

// Opaque loaded model.
typedef struct WsolModel WsolModel;

typedef struct WsolModelInfo {
  size_t image_size;
  size_t channels;
  size_t patch_size;
  size_t depth;
  size_t embed_dim;
  size_t heads;
  size_t num_classes;
  // Side of the patch grid, and of the raw map.
  size_t grid_size;
} WsolModelInfo;

// Half-open pixel box `[x0, x1) × [y0, y1)`.
typedef struct WsolBox {
  size_t x0;
  size_t y0;
  size_t x1;
  size_t y1;
} WsolBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer stays
// valid until the next call on the same thread.
const char *wsol_last_error(void);

// Library version as a static NUL-terminated string.
const char *wsol_version(void);

// Loads a checkpoint. On success `*out` owns the model; release it with
// `wsol_model_free`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum WsolStatus wsol_model_load(const char *path, struct WsolModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from `wsol_model_load` and not be used afterwards.
void wsol_model_free(struct WsolModel *model);

// # Safety
// `model` and `info` must be valid pointers.
enum WsolStatus wsol_model_info(const struct WsolModel *model, struct WsolModelInfo *info);

// Eval-mode forward pass. Writes `num_classes` logits and the argmax class.
//
// # Safety
// `pixels` must hold `pixels_len` values and `logits` `logits_len` values;
// `predicted` may be null.
enum WsolStatus wsol_model_classify(const struct WsolModel *model,
                                    const double *pixels,
                                    size_t pixels_len,
                                    double *logits,
                                    size_t logits_len,
                                    size_t *predicted);

// Localization map upsampled to the image and min-max normalized to `[0, 1]`.
// `target_class < 0` targets the predicted class; AR ignores the class.
//
// # Safety
// `pixels` must hold `pixels_len` values and `map` `map_len` values
// (`image_size²`); `predicted` may be null.
enum WsolStatus wsol_model_localization_map(const struct WsolModel *model,
                                            const double *pixels,
                                            size_t pixels_len,
                                            enum WsolMethod method,
                                            int64_t target_class,
                                            double *map,
                                            size_t map_len,
                                            size_t *predicted);

// Box of the largest 4-connected component of `map > tau`. `*found` is false
// when the mask is empty.
//
// # Safety
// `map` must hold `width·height` values; `out` and `found` must be valid.
enum WsolStatus wsol_box_from_map(const double *map,
                                  size_t width,
                                  size_t height,
                                  double tau,
                                  struct WsolBox *out,
                                  bool *found);

// Intersection over union of two half-open boxes.
//
// # Safety
// All pointers must be valid.
enum WsolStatus wsol_iou(const struct WsolBox *a, const struct WsolBox *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WSOL_H */
