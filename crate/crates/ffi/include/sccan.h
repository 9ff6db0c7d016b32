#ifndef SCCAN_H
#define SCCAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SccanStatus {
  SCCAN_STATUS_OK = 0,
  SCCAN_STATUS_NULL_POINTER = 1,
  // Shapes, window sizes or other arguments that do not fit together.
  SCCAN_STATUS_INVALID_ARGUMENT = 2,
  SCCAN_STATUS_IO = 3,
  SCCAN_STATUS_FORMAT = 4,
  SCCAN_STATUS_CONFIG = 5,
  // A non-finite value appeared during computation.
  SCCAN_STATUS_NUMERICAL = 6,
  // An internal invariant broke; the message has details.
  SCCAN_STATUS_INTERNAL = 7,
} SccanStatus;

// Query, support shots and masks for one episode.
typedef struct SccanEpisode SccanEpisode;

// Trained model with its parameters.
typedef struct SccanModel SccanModel;

// Dense `f64` tensor, row-major.
typedef struct SccanTensor SccanTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call into the library on this thread.
const char *sccan_last_error(void);

// Library version as a static NUL-terminated string.
const char *sccan_version(void);

// Copies `data` (`numel` = product of `shape`) into a new tensor.
//
// # Safety
// `shape` must point to `rank` values and `data` to their product.
enum SccanStatus sccan_tensor_new(const size_t *shape,
                                  size_t rank,
                                  const double *data,
                                  struct SccanTensor **out);

// # Safety
// `t` must be null or a handle from this library not yet freed.
void sccan_tensor_free(struct SccanTensor *t);

// # Safety
// `t` must be a live handle.
size_t sccan_tensor_rank(const struct SccanTensor *t);

// # Safety
// `t` must be a live handle.
size_t sccan_tensor_numel(const struct SccanTensor *t);

// Writes the shape into `out`, which must hold `rank` values.
//
// # Safety
// `t` must be a live handle and `out` must have room for `cap` values.
enum SccanStatus sccan_tensor_shape(const struct SccanTensor *t, size_t *out, size_t cap);

// Borrowed view of the values, valid while the handle lives.
//
// # Safety
// `t` must be a live handle.
const double *sccan_tensor_data(const struct SccanTensor *t);

// # Safety
// `path` must be a NUL-terminated string.
enum SccanStatus sccan_tensor_load(const char *path, struct SccanTensor **out);

// Writes the tensor in `f64` unless `f32` is nonzero.
//
// # Safety
// `t` must be a live handle and `path` a NUL-terminated string.
enum SccanStatus sccan_tensor_save(const struct SccanTensor *t, const char *path, int32_t f32);

// Aggregated pseudo mask (`1×H×W`, in `[0, 1]`) from `C×H×W` query and
// support features and a `1×H×W` binary support mask.
//
// # Safety
// Inputs must be live handles.
enum SccanStatus sccan_pma_aggregated(const struct SccanTensor *fq,
                                      const struct SccanTensor *fs,
                                      const struct SccanTensor *ms,
                                      struct SccanTensor **out);

// Max-similarity prior with the same inputs and output as [`sccan_pma_aggregated`].
//
// # Safety
// Inputs must be live handles.
enum SccanStatus sccan_pma_max_similarity(const struct SccanTensor *fq,
                                          const struct SccanTensor *fs,
                                          const struct SccanTensor *ms,
                                          struct SccanTensor **out);

// 1 where `t >= threshold`, else 0.
//
// # Safety
// `t` must be a live handle.
enum SccanStatus sccan_binarize(const struct SccanTensor *t,
                                double threshold,
                                struct SccanTensor **out);

// Dice loss between a foreground probability map and a binary mask.
//
// # Safety
// Inputs must be live handles.
enum SccanStatus sccan_dice_loss(const struct SccanTensor *pred,
                                 const struct SccanTensor *gt,
                                 double smooth,
                                 double *out);

// Foreground IoU of two binary masks. `defined` is set to 0 when both are empty.
//
// # Safety
// Inputs must be live handles.
enum SccanStatus sccan_mask_iou(const struct SccanTensor *pred,
                                const struct SccanTensor *gt,
                                double *out,
                                int32_t *defined);

// Ratio of SCCA attention-core FLOPs to window self-attention FLOPs per block.
//
// # Safety
// `out` must be a valid pointer.
enum SccanStatus sccan_cost_ratio(size_t height,
                                  size_t width,
                                  size_t window,
                                  size_t dim,
                                  size_t heads,
                                  double *out);

// Reads an episode directory.
//
// # Safety
// `dir` must be a NUL-terminated string.
enum SccanStatus sccan_episode_load(const char *dir, struct SccanEpisode **out);

// Generates a synthetic episode with default settings except the map size.
//
// # Safety
// `out` must be a valid pointer.
enum SccanStatus sccan_episode_synth(uint64_t seed,
                                     size_t channels,
                                     size_t height,
                                     size_t width,
                                     struct SccanEpisode **out);

// # Safety
// `ep` must be null or a handle from this library not yet freed.
void sccan_episode_free(struct SccanEpisode *ep);

// Copy of the episode's `1×H×W` query ground truth.
//
// # Safety
// `ep` must be a live handle.
enum SccanStatus sccan_episode_query_mask(const struct SccanEpisode *ep, struct SccanTensor **out);

// Query IoU of the aggregated and max-similarity pseudo masks at `threshold`.
// Needs an episode with high-level features.
//
// # Safety
// `ep` must be a live handle.
enum SccanStatus sccan_episode_pma_iou(const struct SccanEpisode *ep,
                                       double threshold,
                                       double *aggregated,
                                       double *max_similarity);

// Loads a checkpoint directory written by `sccan train`.
//
// # Safety
// `dir` must be a NUL-terminated string.
enum SccanStatus sccan_model_load(const char *dir, struct SccanModel **out);

// # Safety
// `m` must be null or a handle from this library not yet freed.
void sccan_model_free(struct SccanModel *m);

// `2×H×W` probabilities (background, foreground) for the episode's query.
// When `mask` is not null it also receives the binary `1×H×W` prediction.
//
// # Safety
// `m` and `ep` must be live handles.
enum SccanStatus sccan_model_predict(const struct SccanModel *m,
                                     const struct SccanEpisode *ep,
                                     struct SccanTensor **probs,
                                     struct SccanTensor **mask);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCCAN_H */
