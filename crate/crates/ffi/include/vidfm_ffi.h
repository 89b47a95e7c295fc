/* C interface for the vidfm video/text encoders. */

#ifndef VIDFM_FFI_H
#define VIDFM_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible call.
typedef enum VfmStatus {
  VfmStatus_Ok = 0,
  VfmStatus_NullArgument = 1,
  VfmStatus_Io = 2,
  VfmStatus_Parse = 3,
  VfmStatus_Shape = 4,
  VfmStatus_Runtime = 5,
  VfmStatus_BufferTooSmall = 6,
  VfmStatus_Unsupported = 7,
} VfmStatus;

// Opaque model handle: checkpoint parameters plus the configs and
// vocabulary recovered from the checkpoint snapshot.
typedef struct VfmModel VfmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent error on this thread. Valid until the next
// failing call on the same thread.
const char *vfm_last_error(void);

// Load a checkpoint file into a model handle. On success `*out` owns the
// model; release it with `vfm_model_free`.
//
// # Safety
// `path` must be a valid NUL-terminated string; `out` must be valid for a
// pointer write.
enum VfmStatus vfm_model_load(const char *path, struct VfmModel **out);

// Release a model handle. Passing NULL is a no-op.
//
// # Safety
// `model` must have come from `vfm_model_load` and not be freed twice.
void vfm_model_free(struct VfmModel *model);

// Embedding dimensionality of the video tower (also the token feature
// width). Returns 0 for NULL handles.
//
// # Safety
// `model` must be a live handle from `vfm_model_load`.
uintptr_t vfm_embed_dim(const struct VfmModel *model);

// Training step stored in the checkpoint.
//
// # Safety
// `model` must be a live handle from `vfm_model_load`.
uint64_t vfm_model_step(const struct VfmModel *model);

// Token count the encoder produces for a full-visibility clip at the
// model's native frame count.
//
// # Safety
// `model` must be a live handle from `vfm_model_load`.
uintptr_t vfm_token_count(const struct VfmModel *model);

// Pooled, L2-normalized video embedding of one clip (`t*h*w*c` raw u8
// pixels, frame-major). Requires a checkpoint that carries the MAP head
// (stage-1 or LiT). `out` receives `vfm_embed_dim` floats.
//
// # Safety
// `model` must be live; `frames` must hold `t*h*w*c` bytes; `out` must
// hold `out_len` floats.
enum VfmStatus vfm_embed_video(const struct VfmModel *model,
                               const uint8_t *frames,
                               uintptr_t t,
                               uintptr_t h,
                               uintptr_t w,
                               uintptr_t c,
                               float *out,
                               uintptr_t out_len);

// Merged encoder token features of one clip in canonical temporal-major
// order: `t * h/patch_h * w/patch_w` rows of `vfm_embed_dim` floats.
// Works for any checkpoint with an encoder (stage-1, stage-2, LiT).
//
// # Safety
// As `vfm_embed_video`; `out` must hold `out_len` floats.
enum VfmStatus vfm_token_features(const struct VfmModel *model,
                                  const uint8_t *frames,
                                  uintptr_t t,
                                  uintptr_t h,
                                  uintptr_t w,
                                  uintptr_t c,
                                  float *out,
                                  uintptr_t out_len);

// Pooled, L2-normalized text embedding of a caption. Requires a
// checkpoint carrying the text tower and vocabulary (stage-1 or LiT).
//
// # Safety
// `model` must be live; `caption` NUL-terminated; `out` must hold
// `out_len` floats.
enum VfmStatus vfm_embed_text(const struct VfmModel *model,
                              const char *caption,
                              float *out,
                              uintptr_t out_len);

// Cosine similarity between two embeddings of equal length.
//
// # Safety
// `a` and `b` must hold `len` floats; `out` must be valid for a write.
enum VfmStatus vfm_similarity(const float *a, const float *b, uintptr_t len, float *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* VIDFM_FFI_H */
