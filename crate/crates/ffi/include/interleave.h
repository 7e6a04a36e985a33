#ifndef INTERLEAVE_H
#define INTERLEAVE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum IlStatus {
  IL_STATUS_OK = 0,
  IL_STATUS_NULL_ARGUMENT = 1,
  IL_STATUS_DIMENSION = 2,
  IL_STATUS_INPUT = 3,
  IL_STATUS_CONFIG = 4,
  IL_STATUS_CONTRACT = 5,
  IL_STATUS_CHECKPOINT = 6,
  IL_STATUS_IO = 7,
  IL_STATUS_FORMAT = 8,
  /**
   * Output buffer too small; the required size has been written.
   */
  IL_STATUS_BUFFER_TOO_SMALL = 9,
  IL_STATUS_PANIC = 10,
} IlStatus;

/**
 * Space-to-channel codec with its tokenizer.
 */
typedef struct IlCodec IlCodec;

/**
 * A trained model loaded from a checkpoint.
 */
typedef struct IlModel IlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *il_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *il_version(void);

/**
 * # Safety
 * `out` must be valid for a pointer write.
 */
enum IlStatus il_codec_new(size_t r_t,
                           size_t r_h,
                           size_t r_w,
                           uint64_t mix_seed,
                           struct IlCodec **out);

/**
 * # Safety
 * `codec` must come from [`il_codec_new`] and not be used afterwards.
 */
void il_codec_free(struct IlCodec *codec);

/**
 * Channels per vision token.
 *
 * # Safety
 * `codec` must be a live handle or null.
 */
size_t il_codec_token_width(const struct IlCodec *codec);

/**
 * Token grid `(t, h, w)` of a clip of `frames × height × width` pixels.
 *
 * # Safety
 * `codec` must be a live handle; `grid` must hold three elements.
 */
enum IlStatus il_codec_token_grid(const struct IlCodec *codec,
                                  size_t frames,
                                  size_t height,
                                  size_t width,
                                  size_t *grid);

/**
 * Tokenize `frames × height × width × 3` pixels (row-major, in [-1, 1])
 * into row-major tokens.
 *
 * # Safety
 * `pixels` must hold `frames*height*width*3` floats; `tokens` must hold
 * `cap` floats; `out_len` must be writable.
 */
enum IlStatus il_codec_tokenize(const struct IlCodec *codec,
                                const float *pixels,
                                size_t frames,
                                size_t height,
                                size_t width,
                                float *tokens,
                                size_t cap,
                                size_t *out_len);

/**
 * Inverse of [`il_codec_tokenize`] for a token grid `(t, h, w)`.
 *
 * # Safety
 * `tokens` must hold `t*h*w*token_width` floats; `pixels` must hold `cap`
 * floats; `out_len` must be writable.
 */
enum IlStatus il_codec_detokenize(const struct IlCodec *codec,
                                  const float *tokens,
                                  size_t t,
                                  size_t h,
                                  size_t w,
                                  float *pixels,
                                  size_t cap,
                                  size_t *out_len);

/**
 * First-fit-decreasing packing: writes the bin of each document to
 * `bins[i]` and the bin count to `out_bins`.
 *
 * # Safety
 * `lengths` and `bins` must each hold `n` elements.
 */
enum IlStatus il_pack(const size_t *lengths,
                      size_t n,
                      size_t budget,
                      size_t *bins,
                      size_t *out_bins);

/**
 * Lower bound on the bins any packing of `lengths` needs.
 *
 * # Safety
 * `lengths` must hold `n` elements.
 */
size_t il_pack_lower_bound(const size_t *lengths, size_t n, size_t budget);

/**
 * Load a checkpoint written by `interleave train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum IlStatus il_model_load(const char *path, struct IlModel **out);

/**
 * # Safety
 * `model` must come from [`il_model_load`] and not be used afterwards.
 */
void il_model_free(struct IlModel *model);

/**
 * Training step count stored in the checkpoint.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
uint64_t il_model_step(const struct IlModel *model);

/**
 * Generate from a prompt such as `"red square left"` and write the clip as
 * `frames × height × width × 3` floats in [0, 1]. `steps` of 0 and a
 * negative `cfg_scale` keep the checkpoint's sampler settings.
 *
 * # Safety
 * `prompt` must be NUL-terminated; `pixels` must hold `cap` floats; `shape`
 * must hold four elements; `out_len` must be writable.
 */
enum IlStatus il_model_sample_prompt(const struct IlModel *model,
                                     const char *prompt,
                                     uint64_t seed,
                                     size_t steps,
                                     double cfg_scale,
                                     float *pixels,
                                     size_t cap,
                                     size_t *shape,
                                     size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INTERLEAVE_H */
