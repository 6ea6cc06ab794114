#ifndef CELSR_H
#define CELSR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum CelsrStatus {
  CELSR_STATUS_OK = 0,
  CELSR_STATUS_NULL_POINTER = 1,
  CELSR_STATUS_INVALID_ARGUMENT = 2,
  CELSR_STATUS_INVALID_SHAPE = 3,
  CELSR_STATUS_IO = 4,
  CELSR_STATUS_CONFIG = 5,
  CELSR_STATUS_ENVIRONMENT = 6,
  CELSR_STATUS_RUNTIME = 7,
  // A bug inside the library; the handle involved should be discarded.
  CELSR_STATUS_PANIC = 8,
} CelsrStatus;

// A degradation pipeline with its own random stream.
typedef struct CelsrDegrader CelsrDegrader;

// Super-resolution generator weights.
typedef struct CelsrGenerator CelsrGenerator;

// Frame-by-frame super-resolution over one clip. Output lags the input by
// one frame; [`celsr_stream_finish`] flushes the last one.
typedef struct CelsrStream CelsrStream;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *celsr_version(void);

// Description of the last failure on this thread, or null. Valid until the
// next call into the library from the same thread.
const char *celsr_last_error(void);

// Loads generator weights from a safetensors file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CelsrStatus celsr_generator_load(const char *path, struct CelsrGenerator **out);

// Number of trainable parameters.
//
// # Safety
// `gen` must come from [`celsr_generator_load`] and not be freed.
enum CelsrStatus celsr_generator_param_count(const struct CelsrGenerator *gen, size_t *out);

// # Safety
// `gen` must be null or come from [`celsr_generator_load`]; streams created
// from it must be freed first.
void celsr_generator_free(struct CelsrGenerator *gen);

// Starts a stream on `gen`, which must outlive the stream.
//
// # Safety
// `gen` must come from [`celsr_generator_load`] and `out` be valid.
enum CelsrStatus celsr_stream_new(const struct CelsrGenerator *gen, struct CelsrStream **out);

// Feeds one `height x width` frame. When an SR frame becomes available it
// is written to `out` (`16 * height * width * 3` bytes) and `*ready` is 1.
//
// # Safety
// `rgb` must hold `height * width * 3` bytes, `out` `out_len` bytes.
enum CelsrStatus celsr_stream_push(struct CelsrStream *stream,
                                   const uint8_t *rgb,
                                   size_t height,
                                   size_t width,
                                   uint8_t *out,
                                   size_t out_len,
                                   int32_t *ready);

// Flushes the final SR frame, if any.
//
// # Safety
// As for [`celsr_stream_push`].
enum CelsrStatus celsr_stream_finish(struct CelsrStream *stream,
                                     uint8_t *out,
                                     size_t out_len,
                                     int32_t *ready);

// # Safety
// `stream` must be null or come from [`celsr_stream_new`].
void celsr_stream_free(struct CelsrStream *stream);

// NIQE of one frame (lower is better); frames must be at least 96 pixels
// on each side.
//
// # Safety
// `rgb` must hold `height * width * 3` bytes and `score` be valid.
enum CelsrStatus celsr_niqe(const uint8_t *rgb, size_t height, size_t width, double *score);

// Builds a degrader from a TOML pipeline config (null for the default).
// The same seed and call sequence reproduce the same outputs.
//
// # Safety
// `config_toml` must be null or NUL-terminated; `out` must be valid.
enum CelsrStatus celsr_degrader_new(const char *config_toml,
                                    uint64_t seed,
                                    struct CelsrDegrader **out);

// Degrades `frames` consecutive `height x width` frames (both divisible
// by 4) with a fresh draw, writing `frames * (height/4) * (width/4) * 3`
// bytes to `out`.
//
// # Safety
// `rgb` must hold `frames * height * width * 3` bytes, `out` `out_len`.
enum CelsrStatus celsr_degrade(struct CelsrDegrader *deg,
                               const uint8_t *rgb,
                               size_t frames,
                               size_t height,
                               size_t width,
                               uint8_t *out,
                               size_t out_len);

// # Safety
// `deg` must be null or come from [`celsr_degrader_new`].
void celsr_degrader_free(struct CelsrDegrader *deg);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CELSR_H */
