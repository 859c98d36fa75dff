#ifndef CASNET_H
#define CASNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Embedding sources accepted by [`casnet_separate`].
typedef enum CasnetEmbeddingSource {
  // The mixture itself; `aux` is ignored.
  CASNET_EMBEDDING_SOURCE_SAME = 0,
  // The auxiliary recording passed in `aux`.
  CASNET_EMBEDDING_SOURCE_AUX = 1,
  CASNET_EMBEDDING_SOURCE_ALL_ONES = 2,
  CASNET_EMBEDDING_SOURCE_GAUSSIAN = 3,
  CASNET_EMBEDDING_SOURCE_NO_FILM = 4,
} CasnetEmbeddingSource;

// Result codes.
typedef enum CasnetStatus {
  CASNET_STATUS_OK = 0,
  CASNET_STATUS_NULL_POINTER = 1,
  CASNET_STATUS_INVALID_ARGUMENT = 2,
  CASNET_STATUS_IO = 3,
  CASNET_STATUS_CHECKPOINT = 4,
  CASNET_STATUS_INTERNAL = 5,
} CasnetStatus;

// Opaque model handle.
typedef struct CasnetModel CasnetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread, or an empty string.
// The pointer stays valid until the next call into this library on the
// same thread.
const char *casnet_last_error(void);

// Library version as a static NUL-terminated string.
const char *casnet_version(void);

// Loads a checkpoint written by the `casnet` tool.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CasnetStatus casnet_model_load(const char *path, struct CasnetModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from [`casnet_model_load`] and not be used afterwards.
void casnet_model_free(struct CasnetModel *model);

// Number of separated sources, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t casnet_model_num_sources(const struct CasnetModel *model);

// 1 when the model has a channel encoder, 0 otherwise or for null.
//
// # Safety
// `model` must be null or a live handle.
int32_t casnet_model_has_channel_encoder(const struct CasnetModel *model);

// Separates `mixture[0..len]` into `out`, laid out source-major
// (`out[s * len + t]`), which must hold `num_sources * len` values.
// `aux` is read only for [`CasnetEmbeddingSource::Aux`]; `seed` drives
// the Gaussian embedding.
//
// # Safety
// Pointers must be valid for the stated lengths.
enum CasnetStatus casnet_separate(const struct CasnetModel *model,
                                  const double *mixture,
                                  size_t len,
                                  int32_t source,
                                  const double *aux,
                                  size_t aux_len,
                                  uint64_t seed,
                                  double *out,
                                  size_t out_len);

// Scale-invariant SNR in dB of `est` against `target`, both of length `len`.
//
// # Safety
// Pointers must be valid for `len` values; `out_db` for one.
enum CasnetStatus casnet_si_snr(const double *est,
                                const double *target,
                                size_t len,
                                double *out_db);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CASNET_H */
