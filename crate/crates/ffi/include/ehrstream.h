#ifndef EHRSTREAM_H
#define EHRSTREAM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every function in this library.
 */
typedef enum EhrStatus {
  EHR_STATUS_OK = 0,
  EHR_STATUS_NULL_POINTER = 1,
  EHR_STATUS_INVALID_UTF8 = 2,
  EHR_STATUS_BUFFER_TOO_SMALL = 3,
  EHR_STATUS_INVALID_ARGUMENT = 4,
  EHR_STATUS_IO = 5,
  EHR_STATUS_FORMAT = 6,
  EHR_STATUS_CONFIG_MISMATCH = 7,
  EHR_STATUS_CACHE_MISS = 8,
  EHR_STATUS_DEGENERATE_LABELS = 9,
  EHR_STATUS_SHAPE_MISMATCH = 10,
  EHR_STATUS_PANIC = 11,
  EHR_STATUS_OTHER = 99,
} EhrStatus;

/**
 * A loaded model checkpoint.
 */
typedef struct EhrCheckpoint EhrCheckpoint;

/**
 * Text pre-embedding source.
 */
typedef struct EhrProvider EhrProvider;

/**
 * Shape summary of a checkpoint.
 */
typedef struct EhrModelInfo {
  size_t layers;
  size_t hidden;
  size_t heads;
  size_t ffn_dim;
  size_t max_seq_len;
  uint32_t window_minutes;
  size_t pre_dim;
  /**
   * 0 for a pre-training checkpoint, else the task head width.
   */
  size_t task_out_dim;
  size_t n_features;
  size_t n_values;
  size_t n_tensors;
  size_t n_scalars;
} EhrModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or null. The pointer stays
 * valid until the next call into this library on the same thread.
 */
const char *ehr_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ehr_version(void);

/**
 * Deterministic hash-seeded provider.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage.
 */
enum EhrStatus ehr_provider_stub(size_t dim, uint64_t seed, struct EhrProvider **out);

/**
 * Provider backed by an embedding cache file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum EhrStatus ehr_provider_open_cache(const char *path, struct EhrProvider **out);

/**
 * Vector width of the provider, 0 for a null handle.
 *
 * # Safety
 * `provider` must be null or a live handle.
 */
size_t ehr_provider_dim(const struct EhrProvider *provider);

/**
 * Writes the pre-embedding of `text` into `buf`, which must hold `len >= dim`
 * floats.
 *
 * # Safety
 * `provider` must be a live handle, `text` NUL-terminated and `buf` valid
 * for `len` writes.
 */
enum EhrStatus ehr_provider_embed(const struct EhrProvider *provider,
                                  const char *text,
                                  float *buf,
                                  size_t len);

/**
 * # Safety
 * `provider` must be null or a handle not yet freed.
 */
void ehr_provider_free(struct EhrProvider *provider);

/**
 * Loads and validates a checkpoint file.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum EhrStatus ehr_checkpoint_load(const char *path, struct EhrCheckpoint **out);

/**
 * Writes the checkpoint back to disk atomically.
 *
 * # Safety
 * `ckpt` must be a live handle and `path` NUL-terminated.
 */
enum EhrStatus ehr_checkpoint_save(const struct EhrCheckpoint *ckpt, const char *path);

/**
 * # Safety
 * `ckpt` must be a live handle and `out` writable.
 */
enum EhrStatus ehr_checkpoint_info(const struct EhrCheckpoint *ckpt, struct EhrModelInfo *out);

/**
 * # Safety
 * `ckpt` must be null or a handle not yet freed.
 */
void ehr_checkpoint_free(struct EhrCheckpoint *ckpt);

/**
 * Area under the ROC curve; labels are 0 or non-zero.
 *
 * # Safety
 * `scores` and `labels` must be valid for `n` reads, `out` for one write.
 */
enum EhrStatus ehr_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Area under the precision-recall curve.
 *
 * # Safety
 * As for [`ehr_auroc`].
 */
enum EhrStatus ehr_auprc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Mean absolute error.
 *
 * # Safety
 * `preds` and `targets` must be valid for `n` reads, `out` for one write.
 */
enum EhrStatus ehr_mae(const double *preds, const double *targets, size_t n, double *out);

/**
 * Combined pre-training loss from its per-term means and value-slot counts.
 * A term with a zero count contributes nothing.
 *
 * # Safety
 * `out` must be valid for one write.
 */
enum EhrStatus ehr_mlvm_total_loss(double l_f,
                                   double l_cat,
                                   size_t n_cat,
                                   double l_cont,
                                   size_t n_cont,
                                   double alpha,
                                   double beta,
                                   double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EHRSTREAM_H */
