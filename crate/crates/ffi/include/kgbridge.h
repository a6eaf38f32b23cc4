#ifndef KGBRIDGE_H
#define KGBRIDGE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KgbStatus {
  KGB_STATUS_OK = 0,
  KGB_STATUS_NULL_POINTER = 1,
  KGB_STATUS_INVALID_ARGUMENT = 2,
  KGB_STATUS_IO = 3,
  KGB_STATUS_PARSE = 4,
  KGB_STATUS_CHECKPOINT = 5,
  KGB_STATUS_NUMERIC = 6,
  KGB_STATUS_LOOKUP = 7,
  KGB_STATUS_BUFFER_TOO_SMALL = 8,
  KGB_STATUS_PANIC = 99,
} KgbStatus;

// A loaded training checkpoint.
typedef struct KgbModel KgbModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call on the same thread.
const char *kgb_last_error(void);

// Library version as a static NUL-terminated string.
const char *kgb_version(void);

// Loads a checkpoint directory into `*out`.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` a valid pointer.
enum KgbStatus kgb_model_load(const char *dir, struct KgbModel **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from [`kgb_model_load`] and not be used afterwards.
void kgb_model_free(struct KgbModel *model);

// Number of items; valid item indices are `1..=n`.
//
// # Safety
// `model` must be a live handle or null.
size_t kgb_model_num_items(const struct KgbModel *model);

// # Safety
// `model` must be a live handle or null.
size_t kgb_model_dim(const struct KgbModel *model);

// Index of `item` from `domain` in the model vocabulary, written to `*out`.
//
// # Safety
// Strings must be NUL-terminated; `out` must be valid.
enum KgbStatus kgb_model_item_index(const struct KgbModel *model,
                                    const char *domain,
                                    const char *item,
                                    size_t *out);

// Next-item logits for a context of item indices (oldest first).
// `scores` must hold `kgb_model_num_items` values; slot `i` scores item `i + 1`.
//
// # Safety
// `context` must point to `context_len` indices and `scores` to
// `scores_len` floats.
enum KgbStatus kgb_model_score(const struct KgbModel *model,
                               const size_t *context,
                               size_t context_len,
                               float *scores,
                               size_t scores_len);

// Recall@k and NDCG@k from 1-based target ranks.
//
// # Safety
// `ranks` must point to `n` values; outputs must be valid.
enum KgbStatus kgb_metrics(const size_t *ranks, size_t n, size_t k, double *recall, double *ndcg);

// Contrastive disentanglement loss between two row-major `rows × cols` banks.
//
// # Safety
// Both banks must point to `rows * cols` doubles; `out` must be valid.
enum KgbStatus kgb_disentanglement_loss(const double *shared,
                                        const double *spec,
                                        size_t rows,
                                        size_t cols,
                                        double tau,
                                        double *out);

// Runs the full pipeline for a config file. A non-null `out_dir`
// replaces the configured output directory.
//
// # Safety
// Strings must be NUL-terminated; `out_dir` may be null.
enum KgbStatus kgb_run_experiment(const char *config, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KGBRIDGE_H */
