#ifndef LIGHTGC2N_H
#define LIGHTGC2N_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum Lgc2nStatus {
  LGC2N_STATUS_OK = 0,
  LGC2N_STATUS_NULL_POINTER = 1,
  LGC2N_STATUS_INVALID_STRING = 2,
  LGC2N_STATUS_CONFIG = 3,
  LGC2N_STATUS_DATA = 4,
  LGC2N_STATUS_DIVERGENCE = 5,
  LGC2N_STATUS_INCOMPATIBLE = 6,
  LGC2N_STATUS_BUFFER_SIZE = 7,
  LGC2N_STATUS_PANIC = 8,
} Lgc2nStatus;

/**
 * Run configuration; starts at the library defaults.
 */
typedef struct Lgc2nConfig Lgc2nConfig;

/**
 * A split dataset together with its interaction graph.
 */
typedef struct Lgc2nDataset Lgc2nDataset;

typedef struct Lgc2nModel Lgc2nModel;

typedef struct Lgc2nDatasetShape {
  size_t items;
  size_t accounts;
  size_t train_sequences;
  size_t test_sequences;
} Lgc2nDatasetShape;

typedef struct Lgc2nMetrics {
  double recall_5;
  double recall_20;
  double mrr_5;
  double mrr_20;
  size_t evaluated;
} Lgc2nMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a
 * success. Valid until the next call into the library from this thread.
 */
const char *lgc2n_last_error(void);

struct Lgc2nConfig *lgc2n_config_new(void);

/**
 * Sets one configuration key, using the same names as the CLI config file.
 *
 * # Safety
 * `config` must come from [`lgc2n_config_new`]; `key` and `value` must be
 * nul-terminated strings.
 */
enum Lgc2nStatus lgc2n_config_set(struct Lgc2nConfig *config, const char *key, const char *value);

/**
 * # Safety
 * `config` must come from [`lgc2n_config_new`] or be null.
 */
void lgc2n_config_free(struct Lgc2nConfig *config);

/**
 * Generates and splits the synthetic dataset described by `config`.
 *
 * # Safety
 * `config` must be a live config handle and `out` a writable pointer.
 */
enum Lgc2nStatus lgc2n_dataset_synthetic(const struct Lgc2nConfig *config,
                                         struct Lgc2nDataset **out);

/**
 * Loads and splits an interaction log.
 *
 * # Safety
 * `config` must be a live config handle, `path` a nul-terminated string and
 * `out` a writable pointer.
 */
enum Lgc2nStatus lgc2n_dataset_load(const struct Lgc2nConfig *config,
                                    const char *path,
                                    struct Lgc2nDataset **out);

/**
 * # Safety
 * `dataset` must be a live dataset handle and `out` writable.
 */
enum Lgc2nStatus lgc2n_dataset_shape(const struct Lgc2nDataset *dataset,
                                     struct Lgc2nDatasetShape *out);

/**
 * # Safety
 * `dataset` must come from this library or be null.
 */
void lgc2n_dataset_free(struct Lgc2nDataset *dataset);

/**
 * Builds a model from `config` and trains it on the training split.
 *
 * # Safety
 * `config` and `dataset` must be live handles and `out` writable.
 */
enum Lgc2nStatus lgc2n_model_train(const struct Lgc2nConfig *config,
                                   const struct Lgc2nDataset *dataset,
                                   struct Lgc2nModel **out);

/**
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
enum Lgc2nStatus lgc2n_model_load(const char *path, struct Lgc2nModel **out);

/**
 * # Safety
 * `model` must be a live model handle and `path` a nul-terminated string.
 */
enum Lgc2nStatus lgc2n_model_save(const struct Lgc2nModel *model, const char *path);

/**
 * # Safety
 * `model` must be a live model handle and `out` writable.
 */
enum Lgc2nStatus lgc2n_model_parameter_count(const struct Lgc2nModel *model, size_t *out);

/**
 * Full-ranking metrics on the test split of `dataset`.
 *
 * # Safety
 * `model` and `dataset` must be live handles and `out` writable.
 */
enum Lgc2nStatus lgc2n_model_evaluate(const struct Lgc2nModel *model,
                                      const struct Lgc2nDataset *dataset,
                                      struct Lgc2nMetrics *out);

/**
 * Next-item logits for sequence `index` of `dataset`, written to `scores`,
 * which must hold exactly one value per item. Higher ranks first.
 *
 * # Safety
 * `model` and `dataset` must be live handles and `scores` must point to
 * `len` writable doubles.
 */
enum Lgc2nStatus lgc2n_model_scores(const struct Lgc2nModel *model,
                                    const struct Lgc2nDataset *dataset,
                                    size_t index,
                                    double *scores,
                                    size_t len);

/**
 * # Safety
 * `model` must come from this library or be null.
 */
void lgc2n_model_free(struct Lgc2nModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LIGHTGC2N_H */
