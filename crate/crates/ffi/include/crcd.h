#ifndef CRCD_H
#define CRCD_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#define CRCD_OK 0

#define CRCD_ERR_CONFIG 1

#define CRCD_ERR_SCHEMA 2

#define CRCD_ERR_USAGE 3

#define CRCD_ERR_DEGENERATE_INPUT 4

#define CRCD_ERR_DEGENERATE_RELATION 5

#define CRCD_ERR_NUMERICAL 6

#define CRCD_ERR_WARM_UP 7

#define CRCD_ERR_INGESTION 8

#define CRCD_ERR_IO 9

#define CRCD_ERR_JSON 10

#define CRCD_ERR_NULL_POINTER 11

#define CRCD_ERR_INVALID_UTF8 12

#define CRCD_ERR_PANIC 13

#define CRCD_POLICY_QUEUE 0

#define CRCD_POLICY_RANDOM 1

#define CRCD_BASELINE_TRIPLET 0

#define CRCD_BASELINE_LOGISTIC 1

#define CRCD_BASELINE_INFONCE 2

/**
 * Opaque parsed run configuration.
 */
typedef struct CrcdConfig CrcdConfig;

/**
 * Opaque replay queue.
 */
typedef struct CrcdQueue CrcdQueue;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next call into this library from the same thread.
 */
const char *crcd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *crcd_version(void);

/**
 * Relation contrastive loss from critic scores.
 *
 * `positive` holds `m` scores in (0, 1]; `negative` is row-major `m × n`.
 * `out_saturations` may be null.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
int32_t crcd_relation_contrastive_loss(const double *positive,
                                       const double *negative,
                                       size_t m,
                                       size_t n,
                                       bool literal_n,
                                       double *out_loss,
                                       size_t *out_saturations);

/**
 * Soft-target loss `ρ² · mean CE(softmax(zT/ρ), softmax(zS/ρ))` over `rows × classes` logits.
 *
 * # Safety
 * Pointers must be valid for `rows * classes` doubles.
 */
int32_t crcd_kd_loss(const double *teacher_logits,
                     const double *student_logits,
                     size_t rows,
                     size_t classes,
                     double rho,
                     double *out_loss);

/**
 * Baseline contrastive loss for one anchor. `kind` is a `CRCD_BASELINE_*`
 * constant; `param` is the margin (triplet) or temperature (others).
 *
 * # Safety
 * `u` and `v_pos` hold `dim` doubles, `v_negs` holds `n * dim`.
 */
int32_t crcd_baseline_loss(int32_t kind,
                           const double *u,
                           const double *v_pos,
                           const double *v_negs,
                           size_t dim,
                           size_t n,
                           double param,
                           double *out_loss);

/**
 * Closed-form mutual information (nats) of a synthetic joint given as text,
 * e.g. `gaussian:0.9` or `discrete:0.5,0;0,0.5`.
 *
 * # Safety
 * `spec` must be a NUL-terminated string.
 */
int32_t crcd_true_mi(const char *spec, double *out_mi);

/**
 * Trains the default critic on the joint and reports the final held-out bound.
 * `out_sound` is set when every checkpoint stayed below the true MI plus tolerance.
 *
 * # Safety
 * `spec` must be NUL-terminated; out-pointers must be valid.
 */
int32_t crcd_mi_bound(const char *spec,
                      size_t negatives,
                      size_t train_steps,
                      uint64_t seed,
                      double *out_bound,
                      double *out_true_mi,
                      bool *out_sound);

/**
 * # Safety
 * `out_queue` must be a valid pointer.
 */
int32_t crcd_queue_new(size_t capacity,
                       size_t feature_dim,
                       size_t gradient_dim,
                       int32_t policy,
                       uint64_t seed,
                       struct CrcdQueue **out_queue);

/**
 * # Safety
 * `queue` must come from `crcd_queue_new` and not be used afterwards. Null is ignored.
 */
void crcd_queue_free(struct CrcdQueue *queue);

/**
 * Appends `count` entries; features are `count × feature_dim`, gradients `count × gradient_dim`.
 *
 * # Safety
 * Pointers must be valid for the stated sizes.
 */
int32_t crcd_queue_push(struct CrcdQueue *queue,
                        const size_t *sample_ids,
                        const double *features,
                        const double *gradients,
                        size_t count,
                        size_t feature_dim,
                        size_t gradient_dim);

/**
 * # Safety
 * `queue` and `out_len` must be valid.
 */
int32_t crcd_queue_len(const struct CrcdQueue *queue, size_t *out_len);

/**
 * Writes the sample ids of `count` negatives for `anchor` into `out_ids`.
 * Returns `CRCD_ERR_WARM_UP` while too few eligible entries exist.
 *
 * # Safety
 * `out_ids` must have room for `count` values.
 */
int32_t crcd_queue_sample(struct CrcdQueue *queue, size_t anchor, size_t count, size_t *out_ids);

/**
 * Parses TOML text with optional `key=value` overrides.
 *
 * # Safety
 * `toml_text` is NUL-terminated; `overrides` holds `n_overrides` NUL-terminated strings.
 */
int32_t crcd_config_parse(const char *toml_text,
                          const char *const *overrides,
                          size_t n_overrides,
                          struct CrcdConfig **out_config);

/**
 * # Safety
 * `config` must come from `crcd_config_parse`. Null is ignored.
 */
void crcd_config_free(struct CrcdConfig *config);

/**
 * Copies the config hash (64 hex chars plus NUL) into `buf`.
 *
 * # Safety
 * `buf` must have room for `buf_len` bytes.
 */
int32_t crcd_config_hash(const struct CrcdConfig *config, char *buf, size_t buf_len);

/**
 * Trains the teacher and writes its checkpoint to `checkpoint_path`
 * (the configured path when null). `out_top1` receives test accuracy in percent.
 *
 * # Safety
 * `config` must be valid; `checkpoint_path` is null or NUL-terminated.
 */
int32_t crcd_train_teacher(const struct CrcdConfig *config,
                           const char *checkpoint_path,
                           double *out_top1);

/**
 * Runs distillation into `out_dir` and reports final and best top-1 (percent).
 *
 * # Safety
 * `config` must be valid; `out_dir` is NUL-terminated.
 */
int32_t crcd_distill(const struct CrcdConfig *config,
                     const char *out_dir,
                     bool resume,
                     double *out_final_top1,
                     double *out_best_top1);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CRCD_H */
