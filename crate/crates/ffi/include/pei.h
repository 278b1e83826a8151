#ifndef PEI_H
#define PEI_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PeiStatus {
  PEI_STATUS_OK = 0,
  PEI_STATUS_NULL_POINTER = 1,
  PEI_STATUS_INVALID_UTF8 = 2,
  PEI_STATUS_INVALID_ARGUMENT = 3,
  PEI_STATUS_IO = 4,
  PEI_STATUS_PARSE = 5,
  PEI_STATUS_MODEL = 6,
  PEI_STATUS_PANIC = 7,
} PeiStatus;

/**
 * A trained unified model.
 */
typedef struct PeiModel PeiModel;

typedef struct PeiAnswerScore {
  double em;
  double f1;
  double precision;
  double recall;
} PeiAnswerScore;

typedef struct PeiSupportJoint {
  double sup_em;
  double sup_f1;
  double sup_precision;
  double sup_recall;
  double joint_em;
  double joint_f1;
} PeiSupportJoint;

typedef struct PeiSubquestionRates {
  double both_correct;
  double one_correct;
} PeiSubquestionRates;

/**
 * Aggregate scores in percent.
 */
typedef struct PeiMetrics {
  size_t count;
  double ans_em;
  double ans_f1;
  double sup_em;
  double sup_f1;
  double joint_em;
  double joint_f1;
} PeiMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *pei_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void pei_string_free(char *s);

/**
 * Answer EM/F1 after normalization.
 *
 * # Safety
 * `predicted` and `gold` must be NUL-terminated; `out` must be writable.
 */
enum PeiStatus pei_answer_score(const char *predicted,
                                const char *gold,
                                struct PeiAnswerScore *out_score);

/**
 * Supporting-fact and joint scores for sentence-index sets.
 *
 * # Safety
 * Index arrays must hold `n_*` elements (may be null when the count is 0).
 */
enum PeiStatus pei_support_joint(const size_t *pred,
                                 size_t n_pred,
                                 const size_t *gold,
                                 size_t n_gold,
                                 const struct PeiAnswerScore *answer,
                                 struct PeiSupportJoint *out_score);

/**
 * Rates from an 8-row outcome table (ccc, ccw, ..., www percentages).
 *
 * # Safety
 * `rows` must point at 8 doubles.
 */
enum PeiStatus pei_subquestion_rates(const double *rows, struct PeiSubquestionRates *out_rates);

/**
 * # Safety
 * `out_lr` must be writable.
 */
enum PeiStatus pei_schedule_lr(size_t step,
                               size_t total,
                               double peak,
                               double warmup_ratio,
                               double *out_lr);

/**
 * Generates `n` synthetic examples as JSON lines. `config` is config-file
 * text or null for defaults; `kind` is `bridge`, `comparison`, `singlehop`
 * or `multihop`.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out_jsonl` must be writable.
 */
enum PeiStatus pei_generate_jsonl(const char *config,
                                  const char *kind,
                                  size_t n,
                                  uint64_t seed,
                                  char **out_jsonl);

/**
 * Scores JSON-lines predictions against JSON-lines gold examples.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out_metrics` must be writable.
 */
enum PeiStatus pei_evaluate_jsonl(const char *predictions,
                                  const char *gold,
                                  struct PeiMetrics *out_metrics);

/**
 * Loads a unified-stage checkpoint.
 *
 * # Safety
 * `path` must be NUL-terminated; `out_model` must be writable.
 */
enum PeiStatus pei_model_load(const char *path, struct PeiModel **out_model);

/**
 * Predicts one example given as a JSON record; writes a JSON prediction.
 *
 * # Safety
 * `model` must come from [`pei_model_load`]; `example` must be
 * NUL-terminated; `out_json` must be writable.
 */
enum PeiStatus pei_model_predict(const struct PeiModel *model,
                                 const char *example,
                                 bool with_subquestions,
                                 char **out_json);

/**
 * # Safety
 * `model` must be null or a handle from [`pei_model_load`], freed once.
 */
void pei_model_free(struct PeiModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PEI_H */
