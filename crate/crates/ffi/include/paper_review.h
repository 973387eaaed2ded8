#ifndef PAPER_REVIEW_H
#define PAPER_REVIEW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  PR_OK = 0,
  PR_NULL_ARGUMENT = 1,
  PR_INVALID_UTF8 = 2,
  PR_INVALID_ARGUMENT = 3,
  PR_CONFIG_ERROR = 4,
  PR_CORPUS_ERROR = 5,
  PR_RUN_ERROR = 6,
  PR_REPLY_ERROR = 7,
  PR_SCORE_OUT_OF_RANGE = 8,
  PR_PANIC = 99,
} PrStatus;

/**
 * A loaded corpus.
 */
typedef struct PrCorpus PrCorpus;

/**
 * A validated configuration with its backend and limiter.
 */
typedef struct PrEngine PrEngine;

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *pr_last_error(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void pr_string_free(char *s);

/**
 * # Safety
 * `root` must be a nul-terminated string; `out` must be writable.
 */
PrStatus pr_corpus_open(const char *root, PrCorpus **out);

/**
 * # Safety
 * `corpus` must be null or a live handle.
 */
size_t pr_corpus_len(const PrCorpus *corpus);

/**
 * # Safety
 * `corpus` must be null or a handle from `pr_corpus_open`, freed once.
 */
void pr_corpus_free(PrCorpus *corpus);

/**
 * Loads and validates a TOML config and builds its backend.
 *
 * # Safety
 * `config_path` must be a nul-terminated string; `out` must be writable.
 */
PrStatus pr_engine_new(const char *config_path, PrEngine **out);

/**
 * # Safety
 * `engine` must be null or a handle from `pr_engine_new`, freed once.
 */
void pr_engine_free(PrEngine *engine);

/**
 * Batch plan as JSON, without contacting the backend.
 *
 * # Safety
 * Handles must be live; `out_json` must be writable.
 */
PrStatus pr_engine_plan(const PrEngine *engine, const PrCorpus *corpus, char **out_json);

/**
 * Runs (or with `resume` nonzero, resumes) a review and returns the
 * canonical decision JSON.
 *
 * # Safety
 * Handles must be live; strings nul-terminated; `out_json` writable.
 */
PrStatus pr_engine_run(const PrEngine *engine,
                       const PrCorpus *corpus,
                       const char *runs_dir,
                       const char *run_id,
                       int32_t resume,
                       char **out_json);

/**
 * Seeded partition of the ids in `ids_json` (a JSON string array) into
 * review batches, returned as a JSON array of batch assignments.
 *
 * # Safety
 * `ids_json` must be nul-terminated; `out_json` writable.
 */
PrStatus pr_partition_plan(const char *ids_json, size_t batch_size, uint64_t seed, char **out_json);

/**
 * Exact mean of scores given in hundredths, as a decimal string
 * (`8580` and `8600` give `"85.9"`).
 *
 * # Safety
 * `hundredths` must point to `len` values; `out` must be writable.
 */
PrStatus pr_mean_score(const uint32_t *hundredths, size_t len, char **out);

/**
 * `|selected ∩ reference|` and `|reference|` for two JSON id arrays.
 *
 * # Safety
 * Strings must be nul-terminated; outputs writable.
 */
PrStatus pr_overlap_similarity(const char *selected_json,
                               const char *reference_json,
                               size_t *out_hits,
                               size_t *out_total);

/**
 * Parses a reviewer reply. `expected_json` is an array of
 * `{"paper_id", "title"}`; the result is a JSON array of outcomes.
 *
 * # Safety
 * Strings must be nul-terminated; `criterion_ids` must point to `n_ids`
 * bytes; `out_json` writable.
 */
PrStatus pr_parse_review_reply(const char *reply,
                               const char *expected_json,
                               const uint8_t *criterion_ids,
                               size_t n_ids,
                               char **out_json);

#endif  /* PAPER_REVIEW_H */
