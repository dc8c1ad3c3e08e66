/*
 * eager.h — C API for the EAGER generative recommendation engine.
 *
 * The engine builds dual item code trees (behavior + semantic), trains a
 * shared-encoder / dual-decoder transformer with contrastive and transfer
 * auxiliary tasks, and serves top-k recommendations through trie-constrained
 * beam search with confidence-based fusion.
 *
 * All functions return an eager_status; EAGER_OK (0) means success. On any
 * failure eager_last_error() returns a human-readable message for the
 * calling thread. Handles are opaque; destroy functions accept NULL.
 */
#ifndef EAGER_H
#define EAGER_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define EAGER_API __declspec(dllexport)
#else
#define EAGER_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef int32_t eager_status;

enum {
  EAGER_OK = 0,
  EAGER_ERR_INVALID_ARG = 1,  /* bad parameter, precondition violated */
  EAGER_ERR_IO = 2,           /* file missing or unreadable/unwritable */
  EAGER_ERR_PARSE = 3,        /* malformed file content */
  EAGER_ERR_CONFIG = 4,       /* unknown key, bad value, missing path */
  EAGER_ERR_EMPTY_DATASET = 5,/* filtering or input produced no data */
  EAGER_ERR_SHAPE = 6,        /* artifact dimensions disagree */
  EAGER_ERR_NUMERIC = 7,      /* NaN/Inf encountered where forbidden */
  EAGER_ERR_STATE = 8,        /* operation invalid for current state */
  EAGER_ERR_LOCKED = 9,       /* output directory lock held */
  EAGER_ERR_INTERNAL = 10
};

/* ------------------------------------------------------------------ */
/* Diagnostics                                                         */
/* ------------------------------------------------------------------ */

/* Message for the most recent failure on this thread ("" if none). The
 * pointer stays valid until the next failing call on the same thread. */
EAGER_API const char* eager_last_error(void);

/* Stable name for a status code, e.g. "EAGER_ERR_CONFIG". */
EAGER_API const char* eager_status_name(eager_status status);

EAGER_API const char* eager_version(void);

/* ------------------------------------------------------------------ */
/* Pipeline configuration (flat key-value store)                       */
/* ------------------------------------------------------------------ */

typedef struct eager_config eager_config;

/* Fresh config holding only built-in defaults. */
EAGER_API eager_status eager_config_create(eager_config** out);

/* Load "key=value" lines from a file on top of the defaults.
 * Unknown keys are rejected with EAGER_ERR_CONFIG. */
EAGER_API eager_status eager_config_load(const char* path, eager_config** out);

/* Override a single key. Same validation as eager_config_load. */
EAGER_API eager_status eager_config_set(eager_config* cfg, const char* key,
                                        const char* value);

/* Copy the current value of a key into buf (NUL-terminated, truncated to
 * buflen). Returns EAGER_ERR_CONFIG for unknown keys. */
EAGER_API eager_status eager_config_get(const eager_config* cfg,
                                        const char* key, char* buf,
                                        size_t buflen);

EAGER_API void eager_config_destroy(eager_config* cfg);

/* ------------------------------------------------------------------ */
/* Pipeline commands (mirror the CLI subcommands)                      */
/* ------------------------------------------------------------------ */

/* Ingest raw interactions, apply k-core filtering, write dataset
 * artifacts (manifest, vocab, users, sequences, split) to out_dir. */
EAGER_API eager_status eager_run_prepare(const eager_config* cfg);

/* Build (or load) the frozen embedding matrix for one stream and write
 * the embedding file. stream == NULL builds every configured stream. */
EAGER_API eager_status eager_run_embed(const eager_config* cfg,
                                       const char* stream);

/* Build the balanced hierarchical k-means code tree for one stream and
 * write the code file. stream == NULL builds every configured stream. */
EAGER_API eager_status eager_run_codes(const eager_config* cfg,
                                       const char* stream);

/* Multi-task training; writes the best checkpoint and a progress log. */
EAGER_API eager_status eager_run_train(const eager_config* cfg);

/* Leave-one-out evaluation of a checkpoint; writes metric files for the
 * validation and test targets. checkpoint == NULL uses the default path. */
EAGER_API eager_status eager_run_eval(const eager_config* cfg,
                                      const char* checkpoint);

/* Batch recommendation: one input line per user ("user_id item item ..."),
 * one output line per user ("user_id item:score ..."). Lines with unknown
 * item ids are reported on stderr and skipped. */
EAGER_API eager_status eager_run_recommend(const eager_config* cfg,
                                           const char* histories_path,
                                           const char* out_path);

/* Built-in verification: gradient finite-difference suite and the
 * beam-search-versus-exhaustive-enumeration suite. */
EAGER_API eager_status eager_run_selfcheck(const eager_config* cfg);

/* ------------------------------------------------------------------ */
/* Serving session (loaded model + code trees, reusable across calls)  */
/* ------------------------------------------------------------------ */

typedef struct eager_session eager_session;
typedef struct eager_reclist eager_reclist;

/* Load dataset vocab, code trees and checkpoint named by the config. */
EAGER_API eager_status eager_session_open(const eager_config* cfg,
                                          eager_session** out);

/* Recommend for one history of raw item ids (most recent last).
 * beam must be >= k. The returned list must be freed by the caller. */
EAGER_API eager_status eager_session_recommend(eager_session* session,
                                               const char* const* item_ids,
                                               size_t history_len, int32_t k,
                                               int32_t beam,
                                               eager_reclist** out);

EAGER_API void eager_session_destroy(eager_session* session);

/* Accessors for a recommendation list (entries sorted by ascending
 * confidence score; lower score = more confident). */
EAGER_API size_t eager_reclist_size(const eager_reclist* list);
EAGER_API const char* eager_reclist_item(const eager_reclist* list, size_t i);
EAGER_API double eager_reclist_score(const eager_reclist* list, size_t i);
EAGER_API void eager_reclist_destroy(eager_reclist* list);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* EAGER_H */
