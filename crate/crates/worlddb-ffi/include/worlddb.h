/* C interface to the worlddb probabilistic database engine. */

#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes mirroring the CLI exit codes.
typedef enum WdbStatus {
  WDB_STATUS_OK = 0,
  WDB_STATUS_USAGE = 1,
  WDB_STATUS_DATA = 2,
  WDB_STATUS_RESOURCE_CAP = 3,
  WDB_STATUS_INTERNAL = 4,
} WdbStatus;

// An opaque factor-graph model.
typedef struct WdbModel WdbModel;

// An opaque marginal table: tuples with counts and probabilities.
typedef struct WdbResult WdbResult;

// An opaque possible world. Not thread-safe; see the module notes.
typedef struct WdbWorld WdbWorld;

// Sampling configuration for [`wdb_evaluate`]. `mode` 0 is naive, 1 is
// incremental. Zero-initialize and override what you need; zero counts
// fall back to the defaults (100 samples, 10000 steps, 1 chain).
typedef struct WdbEvalConfig {
  uint32_t mode;
  uint64_t samples;
  uint64_t steps_per_sample;
  uint64_t chains;
  uint64_t seed;
  uint64_t burn_in;
} WdbEvalConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread. Valid until
// the next failing call on the same thread.
const char *wdb_last_error(void);

// Library version as a static string.
const char *wdb_version(void);

// Load a world from a tab-separated corpus (TOK_ID, DOC_ID, STRING,
// TRUTH); labels start at "O" and are hidden.
//
// # Safety
// `path` must be a valid NUL-terminated string; `out` must be writable.
enum WdbStatus wdb_world_from_corpus(const char *path, struct WdbWorld **out);

// Load a world from a snapshot written by [`wdb_world_save_snapshot`] or
// the CLI's `ingest`.
//
// # Safety
// `path` must be a valid NUL-terminated string; `out` must be writable.
enum WdbStatus wdb_world_from_snapshot(const char *path, struct WdbWorld **out);

// Write the world to a snapshot file.
//
// # Safety
// `world` must be a live handle; `path` a valid NUL-terminated string.
enum WdbStatus wdb_world_save_snapshot(const struct WdbWorld *world, const char *path);

// Number of tuples in the TOKEN relation (0 when absent).
//
// # Safety
// `world` must be a live handle.
uint64_t wdb_world_token_count(const struct WdbWorld *world);

// # Safety
// `world` must be a handle from this library, freed at most once.
void wdb_world_free(struct WdbWorld *world);

// Load a model file (templates, weights, hidden declarations).
//
// # Safety
// `path` must be a valid NUL-terminated string; `out` must be writable.
enum WdbStatus wdb_model_load(const char *path, struct WdbModel **out);

// # Safety
// `model` must be a handle from this library, freed at most once.
void wdb_model_free(struct WdbModel *model);

// Generate a reproducible synthetic corpus, and a matching model file when
// `model_path` is non-null.
//
// # Safety
// `corpus_path` must be valid; `model_path` may be null.
enum WdbStatus wdb_generate_corpus(uint64_t docs,
                                   uint64_t tokens_per_doc,
                                   uint64_t vocab,
                                   double entity_rate,
                                   uint64_t seed,
                                   const char *corpus_path,
                                   const char *model_path);

// Estimate per-tuple marginals of `query_text` by sampling. The world
// handle itself is not mutated; chains run on internal clones.
//
// # Safety
// `world` and `model` must be live handles; `query_text` a valid string;
// `out` writable. `config` may be null for defaults.
enum WdbStatus wdb_evaluate(const struct WdbWorld *world,
                            const struct WdbModel *model,
                            const char *query_text,
                            const struct WdbEvalConfig *config,
                            struct WdbResult **out);

// Exact marginals by enumeration, refused above `cap` joint assignments
// (pass 0 for the default cap).
//
// # Safety
// Handles must be live; `query_text` valid; `out` writable.
enum WdbStatus wdb_oracle(const struct WdbWorld *world,
                          const struct WdbModel *model,
                          const char *query_text,
                          uint64_t cap,
                          struct WdbResult **out);

// Number of distinct answer tuples.
//
// # Safety
// `result` must be a live handle.
uintptr_t wdb_result_row_count(const struct WdbResult *result);

// Tab-joined output column names. Valid until the result is freed.
//
// # Safety
// `result` must be a live handle.
const char *wdb_result_columns(const struct WdbResult *result);

// Tab-joined values of one answer tuple, or null when out of range. Valid
// until the result is freed.
//
// # Safety
// `result` must be a live handle.
const char *wdb_result_tuple(const struct WdbResult *result, uintptr_t row);

// Number of sampled worlds whose answer contained the tuple (0 for oracle
// results).
//
// # Safety
// `result` must be a live handle.
uint64_t wdb_result_count(const struct WdbResult *result, uintptr_t row);

// Total sampled worlds (0 for oracle results).
//
// # Safety
// `result` must be a live handle.
uint64_t wdb_result_z(const struct WdbResult *result);

// Estimated (or exact) probability of the tuple being in the answer.
//
// # Safety
// `result` must be a live handle.
double wdb_result_probability(const struct WdbResult *result, uintptr_t row);

// # Safety
// `result` must be a handle from this library, freed at most once.
void wdb_result_free(struct WdbResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
