#ifndef GATE_MERGE_H
#define GATE_MERGE_H

/* Generated by cbindgen from gate-merge-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every API call.
 */
typedef enum GmStatus {
  /*
   The call succeeded.
   */
  GM_STATUS_OK = 0,
  /*
   A required pointer argument was NULL.
   */
  GM_STATUS_NULL_ARGUMENT = 1,
  /*
   A string argument was not valid UTF-8.
   */
  GM_STATUS_INVALID_UTF8 = 2,
  /*
   Arguments or configuration were rejected (bad ids, shapes, rates).
   */
  GM_STATUS_INVALID_INPUT = 3,
  /*
   A file was readable but not a valid container or bundle.
   */
  GM_STATUS_DATA_FORMAT = 4,
  /*
   The operating system reported an I/O failure.
   */
  GM_STATUS_IO = 5,
  /*
   An internal invariant failed; the library caught a panic.
   */
  GM_STATUS_PANIC = 6,
} GmStatus;

/*
 An owned collection of concept bundles, keyed by concept id.
 */
typedef struct GmConceptSet GmConceptSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Returns the last error message for this thread; never NULL, empty when no
 call has failed. Valid until the next failing call on the same thread.
 */
const char *gm_last_error_message(void);

/*
 Returns the library version as a static string; never NULL.
 */
const char *gm_version(void);

/*
 Releases a string returned through an out-parameter. NULL is a no-op.

 # Safety
 `s` must be NULL or a pointer previously returned by this library, and
 must not be used again after this call.
 */
void gm_string_free(char *s);

/*
 Creates an empty concept set. Release with gm_concept_set_free.
 */
struct GmConceptSet *gm_concept_set_new(void);

/*
 Releases a concept set. NULL is a no-op.

 # Safety
 `set` must be NULL or a pointer from gm_concept_set_new, and must not be
 used again after this call.
 */
void gm_concept_set_free(struct GmConceptSet *set);

/*
 Number of concepts held by the set; 0 for NULL.

 # Safety
 `set` must be NULL or a valid concept set.
 */
size_t gm_concept_set_len(const struct GmConceptSet *set);

/*
 Loads one concept bundle file into the set. Duplicate concept ids are
 rejected and leave the set unchanged.

 # Safety
 `set` must come from gm_concept_set_new; `path` must be a
 NUL-terminated string or NULL.
 */
enum GmStatus gm_concept_set_load_file(struct GmConceptSet *set, const char *path);

/*
 Loads every `*.gmt` bundle in a directory into the set. On any failure
 the set is left unchanged.

 # Safety
 Same contracts as gm_concept_set_load_file.
 */
enum GmStatus gm_concept_set_load_dir(struct GmConceptSet *set, const char *dir);

/*
 Writes a JSON array of the loaded concept ids to `out_json`.

 # Safety
 `set` must be a valid concept set; `out_json` must point to writable
 storage for one pointer.
 */
enum GmStatus gm_concept_set_ids_json(const struct GmConceptSet *set, char **out_json);

/*
 Gates the loaded concepts against a query and optional patch features,
 writing the decision report as JSON to `out_json`.

 `features_path` may be NULL for text-only gating. `tau` is the inclusive
 similarity threshold and `top_k` the number of pooled patches.

 # Safety
 Pointer arguments follow the module conventions; `out_json` must point to
 writable storage for one pointer.
 */
enum GmStatus gm_gate_json(const struct GmConceptSet *set,
                           const char *query,
                           const char *features_path,
                           double tau,
                           size_t top_k,
                           char **out_json);

/*
 Sparsifies and fuses the adapters of the listed concepts, writing the
 merged-delta container to `out_path`.

 `active_csv` is a comma-separated id list and must select at least one
 concept. `bypass_single` skips sparsification when exactly one concept is
 active.

 # Safety
 Pointer arguments follow the module conventions.
 */
enum GmStatus gm_merge_to_file(const struct GmConceptSet *set,
                               const char *active_csv,
                               double drop_rate,
                               uint64_t seed,
                               bool bypass_single,
                               const char *out_path);

/*
 Adds a merged-delta file to base weights, extends the vocabulary with the
 listed concepts, and writes the composed container to `out_path`.

 `active_csv` may be empty, in which case only the deltas are applied.

 # Safety
 Pointer arguments follow the module conventions.
 */
enum GmStatus gm_apply_to_file(const char *base_path,
                               const char *merged_path,
                               const struct GmConceptSet *set,
                               const char *active_csv,
                               const char *out_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GATE_MERGE_H */
