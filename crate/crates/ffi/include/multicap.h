#ifndef MULTICAP_H
#define MULTICAP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. The first four match the command-line exit codes.
 */
typedef enum McStatus {
  MC_STATUS_OK = 0,
  MC_STATUS_USAGE = 1,
  MC_STATUS_DATA = 2,
  MC_STATUS_NUMERIC = 3,
  MC_STATUS_NULL_ARGUMENT = 4,
  MC_STATUS_PANIC = 5,
} McStatus;

/**
 * A loaded checkpoint.
 */
typedef struct McModel McModel;

/**
 * Corpus-level caption scores.
 */
typedef struct McScores {
  double bleu4;
  double rouge_l;
  double cider;
} McScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next library call on the same thread.
 */
const char *mc_last_error(void);

/**
 * Library version as a static string.
 */
const char *mc_version(void);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void mc_string_free(char *s);

/**
 * Loads a checkpoint directory into `*out`.
 *
 * # Safety
 * `dir` must be a nul-terminated string and `out` a valid pointer.
 */
enum McStatus mc_model_load(const char *dir, struct McModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`mc_model_load`] and not have been freed.
 */
void mc_model_free(struct McModel *model);

/**
 * Width of the feature vectors the model expects, or 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t mc_model_feature_dim(const struct McModel *model);

/**
 * Number of languages the model decodes, or 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t mc_model_language_count(const struct McModel *model);

/**
 * Captions one video given as `n_frames` row-major frame features of width
 * `dim`. Rows need not be normalized. `lang` may be null for the first
 * language. `beam_size` 0 decodes greedily. On success `*caption` holds a
 * string to release with [`mc_string_free`].
 *
 * # Safety
 * `frames` must point to `n_frames * dim` floats; `model` must be a live
 * handle; `lang` must be null or nul-terminated; `caption` must be valid.
 */
enum McStatus mc_model_caption(const struct McModel *model,
                               const float *frames,
                               size_t n_frames,
                               size_t dim,
                               const char *lang,
                               size_t beam_size,
                               size_t max_len,
                               char **caption);

/**
 * Scores `n_items` candidates. `references` holds the references of every
 * item back to back; `ref_counts[i]` says how many belong to item `i`.
 *
 * # Safety
 * `candidates` and `ref_counts` must point to `n_items` entries,
 * `references` to their sum, and every string must be nul-terminated.
 */
enum McStatus mc_evaluate(const char *const *candidates,
                          size_t n_items,
                          const char *const *references,
                          const size_t *ref_counts,
                          struct McScores *out);

/**
 * Runs the command-line tool in-process with `argc` arguments (the first
 * being the program name) and returns its exit code.
 *
 * # Safety
 * `argv` must point to `argc` nul-terminated strings.
 */
int32_t mc_run_cli(size_t argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MULTICAP_H */
