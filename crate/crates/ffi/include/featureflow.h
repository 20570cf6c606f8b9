#ifndef FEATUREFLOW_H
#define FEATUREFLOW_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define FF_SITE_RES 0

#define FF_SITE_MLP 1

#define FF_SITE_ATT 2

/**
 * Result code of every fallible call.
 */
typedef enum FfStatus {
  FF_STATUS_OK = 0,
  FF_STATUS_NULL_POINTER = 1,
  FF_STATUS_INVALID_UTF8 = 2,
  FF_STATUS_INVALID_ARGUMENT = 3,
  FF_STATUS_NOT_FOUND = 4,
  FF_STATUS_IO = 5,
  FF_STATUS_BUFFER_SIZE = 6,
  FF_STATUS_PANIC = 7,
} FfStatus;

/**
 * Opaque handle to a loaded bundle.
 */
typedef struct FfBundle FfBundle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into this library on the same thread.
 */
const char *ff_last_error(void);

/**
 * Library version, a static string.
 */
const char *ff_version(void);

/**
 * Load a bundle directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FfStatus ff_bundle_load(const char *path, struct FfBundle **out);

/**
 * Build the default planted toy bundle for `seed` in memory.
 *
 * # Safety
 * `out` must be writable.
 */
enum FfStatus ff_bundle_synth(uint64_t seed, struct FfBundle **out);

/**
 * Release a bundle. NULL is ignored.
 *
 * # Safety
 * `bundle` must come from this library and not be used afterwards.
 */
void ff_bundle_free(struct FfBundle *bundle);

/**
 * # Safety
 * `bundle` must be a live handle; `out` must be writable.
 */
enum FfStatus ff_bundle_layer_count(const struct FfBundle *bundle, size_t *out);

/**
 * # Safety
 * `bundle` must be a live handle; `out` must be writable.
 */
enum FfStatus ff_bundle_model_dim(const struct FfBundle *bundle, size_t *out);

/**
 * Dictionary size at (`layer`, `site`).
 *
 * # Safety
 * `bundle` must be a live handle; `out` must be writable.
 */
enum FfStatus ff_bundle_n_features(const struct FfBundle *bundle,
                                   size_t layer,
                                   uint32_t site,
                                   size_t *out);

/**
 * Top-1 cosine match of every source feature. `len` must equal the source
 * dictionary size; features without a match get index -1 and score NaN.
 *
 * # Safety
 * `indices` and `scores` must each point to `len` writable elements.
 */
enum FfStatus ff_match_top1(const struct FfBundle *bundle,
                            size_t src_layer,
                            uint32_t src_site,
                            size_t tgt_layer,
                            uint32_t tgt_site,
                            int64_t *indices,
                            double *scores,
                            size_t len);

/**
 * Flow graph of `seed_feature` (`layer:site:index`) as JSON, byte-identical
 * to the CLI and HTTP artifacts. Free `*out` with `ff_string_free`.
 *
 * # Safety
 * `seed_feature` must be NUL-terminated; `out` must be writable.
 */
enum FfStatus ff_flow_graph_json(const struct FfBundle *bundle,
                                 const char *seed_feature,
                                 double t_res,
                                 double t_module,
                                 char **out);

/**
 * Unsteered continuation of `prompt` with the default sampler settings,
 * except `max_len`, `seed` and `greedy`. Free `*out` with `ff_string_free`.
 *
 * # Safety
 * `prompt` must be NUL-terminated; `out` must be writable.
 */
enum FfStatus ff_generate(const struct FfBundle *bundle,
                          const char *prompt,
                          size_t max_len,
                          uint64_t seed,
                          bool greedy,
                          char **out);

/**
 * Release a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void ff_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEATUREFLOW_H */
