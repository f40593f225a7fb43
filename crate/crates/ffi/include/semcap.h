#ifndef SEMCAP_H
#define SEMCAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SemcapStatus {
  SEMCAP_STATUS_OK = 0,
  SEMCAP_STATUS_NULL_POINTER = 1,
  SEMCAP_STATUS_INVALID_UTF8 = 2,
  SEMCAP_STATUS_INVALID_ARGUMENT = 3,
  SEMCAP_STATUS_IO = 4,
  SEMCAP_STATUS_CHECKPOINT = 5,
  SEMCAP_STATUS_PARSE = 6,
  SEMCAP_STATUS_MISSING_REFERENCE = 7,
  SEMCAP_STATUS_NUMERIC = 8,
  SEMCAP_STATUS_PANIC = 9,
} SemcapStatus;

// A loaded checkpoint. Opaque to C.
typedef struct SemcapModel SemcapModel;

// Corpus scores as printed by the `evaluate` command.
typedef struct SemcapMetrics {
  double bleu1;
  double bleu2;
  double bleu3;
  double bleu4;
  double rouge_l;
  double cider;
} SemcapMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or an empty string.
// The pointer stays valid until the next library call on this thread.
const char *semcap_last_error(void);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SemcapStatus semcap_model_load(const char *path, struct SemcapModel **out);

// # Safety
// `model` must come from [`semcap_model_load`] and not be freed twice. Null is ignored.
void semcap_model_free(struct SemcapModel *model);

// Length of the feature vector the model expects, 0 for a null model.
//
// # Safety
// `model` must be null or a live model.
uintptr_t semcap_model_feature_dim(const struct SemcapModel *model);

// Number of words including the reserved tokens, 0 for a null model.
//
// # Safety
// `model` must be null or a live model.
uintptr_t semcap_model_vocab_size(const struct SemcapModel *model);

// Greedy caption for one image. `attributes` holds whitespace separated
// words, best first; it may be null or empty for models without attributes.
// On success `*out_caption` receives a string to release with
// [`semcap_string_free`].
//
// # Safety
// `features` must point to `n_features` doubles; strings must be NUL-terminated.
enum SemcapStatus semcap_caption_greedy(const struct SemcapModel *model,
                                        const double *features,
                                        uintptr_t n_features,
                                        const char *attributes,
                                        uintptr_t max_len,
                                        char **out_caption);

// # Safety
// `s` must come from this library and not be freed twice. Null is ignored.
void semcap_string_free(char *s);

// Scores candidate captions against references. Both texts use the
// `id<TAB>caption` layout or COCO JSON.
//
// # Safety
// Strings must be NUL-terminated and `out` a valid pointer.
enum SemcapStatus semcap_evaluate(const char *candidates,
                                  const char *references,
                                  struct SemcapMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEMCAP_H */
