#ifndef MTN_H
#define MTN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MtnStatus {
  MTN_STATUS_OK = 0,
  MTN_STATUS_NULL_ARGUMENT = 1,
  MTN_STATUS_INVALID_UTF8 = 2,
  MTN_STATUS_CONFIG = 3,
  MTN_STATUS_DATA = 4,
  MTN_STATUS_RUNTIME = 5,
  MTN_STATUS_PANIC = 6,
} MtnStatus;

// A loaded checkpoint.
typedef struct MtnModel MtnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads the checkpoint directory at `dir` into `*out`.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` a valid pointer.
enum MtnStatus mtn_model_load(const char *dir, struct MtnModel **out);

// # Safety
// `model` must come from [`mtn_model_load`] and not be used afterwards.
void mtn_model_free(struct MtnModel *model);

// Vocabulary size of a loaded model, 0 for null.
//
// # Safety
// `model` must be null or come from [`mtn_model_load`].
uintptr_t mtn_model_vocab_size(const struct MtnModel *model);

// Decodes every example of `dataset` and writes generation JSON lines to
// `output`. A `beam_size` of 0 selects greedy decoding.
//
// # Safety
// String arguments must be NUL-terminated; `model` from [`mtn_model_load`].
enum MtnStatus mtn_generate(const struct MtnModel *model,
                            const char *dataset,
                            const char *features,
                            uintptr_t beam_size,
                            double length_penalty,
                            uintptr_t max_len,
                            const char *output);

// Ranks each example's candidates; writes one JSON line per example with
// the candidate indices best first.
//
// # Safety
// String arguments must be NUL-terminated; `model` from [`mtn_model_load`].
enum MtnStatus mtn_rank(const struct MtnModel *model,
                        const char *dataset,
                        const char *features,
                        const char *output);

// Scores `hyp` against `reference` (generation JSON lines) and stores the
// metric report as a JSON string in `*out_json`.
//
// # Safety
// Paths must be NUL-terminated; `out_json` a valid pointer. Free the result
// with [`mtn_string_free`].
enum MtnStatus mtn_evaluate_files(const char *hyp, const char *reference, char **out_json);

// Learning rate at 1-based `step`; NaN when `model_dim` or `warmup_steps`
// is zero.
double mtn_noam_lr(uint64_t step, uintptr_t model_dim, uint64_t warmup_steps);

// Message of the last failure on this thread, or null. Valid until the next
// failing call on the same thread.
const char *mtn_last_error_message(void);

// # Safety
// `s` must be null or a string returned by this library.
void mtn_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MTN_H */
