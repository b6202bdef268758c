#ifndef COTKIT_H
#define COTKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdint.h>

typedef enum CotkitStatus {
  COTKIT_STATUS_OK = 0,
  COTKIT_STATUS_NULL_POINTER = 1,
  COTKIT_STATUS_INVALID_UTF8 = 2,
  COTKIT_STATUS_INVALID_ARGUMENT = 3,
  COTKIT_STATUS_IO = 4,
  COTKIT_STATUS_FORMAT = 5,
  COTKIT_STATUS_MODEL = 6,
  /*
   Undefined result, e.g. an improvement over a zero baseline.
   */
  COTKIT_STATUS_UNDEFINED = 7,
  COTKIT_STATUS_PANIC = 8,
} CotkitStatus;

/*
 Which prompt template `cotkit_render_prompt` fills.
 */
typedef enum CotkitTemplate {
  /*
   `first` = code.
   */
  COTKIT_TEMPLATE_QUALITY = 0,
  /*
   `first` = prompt with signature.
   */
  COTKIT_TEMPLATE_COT_GENERATOR = 1,
  /*
   `first` = code, `second` = CoT.
   */
  COTKIT_TEMPLATE_CONSISTENCY = 2,
  /*
   `first` = code, `second` = docstring.
   */
  COTKIT_TEMPLATE_DOC_CHECK = 3,
  /*
   `first` = prompt.
   */
  COTKIT_TEMPLATE_INSTRUCTION = 4,
} CotkitTemplate;

/*
 A loaded byte-level model with optional adapters.
 */
typedef struct CotkitModel CotkitModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. Valid until
 the next cotkit call on the same thread.
 */
const char *cotkit_last_error(void);

/*
 Library version as a static string.
 */
const char *cotkit_version(void);

/*
 Frees a string returned by this library. NULL is a no-op.

 # Safety
 `s` is NULL or came from this library and was not freed before.
 */
void cotkit_string_free(char *s);

/*
 BLEU-n (1..=4) of `candidate` against `reference`.

 # Safety
 Strings are NUL-terminated; `out` is valid for writes.
 */
enum CotkitStatus cotkit_bleu(const char *candidate,
                              const char *reference,
                              uint32_t n,
                              double *out);

/*
 METEOR of `candidate` against `reference`.

 # Safety
 As for `cotkit_bleu`.
 */
enum CotkitStatus cotkit_meteor(const char *candidate, const char *reference, double *out);

/*
 ROUGE-L F-score of `candidate` against `reference`.

 # Safety
 As for `cotkit_bleu`.
 */
enum CotkitStatus cotkit_rouge_l(const char *candidate, const char *reference, double *out);

/*
 Relative improvement in percent, rounded to two decimals. Returns
 `Undefined` when `old_pct` is zero.

 # Safety
 `out` is valid for writes.
 */
enum CotkitStatus cotkit_improvement(double old_pct, double new_pct, double *out);

/*
 Fills a prompt template; `kind` is a `CotkitTemplate` value.
 `second` may be NULL for one-slot templates.

 # Safety
 Strings are NUL-terminated or NULL; `out` is valid for writes.
 */
enum CotkitStatus cotkit_render_prompt(uint32_t kind,
                                       const char *first,
                                       const char *second,
                                       char **out);

/*
 Token statistics of a CoT corpus given as JSONL text, as JSON.

 # Safety
 `jsonl` is NUL-terminated; `out` is valid for writes.
 */
enum CotkitStatus cotkit_corpus_stats_json(const char *jsonl, char **out);

/*
 Loads a model file written by `cotkit tinylm-train`.

 # Safety
 `path` is NUL-terminated; `out` is valid for writes.
 */
enum CotkitStatus cotkit_model_load(const char *path, struct CotkitModel **out);

/*
 Releases a model. NULL is a no-op.

 # Safety
 `model` is NULL or came from `cotkit_model_load` and was not freed.
 */
void cotkit_model_free(struct CotkitModel *model);

/*
 Hex sha256 of the base weights.

 # Safety
 `model` came from `cotkit_model_load`; `out` is valid for writes.
 */
enum CotkitStatus cotkit_model_checksum(const struct CotkitModel *model, char **out);

/*
 Greedy continuation of `prompt` (raw text, byte tokens), at most
 `max_new` tokens; the end-of-sequence token is not rendered.

 # Safety
 `model` came from `cotkit_model_load`; `prompt` is NUL-terminated;
 `out` is valid for writes.
 */
enum CotkitStatus cotkit_model_generate_greedy(const struct CotkitModel *model,
                                               const char *prompt,
                                               uint32_t max_new,
                                               char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COTKIT_H */
