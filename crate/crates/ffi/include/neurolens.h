#ifndef NEUROLENS_H
#define NEUROLENS_H

/* Generated by cbindgen from the neurolens-ffi crate. Do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of a fallible `nl_*` call. Matches the CLI's exit codes.
typedef enum NlStatus {
  // Success.
  NL_STATUS_OK = 0,
  // A null pointer, malformed UTF-8, or out-of-range argument.
  NL_STATUS_INVALID_ARGUMENT = 2,
  // Input files or model data could not be read or validated.
  NL_STATUS_DATA = 3,
  // A numeric or internal failure (including caught panics).
  NL_STATUS_NUMERIC = 4,
} NlStatus;

// A loaded decoder model plus its optional tokenizer vocabulary.
typedef struct NlModel NlModel;

// A suppression policy under construction: an amplification factor and a
// set of (layer, neuron) targets.
typedef struct NlPolicy NlPolicy;

// A trained linear probe loaded from its on-disk container.
typedef struct NlProbe NlProbe;

// An owned token-id sequence produced by [`nl_tokenize`].
typedef struct NlTokens NlTokens;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// The library version as a static NUL-terminated string. Never freed.
const char *nl_version(void);

// Description of the most recent failure on this thread ("" after a
// success). Valid until the next `nl_*` call on the same thread; do not
// free.
const char *nl_last_error_message(void);

// Release a string returned through a `char **out` parameter.
void nl_string_free(char *s);

// Load a model (and its vocabulary, if the manifest names one) from a JSON
// manifest path.
enum NlStatus nl_model_load(const char *manifest_path, struct NlModel **out);

// Generate a synthetic model from a JSON generator spec (the same schema
// the CLI's `synth --spec` accepts).
enum NlStatus nl_model_synthesize(const char *spec_json, struct NlModel **out);

void nl_model_free(struct NlModel *model);

// Model width (`0` if `model` is null; likewise for the three functions
// below).
size_t nl_model_d_model(const struct NlModel *model);

size_t nl_model_n_layers(const struct NlModel *model);

size_t nl_model_d_mlp(const struct NlModel *model);

size_t nl_model_vocab_size(const struct NlModel *model);

// `1` when the model carries a tokenizer vocabulary (required by
// [`nl_tokenize`], [`nl_detokenize`], and [`nl_generate`]), else `0`.
int32_t nl_model_has_vocab(const struct NlModel *model);

// Tokenize UTF-8 text with the model's vocabulary.
enum NlStatus nl_tokenize(const struct NlModel *model, const char *text, struct NlTokens **out);

// Decode token ids back into text.
enum NlStatus nl_detokenize(const struct NlModel *model,
                            const uint32_t *ids,
                            size_t len,
                            char **out);

size_t nl_tokens_len(const struct NlTokens *tokens);

// The id at `index`, or `-1` when `tokens` is null or `index` is out of
// range.
int64_t nl_tokens_get(const struct NlTokens *tokens, size_t index);

void nl_tokens_free(struct NlTokens *tokens);

// Create an empty suppression policy with amplification factor `factor`
// (must be positive and finite).
enum NlStatus nl_policy_new(double factor, struct NlPolicy **out);

// Add a (layer, neuron) suppression target. Bounds are checked against the
// model when the policy is used.
enum NlStatus nl_policy_add_target(struct NlPolicy *policy, size_t layer, size_t index);

void nl_policy_free(struct NlPolicy *policy);

// Greedy-decode `max_new` tokens after `prompt`, optionally under a
// suppression policy (`policy` may be null). Writes the detokenized
// continuation (the new tokens only) to `out`.
enum NlStatus nl_generate(const struct NlModel *model,
                          const char *prompt,
                          size_t max_new,
                          const struct NlPolicy *policy,
                          char **out);

// Project a residual-space vector (`h`, length `d_model`) through the
// unembedding and write the top-`k` tokens as a JSON document to `out`.
enum NlStatus nl_logit_lens_json(const struct NlModel *model,
                                 const double *h,
                                 size_t len,
                                 size_t k,
                                 char **out);

// Load a trained probe from its JSON manifest path.
enum NlStatus nl_probe_load(const char *manifest_path, struct NlProbe **out);

void nl_probe_free(struct NlProbe *probe);

// Feature dimension the probe expects (`0` if `probe` is null).
size_t nl_probe_dim(const struct NlProbe *probe);

size_t nl_probe_num_classes(const struct NlProbe *probe);

// The name of class `index` in the probe's class order.
enum NlStatus nl_probe_class_name(const struct NlProbe *probe, size_t index, char **out);

// Classify a feature vector (length must equal [`nl_probe_dim`]); writes
// the predicted class name to `out`.
enum NlStatus nl_probe_predict(const struct NlProbe *probe,
                               const double *features,
                               size_t len,
                               char **out);

// Copy the probe's direction (weight column) for the named class into
// `out_buf`, which must hold exactly [`nl_probe_dim`] doubles.
enum NlStatus nl_probe_direction(const struct NlProbe *probe,
                                 const char *class_name,
                                 double *out_buf,
                                 size_t buf_len);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* NEUROLENS_H */
