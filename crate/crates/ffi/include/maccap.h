#ifndef MACCAP_H
#define MACCAP_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result codes. Zero is success.
 */
typedef enum MaccapStatus {
  MACCAP_STATUS_OK = 0,
  MACCAP_STATUS_NULL_POINTER = 1,
  MACCAP_STATUS_INVALID_ARGUMENT = 2,
  MACCAP_STATUS_SHAPE = 3,
  MACCAP_STATUS_IO = 4,
  MACCAP_STATUS_FORMAT = 5,
  MACCAP_STATUS_INCOMPATIBLE_CHECKPOINT = 6,
  MACCAP_STATUS_INVALID_CORPUS = 7,
  MACCAP_STATUS_INSUFFICIENT_CORPUS = 8,
  MACCAP_STATUS_NUMERIC_FAILURE = 9,
  MACCAP_STATUS_NO_ANSWER = 10,
  MACCAP_STATUS_BACKEND_UNAVAILABLE = 11,
  MACCAP_STATUS_INVALID_UTF8 = 12,
  MACCAP_STATUS_PANIC = 13,
} MaccapStatus;

/**
 * A stack plus a trained adaptor and decoding settings.
 */
typedef struct MaccapPipeline MaccapPipeline;

/**
 * Toy backbone, language model and vocabulary.
 */
typedef struct MaccapStack MaccapStack;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a
 * success. The pointer stays valid until the next call on this thread.
 */
const char *maccap_last_error_message(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void maccap_string_free(char *s);

/**
 * Builds the toy stack from a TOML run configuration, or the defaults when
 * `config_path` is null.
 *
 * # Safety
 * `config_path` is null or a nul-terminated string; `out` is writable.
 */
enum MaccapStatus maccap_stack_new(const char *config_path, struct MaccapStack **out);

/**
 * # Safety
 * `stack` is null or a live handle from [`maccap_stack_new`].
 */
void maccap_stack_free(struct MaccapStack *stack);

/**
 * Width of the joint embedding space, or 0 for a null handle.
 *
 * # Safety
 * `stack` is null or a live handle.
 */
size_t maccap_stack_embed_dim(const struct MaccapStack *stack);

/**
 * Encodes `text` into `out`, which must hold exactly the embedding width.
 *
 * # Safety
 * `stack` is a live handle, `text` a nul-terminated string and `out` points
 * to `out_len` writable doubles.
 */
enum MaccapStatus maccap_encode_text(const struct MaccapStack *stack,
                                     const char *text,
                                     double *out,
                                     size_t out_len);

/**
 * Cosine similarity of two vectors of length `len`.
 *
 * # Safety
 * `a` and `b` point to `len` readable doubles; `out` is writable.
 */
enum MaccapStatus maccap_cosine(const double *a, const double *b, size_t len, double *out);

/**
 * Writes `n_cr` noisy unit-norm copies of `t` (length `dim`) into `out`,
 * row-major. `distribution` is 0 for Gaussian and 1 for uniform.
 *
 * # Safety
 * `t` points to `dim` readable doubles and `out` to `out_len` writable ones.
 */
enum MaccapStatus maccap_inject_noise(const double *t,
                                      size_t dim,
                                      size_t n_cr,
                                      double sigma,
                                      uint32_t distribution,
                                      uint64_t seed,
                                      double *out,
                                      size_t out_len);

/**
 * Loads a pipeline from a run configuration (null for defaults) and an
 * adaptor checkpoint. The vocabulary beside the checkpoint is used when the
 * configuration names none.
 *
 * # Safety
 * String arguments are null (where allowed) or nul-terminated; `out` is
 * writable.
 */
enum MaccapStatus maccap_pipeline_load(const char *config_path,
                                       const char *checkpoint_path,
                                       struct MaccapPipeline **out);

/**
 * # Safety
 * `pipeline` is null or a live handle from [`maccap_pipeline_load`].
 */
void maccap_pipeline_free(struct MaccapPipeline *pipeline);

/**
 * Captions the image at `image_path` (a pixel file, or a `.json`
 * synthetic image description).
 *
 * # Safety
 * `pipeline` is a live handle, `image_path` nul-terminated, `out_caption`
 * writable and `out_similarity` null or writable.
 */
enum MaccapStatus maccap_pipeline_caption(const struct MaccapPipeline *pipeline,
                                          const char *image_path,
                                          char **out_caption,
                                          double *out_similarity);

/**
 * Corpus BLEU-`max_n` over `n` items.
 *
 * # Safety
 * `candidates` and `references` point to `n` nul-terminated strings;
 * `out` is writable.
 */
enum MaccapStatus maccap_bleu(const char *const *candidates,
                              const char *const *references,
                              size_t n,
                              size_t max_n,
                              double *out);

/**
 * Corpus CIDEr over `n` items; `cider_d` enables clipping.
 *
 * # Safety
 * As for [`maccap_bleu`].
 */
enum MaccapStatus maccap_cider(const char *const *candidates,
                               const char *const *references,
                               size_t n,
                               bool cider_d,
                               double *out);

/**
 * The question-answering prompt for a caption and question.
 *
 * # Safety
 * `caption` and `question` are nul-terminated; `out` is writable.
 */
enum MaccapStatus maccap_build_prompt(const char *caption, const char *question, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MACCAP_H */
