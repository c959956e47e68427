#ifndef PROMPTSMITH_H
#define PROMPTSMITH_H

#include <stddef.h>
#include <stdint.h>

typedef enum PsStatus {
  PS_STATUS_OK = 0,
  PS_STATUS_NULL_ARGUMENT = 1,
  PS_STATUS_INVALID_UTF8 = 2,
  PS_STATUS_CONTRACT = 3,
  PS_STATUS_VOCABULARY = 4,
  PS_STATUS_NO_MATCH = 5,
  PS_STATUS_CAPABILITY = 6,
  PS_STATUS_CONFIG = 7,
  PS_STATUS_GATEWAY = 8,
  PS_STATUS_BACKEND = 9,
  PS_STATUS_NUMERIC = 10,
  PS_STATUS_IO = 11,
  PS_STATUS_NOT_FOUND = 12,
  PS_STATUS_BUSY = 13,
  PS_STATUS_PANIC = 14,
} PsStatus;

typedef enum PsPromptLevel {
  PS_PROMPT_LEVEL_ONE_NOUN = 0,
  PS_PROMPT_LEVEL_FULL_NOUNS = 1,
  PS_PROMPT_LEVEL_FULL_DESCRIPTION = 2,
} PsPromptLevel;

/*
 Opaque model gateway.
 */
typedef struct PsGateway PsGateway;

/*
 Opaque RGB image.
 */
typedef struct PsImage PsImage;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. Valid until the
 next call on the same thread.
 */
const char *ps_last_error(void);

/*
 Library version, a static string.
 */
const char *ps_version(void);

/*
 Releases a string returned by this library. NULL is ignored.
 */
void ps_string_free(char *s);

/*
 Deterministic offline gateway.
 */
enum PsStatus ps_gateway_new_mock(uint64_t seed, struct PsGateway **out);

/*
 Gateway backed by a model server at `base_url`.
 */
enum PsStatus ps_gateway_connect(const char *base_url, struct PsGateway **out);

void ps_gateway_free(struct PsGateway *gw);

/*
 Loads a PNG (or any format the image decoder knows) from `path`.
 */
enum PsStatus ps_image_load(const char *path, struct PsImage **out);

/*
 Decodes PNG bytes.
 */
enum PsStatus ps_image_from_png(const uint8_t *data, uintptr_t len, struct PsImage **out);

/*
 Seeded synthetic test image.
 */
enum PsStatus ps_image_synthetic(uint64_t seed,
                                 uint32_t width,
                                 uint32_t height,
                                 struct PsImage **out);

enum PsStatus ps_image_size(const struct PsImage *img, uint32_t *width, uint32_t *height);

void ps_image_free(struct PsImage *img);

/*
 Caption of at most `max_tokens` tokens, as a Prompt JSON object.
 */
enum PsStatus ps_caption(const struct PsGateway *gw,
                         const struct PsImage *img,
                         uintptr_t max_tokens,
                         char **out_json);

/*
 Injects `source_attr` into the image caption. `config_json` is an
 optional InjectConfig object (NULL for defaults). Writes the
 InjectionReport as JSON.
 */
enum PsStatus ps_inject(const struct PsGateway *gw,
                        const struct PsImage *img,
                        const char *source_attr,
                        const char *config_json,
                        char **out_json);

/*
 Hard-prompt optimization. `config_json` is an optional OptimizerConfig
 object. Writes the OptimizeOutcome, trace included, as JSON.
 */
enum PsStatus ps_optimize(const struct PsGateway *gw,
                          const struct PsImage *img,
                          const char *source_attr,
                          const char *config_json,
                          char **out_json);

/*
 Removes redundant words from `prompt`. Words of `protect` (may be NULL)
 are never removed. Writes the FilterOutcome as JSON.
 */
enum PsStatus ps_filter(const struct PsGateway *gw,
                        const struct PsImage *img,
                        const char *prompt,
                        const char *protect,
                        char **out_json);

/*
 CLIP score (100 × cosine) of `text` against the image.
 */
enum PsStatus ps_clip_score(const struct PsGateway *gw,
                            const struct PsImage *img,
                            const char *text,
                            double *out);

/*
 `prompt` with every occurrence of `source` replaced by `target`.
 */
enum PsStatus ps_edited_prompt(const struct PsGateway *gw,
                               const char *prompt,
                               const char *source,
                               const char *target,
                               char **out);

/*
 Prompt level of `prompt` for the given attribute pair.
 */
enum PsStatus ps_classify_level(const char *prompt,
                                const char *source,
                                const char *target,
                                enum PsPromptLevel *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROMPTSMITH_H */
