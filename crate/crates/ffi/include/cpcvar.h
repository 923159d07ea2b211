#ifndef CPCVAR_H
#define CPCVAR_H

#include <stddef.h>
#include <stdint.h>

typedef enum CpcStatus {
  CPC_STATUS_OK = 0,
  CPC_STATUS_NULL_POINTER = 1,
  CPC_STATUS_INVALID_UTF8 = 2,
  CPC_STATUS_BUFFER_TOO_SMALL = 3,
  CPC_STATUS_CONFIG = 4,
  CPC_STATUS_INVALID_ARGUMENT = 5,
  CPC_STATUS_SHAPE = 6,
  CPC_STATUS_NUMERIC = 7,
  CPC_STATUS_ARTIFACT = 8,
  CPC_STATUS_STATE = 9,
  CPC_STATUS_UNKNOWN_TOKEN = 10,
  CPC_STATUS_IO = 11,
  CPC_STATUS_PANIC = 12,
} CpcStatus;

typedef struct CpcLedger CpcLedger;

/**
 * Base model plus any registered concept tokens.
 */
typedef struct CpcModel CpcModel;

typedef struct CpcTokenizer CpcTokenizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next call on the same thread.
 */
const char *cpc_last_error(void);

/**
 * Static, nul-terminated crate version.
 */
const char *cpc_version(void);

enum CpcStatus cpc_model_load(const char *path, struct CpcModel **out);

void cpc_model_free(struct CpcModel *model);

enum CpcStatus cpc_model_save(const struct CpcModel *model, const char *path, uint64_t seed);

/**
 * Registers `<name>` with its row copied from `class_word`.
 */
enum CpcStatus cpc_model_register_concept(struct CpcModel *model,
                                          const char *name,
                                          const char *class_word,
                                          size_t *out_id);

/**
 * Number of cross-attention coordinates, the mask index space.
 */
enum CpcStatus cpc_model_ca_len(const struct CpcModel *model, size_t *out);

/**
 * Samples a token pyramid for `prompt`; `top_k` 0 keeps the whole
 * vocabulary. Writes the flat tokens in scale order.
 */
enum CpcStatus cpc_model_sample(const struct CpcModel *model,
                                const char *prompt,
                                uint64_t seed,
                                double temperature,
                                size_t top_k,
                                size_t *tokens,
                                size_t capacity,
                                size_t *out_len);

/**
 * Composition from a JSON spec; writes the flat tokens like
 * [`cpc_model_sample`].
 */
enum CpcStatus cpc_model_compose(const struct CpcModel *model,
                                 const char *spec_json,
                                 double temperature,
                                 size_t top_k,
                                 size_t *tokens,
                                 size_t capacity,
                                 size_t *out_len);

enum CpcStatus cpc_tokenizer_load(const char *path, struct CpcTokenizer **out);

void cpc_tokenizer_free(struct CpcTokenizer *tokenizer);

/**
 * Decodes flat `tokens` laid out by `model`'s schedule into interleaved
 * RGB8 of `*out_height` x `*out_width` pixels.
 */
enum CpcStatus cpc_tokenizer_decode(const struct CpcTokenizer *tokenizer,
                                    const struct CpcModel *model,
                                    const size_t *tokens,
                                    size_t n_tokens,
                                    uint8_t *rgb,
                                    size_t capacity,
                                    size_t *out_len,
                                    size_t *out_height,
                                    size_t *out_width);

enum CpcStatus cpc_ledger_load(const char *path, struct CpcLedger **out);

void cpc_ledger_free(struct CpcLedger *ledger);

/**
 * Learned task count and popcount of the history mask.
 */
enum CpcStatus cpc_ledger_summary(const struct CpcLedger *ledger,
                                  size_t *out_tasks,
                                  size_t *out_history_popcount);

/**
 * Top-`p` percent of `|saliency|` as a packed little-endian bit mask of
 * `ceil(len / 8)` bytes.
 */
enum CpcStatus cpc_select_mask(const double *saliency,
                               size_t len,
                               double p,
                               uint8_t *bits,
                               size_t capacity,
                               size_t *out_len,
                               size_t *out_popcount);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CPCVAR_H */
