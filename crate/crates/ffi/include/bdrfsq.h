#ifndef BDRFSQ_H
#define BDRFSQ_H

#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every call.
 */
typedef enum BdrfsqStatus {
  BDRFSQ_STATUS_OK = 0,
  BDRFSQ_STATUS_NULL_POINTER = 1,
  /**
   * Bad shape, configuration or stage count.
   */
  BDRFSQ_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Output buffer shorter than required.
   */
  BDRFSQ_STATUS_BUFFER_TOO_SMALL = 3,
  BDRFSQ_STATUS_IO = 4,
  /**
   * Malformed parameter file or container.
   */
  BDRFSQ_STATUS_FORMAT = 5,
  /**
   * Token or code outside its grid.
   */
  BDRFSQ_STATUS_OUT_OF_RANGE = 6,
  BDRFSQ_STATUS_NON_FINITE = 7,
  BDRFSQ_STATUS_INTERNAL = 8,
} BdrfsqStatus;

/**
 * Opaque model: configuration plus parameters.
 */
typedef struct BdrfsqModel BdrfsqModel;

/**
 * Dimensions of a loaded model.
 */
typedef struct BdrfsqModelInfo {
  uint32_t stages;
  uint32_t emotion_input_dim;
  uint32_t acoustic_input_dim;
  /**
   * Width of decoded frames.
   */
  uint32_t latent_dim;
  uint32_t fsq_dim;
  uint32_t codes_per_stage;
  uint32_t frame_rate_hz;
} BdrfsqModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 */
size_t bdrfsq_last_error(char *buf, size_t len);

/**
 * Loads a JSON parameter file.
 */
enum BdrfsqStatus bdrfsq_model_load(const char *path, struct BdrfsqModel **out);

/**
 * Parses a JSON parameter document held in memory.
 */
enum BdrfsqStatus bdrfsq_model_from_json(const char *json, struct BdrfsqModel **out);

/**
 * Fresh parameters for the default configuration (K=8, 256+768 latent,
 * 3+6 FSQ dims) with the given input feature widths.
 */
enum BdrfsqStatus bdrfsq_model_init_default(uint64_t seed,
                                            uint32_t emotion_input_dim,
                                            uint32_t acoustic_input_dim,
                                            struct BdrfsqModel **out);

/**
 * Releases a model. Null is ignored.
 */
void bdrfsq_model_free(struct BdrfsqModel *model);

enum BdrfsqStatus bdrfsq_model_info(const struct BdrfsqModel *model, struct BdrfsqModelInfo *info);

/**
 * Encodes `frames` frames of emotion and acoustic features into
 * `frames × stages` tokens. `stages` 0 means all stages.
 */
enum BdrfsqStatus bdrfsq_encode(const struct BdrfsqModel *model,
                                const float *emotion,
                                const float *acoustic,
                                size_t frames,
                                uint32_t stages,
                                uint16_t *tokens,
                                size_t tokens_len);

/**
 * Decodes `frames × stages` tokens into `frames × latent_dim` values.
 * Any stage count from 1 to K is accepted.
 */
enum BdrfsqStatus bdrfsq_decode(const struct BdrfsqModel *model,
                                const uint16_t *tokens,
                                size_t frames,
                                uint32_t stages,
                                float *out,
                                size_t out_len);

/**
 * Bits per second when transmitting the first `stages` stages.
 */
enum BdrfsqStatus bdrfsq_bitrate(const struct BdrfsqModel *model, uint32_t stages, double *bps);

/**
 * Packs one per-dimension code vector (length `fsq_dim`) into a stage token.
 */
enum BdrfsqStatus bdrfsq_pack(const struct BdrfsqModel *model,
                              const uint32_t *codes,
                              size_t codes_len,
                              uint32_t *token);

/**
 * Splits a stage token into `fsq_dim` per-dimension codes.
 */
enum BdrfsqStatus bdrfsq_unpack(const struct BdrfsqModel *model,
                                uint32_t token,
                                uint32_t *codes,
                                size_t codes_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BDRFSQ_H */
