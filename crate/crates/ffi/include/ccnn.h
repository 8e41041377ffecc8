#ifndef CCNN_H
#define CCNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CcnnStatus {
  CCNN_STATUS_OK = 0,
  CCNN_STATUS_NULL_POINTER = 1,
  CCNN_STATUS_INVALID_ARGUMENT = 2,
  CCNN_STATUS_IO = 3,
  /**
   * Malformed or unsupported file contents.
   */
  CCNN_STATUS_FORMAT = 4,
  CCNN_STATUS_DIMENSION = 5,
  CCNN_STATUS_USAGE = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  CCNN_STATUS_INTERNAL = 7,
} CcnnStatus;

/**
 * Opaque model handle.
 */
typedef struct CcnnModel CcnnModel;

typedef struct CcnnModelInfo {
  uint32_t input_size;
  uint32_t input_channels;
  uint32_t num_classes;
  /**
   * 1 for a final-head-only network, 3 with both branches.
   */
  uint32_t num_heads;
  uint64_t param_count;
} CcnnModelInfo;

typedef struct CcnnCascadeResult {
  uint32_t predicted_class;
  /**
   * Non-zero when the sample left at the gating branch.
   */
  uint8_t early_exit;
  double confidence;
  uint64_t macs;
} CcnnCascadeResult;

typedef struct CcnnCostSummary {
  uint64_t params;
  uint64_t mid_a_macs;
  uint64_t mid_b_macs;
  uint64_t final_macs;
  /**
   * Every layer including both branches.
   */
  uint64_t total_macs;
  /**
   * Storage in bytes at 32-bit floats.
   */
  double float_bytes;
  /**
   * Storage in bytes under the 8/4/8 scheme.
   */
  double quantized_bytes;
} CcnnCostSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call into this library on the same thread.
 */
const char *ccnn_last_error(void);

/**
 * Static version string.
 */
const char *ccnn_version(void);

enum CcnnStatus ccnn_model_load(const char *path, struct CcnnModel **out);

enum CcnnStatus ccnn_model_load_bytes(const uint8_t *data, size_t len, struct CcnnModel **out);

/**
 * Releases a handle. Null is ignored.
 */
void ccnn_model_free(struct CcnnModel *model);

enum CcnnStatus ccnn_model_info(const struct CcnnModel *model, struct CcnnModelInfo *out);

/**
 * Classifies one image of `input_channels * input_size^2` floats in `[0, 1]`.
 * The gate is the first branch; `fuse_late` non-zero averages the second
 * branch with the final head on the late path.
 */
enum CcnnStatus ccnn_cascade_infer(const struct CcnnModel *model,
                                   const float *image,
                                   size_t len,
                                   double threshold,
                                   uint8_t fuse_late,
                                   struct CcnnCascadeResult *out);

/**
 * Writes `num_classes` logits of `head` ("mid_a", "mid_b" or "final") into `out`.
 */
enum CcnnStatus ccnn_head_logits(const struct CcnnModel *model,
                                 const char *head,
                                 const float *image,
                                 size_t len,
                                 float *out,
                                 size_t out_len);

/**
 * Analytic cost of the full-width cascaded network for `num_classes`.
 */
enum CcnnStatus ccnn_default_cost(uint32_t num_classes, struct CcnnCostSummary *out);

/**
 * Creates a new handle whose weights are quantized then dequantized with
 * the given bit widths (2, 4, 8, 16 or 32 for float).
 */
enum CcnnStatus ccnn_model_quantize(const struct CcnnModel *model,
                                    uint8_t conv_bits,
                                    uint8_t fc_bits,
                                    uint8_t gwap_bits,
                                    struct CcnnModel **out);

/**
 * Writes the model to `path` quantized with the given bit widths.
 * `storage_bytes`, if non-null, receives the analytic weight storage.
 */
enum CcnnStatus ccnn_model_save_quantized(const struct CcnnModel *model,
                                          const char *path,
                                          uint8_t conv_bits,
                                          uint8_t fc_bits,
                                          uint8_t gwap_bits,
                                          double *storage_bytes);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CCNN_H */
