#ifndef TILEPERF_H
#define TILEPERF_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum TpStatus {
  TP_STATUS_OK = 0,
  TP_STATUS_NULL_ARGUMENT = 1,
  TP_STATUS_INVALID_UTF8 = 2,
  TP_STATUS_IO = 3,
  TP_STATUS_PARSE = 4,
  TP_STATUS_UNKNOWN_GPU = 5,
  TP_STATUS_UNKNOWN_OPERATOR = 6,
  TP_STATUS_UNTRAINED_OPERATOR = 7,
  TP_STATUS_INVALID_INPUT = 8,
  TP_STATUS_PANIC = 9,
} TpStatus;

/**
 * Fusion applied before graph prediction.
 */
typedef enum TpFusion {
  TP_FUSION_NONE = 0,
  TP_FUSION_ANNOTATED = 1,
  TP_FUSION_GREEDY = 2,
} TpFusion;

/**
 * A GPU catalog.
 */
typedef struct TpCatalog TpCatalog;

/**
 * Catalog, tile database and latency model bundled for prediction.
 */
typedef struct TpEngine TpEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a
 * success. The pointer stays valid until the next call on this thread.
 */
const char *tp_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tp_version(void);

/**
 * The builtin catalog.
 *
 * # Safety
 * `out` must be valid for a pointer write.
 */
enum TpStatus tp_catalog_builtin(struct TpCatalog **out);

/**
 * Load a catalog file.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` must be valid for a pointer write.
 */
enum TpStatus tp_catalog_load(const char *path, struct TpCatalog **out);

/**
 * Number of GPUs; 0 for a null handle.
 *
 * # Safety
 * `cat` is null or a live catalog handle.
 */
size_t tp_catalog_len(const struct TpCatalog *cat);

/**
 * Copy the name of GPU `index` into `buf` (capacity `cap`, NUL
 * included). `*needed` receives the required capacity; a short buffer
 * is left untouched and reported as `TP_STATUS_INVALID_INPUT`.
 *
 * # Safety
 * `cat` is a live handle, `buf` is valid for `cap` bytes (or null when
 * `cap` is 0) and `needed` is valid for a write.
 */
enum TpStatus tp_catalog_gpu_name(const struct TpCatalog *cat,
                                  size_t index,
                                  char *buf,
                                  size_t cap,
                                  size_t *needed);

/**
 * # Safety
 * `cat` is null or a handle from this library not yet freed.
 */
void tp_catalog_free(struct TpCatalog *cat);

/**
 * Build an engine. `weights` names a weight directory or file; null
 * selects the noise-free synthetic oracle. `tiledb` may be null for
 * heuristic tiles. The catalog is copied, so it may be freed afterwards.
 *
 * # Safety
 * `cat` is a live handle; string arguments are null or NUL-terminated;
 * `out` must be valid for a pointer write.
 */
enum TpStatus tp_engine_open(const struct TpCatalog *cat,
                             const char *weights,
                             const char *tiledb,
                             struct TpEngine **out);

/**
 * # Safety
 * `engine` is null or a handle from this library not yet freed.
 */
void tp_engine_free(struct TpEngine *engine);

/**
 * Latency in seconds of one kernel. `op` uses graph-file names (`bmm`,
 * `fc`, `add`, `softmax`, ...); `dtype` is `fp32`, `fp16` or null for fp32.
 *
 * # Safety
 * `engine` is a live handle; strings are NUL-terminated (`dtype` may be
 * null); `dims` is valid for `rank` reads; `latency_s` is valid for a write.
 */
enum TpStatus tp_engine_predict_kernel(const struct TpEngine *engine,
                                       const char *gpu,
                                       const char *op,
                                       const uint64_t *dims,
                                       size_t rank,
                                       const char *dtype,
                                       double *latency_s);

/**
 * Per-device latency in seconds of a graph file.
 *
 * # Safety
 * `engine` is a live handle; strings are NUL-terminated; `total_s` is
 * valid for a write.
 */
enum TpStatus tp_engine_predict_graph(const struct TpEngine *engine,
                                      const char *gpu,
                                      const char *graph_path,
                                      enum TpFusion fusion,
                                      double *total_s);

/**
 * Iteration latency in seconds of a graph under a plan file.
 *
 * # Safety
 * `engine` is a live handle; strings are NUL-terminated; `total_s` is
 * valid for a write.
 */
enum TpStatus tp_engine_estimate_parallel(const struct TpEngine *engine,
                                          const char *gpu,
                                          const char *graph_path,
                                          const char *plan_path,
                                          enum TpFusion fusion,
                                          double *total_s);

/**
 * Ring all-reduce time in seconds for `bytes` over `p` GPUs joined by
 * links of `link_bw` bytes/s used at `link_utilization`.
 *
 * # Safety
 * `seconds` is valid for a write.
 */
enum TpStatus tp_allreduce_latency(double bytes,
                                   uint32_t p,
                                   double link_bw,
                                   double link_utilization,
                                   double *seconds);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TILEPERF_H */
