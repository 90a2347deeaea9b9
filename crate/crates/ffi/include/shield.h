#ifndef SHIELD_H
#define SHIELD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum ShieldStatus {
  SHIELD_STATUS_OK = 0,
  SHIELD_STATUS_NULL_POINTER = 1,
  SHIELD_STATUS_INVALID_ARGUMENT = 2,
  SHIELD_STATUS_IO = 3,
  SHIELD_STATUS_FORMAT = 4,
  SHIELD_STATUS_SHAPE = 5,
  SHIELD_STATUS_GRAPH = 6,
  SHIELD_STATUS_PANIC = 7,
} ShieldStatus;

// Selection mode of a bundle as reported by [`shield_bundle_info`].
typedef enum ShieldMode {
  SHIELD_MODE_BASELINE = 0,
  SHIELD_MODE_MODELWISE = 1,
  SHIELD_MODE_LAYERWISE = 2,
} ShieldMode;

// A loaded parameter bundle.
typedef struct ShieldBundle ShieldBundle;

// A compiled branch-free graph.
typedef struct ShieldGraph ShieldGraph;

typedef struct ShieldBundleInfo {
  uint32_t mode;
  size_t model_count;
  size_t layer_count;
  size_t input_dim;
  size_t output_dim;
  bool quantized;
} ShieldBundleInfo;

// Message of the last failed call on this thread, or NULL. The pointer is
// valid until the next failing call on the same thread.
const char *shield_last_error(void);

// Loads a bundle file. On success `*out` owns a handle to release with
// [`shield_bundle_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum ShieldStatus shield_bundle_load(const char *path, struct ShieldBundle **out);

// # Safety
// `bundle` must come from [`shield_bundle_load`] and not be used afterwards.
void shield_bundle_free(struct ShieldBundle *bundle);

// # Safety
// `bundle` must be a live handle and `info` a valid pointer.
enum ShieldStatus shield_bundle_info(const struct ShieldBundle *bundle,
                                     struct ShieldBundleInfo *info);

// Compiles a bundle: the plain graph for baselines, the multiplexed graph
// otherwise. Release the result with [`shield_graph_free`].
//
// # Safety
// `bundle` must be a live handle and `out` a valid pointer.
enum ShieldStatus shield_graph_compile(const struct ShieldBundle *bundle, struct ShieldGraph **out);

// # Safety
// `graph` must come from [`shield_graph_compile`] and not be used afterwards.
void shield_graph_free(struct ShieldGraph *graph);

// # Safety
// `graph` must be a live handle and `count` a valid pointer.
enum ShieldStatus shield_graph_node_count(const struct ShieldGraph *graph, size_t *count);

// Number of ±1 selection inputs the graph expects.
//
// # Safety
// `graph` must be a live handle and `count` a valid pointer.
enum ShieldStatus shield_graph_selection_bits(const struct ShieldGraph *graph, size_t *count);

// Runs the graph on one image. `bits` holds one ±1 value per selection
// input; `out` receives the class probabilities and must hold exactly
// `out_len` = output dimension values.
//
// # Safety
// Pointers must reference arrays of the given lengths.
enum ShieldStatus shield_graph_execute(const struct ShieldGraph *graph,
                                       const float *image,
                                       size_t image_len,
                                       const float *bits,
                                       size_t bits_len,
                                       float *out,
                                       size_t out_len);

// Text dump of the graph, one node per line. Release with
// [`shield_string_free`].
//
// # Safety
// `graph` must be a live handle and `out` a valid pointer.
enum ShieldStatus shield_graph_dump(const struct ShieldGraph *graph, char **out);

// # Safety
// `s` must come from this library and not be used afterwards.
void shield_string_free(char *s);

// Per-point Welch t-scores. `a` is an `na × len` row-major matrix, `b` is
// `nb × len`, and `out` receives `len` values.
//
// # Safety
// Pointers must reference arrays of the given sizes.
enum ShieldStatus shield_welch_t(const double *a,
                                 size_t na,
                                 const double *b,
                                 size_t nb,
                                 size_t len,
                                 double *out);

// Hamming weight of an int8 value's two's-complement pattern.
float shield_leak_value(int8_t q);

#endif  /* SHIELD_H */
