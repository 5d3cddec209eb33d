/* SPDX-License-Identifier: Apache-2.0 */

#ifndef CKTGNN_H
#define CKTGNN_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CktStatus {
  CKT_STATUS_OK = 0,
  CKT_STATUS_NULL_POINTER = 1,
  CKT_STATUS_INVALID_UTF8 = 2,
  /**
   * Malformed JSON, netlist or file contents.
   */
  CKT_STATUS_PARSE = 3,
  /**
   * Structurally broken graph or an invalid circuit.
   */
  CKT_STATUS_INVALID_CIRCUIT = 4,
  CKT_STATUS_SIMULATION = 5,
  CKT_STATUS_IO = 6,
  /**
   * Wrong buffer size or latent dimension.
   */
  CKT_STATUS_SHAPE = 7,
  CKT_STATUS_PANIC = 8,
  CKT_STATUS_OTHER = 9,
} CktStatus;

/**
 * A device-level circuit graph.
 */
typedef struct CktCircuit CktCircuit;

/**
 * A trained VAE.
 */
typedef struct CktModel CktModel;

/**
 * Small-signal specs; unavailable values are NaN.
 */
typedef struct CktSpecs {
  bool converged;
  double gain_db;
  double bw_hz;
  double ugf_hz;
  double pm_deg;
  double fom;
} CktSpecs;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *ckt_last_error(void);

/**
 * Library version string (static).
 */
const char *ckt_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void ckt_string_free(char *s);

/**
 * Parses a circuit from device-graph JSON or a netlist.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum CktStatus ckt_circuit_parse(const char *text, struct CktCircuit **out);

/**
 * Releases a circuit. Null is ignored.
 *
 * # Safety
 * `c` must come from this library and not be freed twice.
 */
void ckt_circuit_free(struct CktCircuit *c);

/**
 * Device-graph JSON of a circuit.
 *
 * # Safety
 * `c` must be a live handle; `out` must be writable.
 */
enum CktStatus ckt_circuit_to_json(const struct CktCircuit *c, char **out);

/**
 * Simulates with the default sweep and FoM weights.
 *
 * # Safety
 * `c` must be a live handle; `out` must be writable.
 */
enum CktStatus ckt_circuit_simulate(const struct CktCircuit *c, struct CktSpecs *out);

/**
 * Subgraph-basis form of a circuit as JSON.
 *
 * # Safety
 * `c` must be a live handle; `out` must be writable.
 */
enum CktStatus ckt_circuit_graphlize(const struct CktCircuit *c, char **out);

/**
 * SPICE netlist of a circuit with the default sweep directive.
 *
 * # Safety
 * `c` must be a live handle; `out` must be writable.
 */
enum CktStatus ckt_circuit_netlist(const struct CktCircuit *c, char **out);

/**
 * Loads a model checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CktStatus ckt_model_load(const char *path, struct CktModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `m` must come from this library and not be freed twice.
 */
void ckt_model_free(struct CktModel *m);

/**
 * Latent dimension of a model, 0 for null.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
size_t ckt_model_latent_dim(const struct CktModel *m);

/**
 * Posterior mean of a circuit; `len` must equal the latent dimension.
 *
 * # Safety
 * `m` and `c` must be live handles; `z` must hold `len` doubles.
 */
enum CktStatus ckt_model_encode(const struct CktModel *m,
                                const struct CktCircuit *c,
                                double *z,
                                size_t len);

/**
 * Greedy decode of a latent point. Fails with `InvalidCircuit` when the
 * decoded graph has no device-level form.
 *
 * # Safety
 * `m` must be a live handle; `z` must hold `len` doubles; `out` must be
 * writable.
 */
enum CktStatus ckt_model_decode(const struct CktModel *m,
                                const double *z,
                                size_t len,
                                struct CktCircuit **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CKTGNN_H */
