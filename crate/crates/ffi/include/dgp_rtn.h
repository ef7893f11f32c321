#ifndef DGP_RTN_H
#define DGP_RTN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DgpStatus {
  DGP_STATUS_OK = 0,
  // A required pointer argument was null.
  DGP_STATUS_NULL_ARGUMENT = 1,
  // A path was not valid UTF-8.
  DGP_STATUS_INVALID_UTF8 = 2,
  DGP_STATUS_CONTRACT = 3,
  DGP_STATUS_DOMAIN = 4,
  DGP_STATUS_SHAPE = 5,
  DGP_STATUS_NON_FINITE = 6,
  DGP_STATUS_IO = 7,
  DGP_STATUS_FORMAT = 8,
  DGP_STATUS_CONFIG = 9,
  // The library panicked; this is a bug.
  DGP_STATUS_PANIC = 10,
} DgpStatus;

// A set of conversations.
typedef struct DgpDataset DgpDataset;

// A model restored from a checkpoint, with the β it was trained at.
typedef struct DgpModel DgpModel;

// Noiseless metrics over a dataset; `frames` is the number of labelled
// frames the averages run over.
typedef struct DgpMetrics {
  double ce;
  double kl_edges;
  double kl_transform;
  double total;
  double accuracy;
  uint64_t frames;
} DgpMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty if none. The
// pointer stays valid until the next failing call on the same thread.
const char *dgp_last_error(void);

// Minimizer `m ∈ (0, ½)` of the KL from the Binomial proxy to `𝒩(mu, var)`.
//
// # Safety
// `out` must be null or valid for writes.
enum DgpStatus dgp_theorem1_m(double mu, double var, double *out);

// Closed-form upper bound on `KL(ℬ(∞, m) ‖ ℬ(∞, m0))`.
//
// # Safety
// `out` must be null or valid for writes.
enum DgpStatus dgp_binomial_kl_bound(double m, double m0, double *out);

// `KL(ℬ(n, lambda) ‖ ℬ(n, lambda0))`.
//
// # Safety
// `out` must be null or valid for writes.
enum DgpStatus dgp_binomial_kl_exact(uint64_t n, double lambda, double lambda0, double *out);

// Excess of the proxy KL above its infimum at `m` in the `λ → 0` limit.
//
// # Safety
// `out` must be null or valid for writes.
enum DgpStatus dgp_delta_f2(double m, double *out);

// Generates `count` conversations with the default generator settings and
// the given seed.
//
// # Safety
// `out` must be null or valid for writes.
enum DgpStatus dgp_dataset_generate(size_t count, uint64_t seed, struct DgpDataset **out);

// Reads a JSON Lines dataset.
//
// # Safety
// `path` must be null or a NUL-terminated string; `out` must be null or
// valid for writes.
enum DgpStatus dgp_dataset_load(const char *path, struct DgpDataset **out);

// Writes a dataset as JSON Lines.
//
// # Safety
// `dataset` must be null or a live handle; `path` must be null or a
// NUL-terminated string.
enum DgpStatus dgp_dataset_save(const struct DgpDataset *dataset, const char *path);

// Number of conversations; 0 for a null handle.
//
// # Safety
// `dataset` must be null or a live handle.
size_t dgp_dataset_len(const struct DgpDataset *dataset);

// # Safety
// `dataset` must be null or a handle not yet freed.
void dgp_dataset_free(struct DgpDataset *dataset);

// Restores a model from a checkpoint manifest.
//
// # Safety
// `path` must be null or a NUL-terminated string; `out` must be null or
// valid for writes.
enum DgpStatus dgp_model_load(const char *path, struct DgpModel **out);

// # Safety
// `model` must be null or a handle not yet freed.
void dgp_model_free(struct DgpModel *model);

// Noiseless frame metrics of `model` on `dataset`, with the KL terms
// weighted by the β stored in the checkpoint.
//
// # Safety
// Handles must be null or live; `out` must be null or valid for writes.
enum DgpStatus dgp_model_evaluate(const struct DgpModel *model,
                                  const struct DgpDataset *dataset,
                                  size_t threads,
                                  struct DgpMetrics *out);

// Balanced relation-discovery error of the posterior summary edges on
// `dataset`, calling the top-scored fifth of pairs positive.
//
// # Safety
// Handles must be null or live; `out` must be null or valid for writes.
enum DgpStatus dgp_model_relation_error(const struct DgpModel *model,
                                        const struct DgpDataset *dataset,
                                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DGP_RTN_H */
