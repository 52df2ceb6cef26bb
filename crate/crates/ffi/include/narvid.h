#ifndef NARVID_H
#define NARVID_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum NarvidStatus {
  NARVID_STATUS_OK = 0,
  NARVID_STATUS_NULL_POINTER = 1,
  NARVID_STATUS_USAGE = 2,
  NARVID_STATUS_SHAPE = 3,
  NARVID_STATUS_NUMERIC = 4,
  NARVID_STATUS_CONFIG = 5,
  NARVID_STATUS_IO = 6,
  NARVID_STATUS_FORMAT = 7,
  NARVID_STATUS_VALIDATION = 8,
  NARVID_STATUS_CORRUPTION = 9,
  NARVID_STATUS_PANIC = 10,
} NarvidStatus;

typedef enum NarvidFusionMode {
  NARVID_FUSION_MODE_STANDARDIZED = 0,
  NARVID_FUSION_MODE_SUM = 1,
  NARVID_FUSION_MODE_QV = 2,
  NARVID_FUSION_MODE_QN = 3,
} NarvidFusionMode;

typedef enum NarvidDirection {
  NARVID_DIRECTION_T2V = 0,
  NARVID_DIRECTION_V2T = 1,
} NarvidDirection;

// Opaque dataset handle.
typedef struct NarvidDataset NarvidDataset;

// Opaque model handle.
typedef struct NarvidModel NarvidModel;

// Opaque pair of `n x n` score matrices.
typedef struct NarvidScores NarvidScores;

// Planted dataset settings; rates lie in [0, 1].
typedef struct NarvidPlantSpec {
  size_t episodes;
  size_t frames;
  size_t words;
  size_t dim;
  uint64_t seed;
  double signal;
  double corrupt;
  double overlap;
} NarvidPlantSpec;

// Retrieval metrics; recalls in percent.
typedef struct NarvidReport {
  double r1;
  double r5;
  double r10;
  double mdr;
  double mnr;
  size_t n;
} NarvidReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next narvid call on the same thread.
const char *narvid_last_error(void);

// Library version as a static NUL-terminated string.
const char *narvid_version(void);

// Reads a dataset container.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum NarvidStatus narvid_dataset_read(const char *path, struct NarvidDataset **out);

// Writes a dataset container.
//
// # Safety
// `ds` must be a live handle and `path` a NUL-terminated string.
enum NarvidStatus narvid_dataset_write(const struct NarvidDataset *ds, const char *path);

// Generates a planted dataset.
//
// # Safety
// `spec` must point to a valid spec and `out` be writable.
enum NarvidStatus narvid_dataset_generate(const struct NarvidPlantSpec *spec,
                                          struct NarvidDataset **out);

// Number of episodes, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live handle.
size_t narvid_dataset_len(const struct NarvidDataset *ds);

// Embedding dimension, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live handle.
size_t narvid_dataset_dim(const struct NarvidDataset *ds);

// # Safety
// `ds` must be null or a handle not yet freed.
void narvid_dataset_free(struct NarvidDataset *ds);

// Trains a model. `config_json` may be null for all defaults.
//
// # Safety
// `ds` must be a live handle, `config_json` null or NUL-terminated, and
// `out` writable.
enum NarvidStatus narvid_train(const struct NarvidDataset *ds,
                               const char *config_json,
                               struct NarvidModel **out);

// Loads a checkpoint.
//
// # Safety
// `path` must be NUL-terminated and `out` writable.
enum NarvidStatus narvid_model_load(const char *path, struct NarvidModel **out);

// Saves a checkpoint.
//
// # Safety
// `model` must be a live handle and `path` NUL-terminated.
enum NarvidStatus narvid_model_save(const struct NarvidModel *model, const char *path);

// # Safety
// `model` must be null or a handle not yet freed.
void narvid_model_free(struct NarvidModel *model);

// Scores every query against every episode. A null `model` gives the
// zero-shot baseline and ignores `p` and `tau`.
//
// # Safety
// `model` must be null or live, `ds` live, and `out` writable.
enum NarvidStatus narvid_scores_compute(const struct NarvidModel *model,
                                        const struct NarvidDataset *ds,
                                        double p,
                                        double tau,
                                        struct NarvidScores **out);

// Side length `n` of the score matrices, or 0 for a null handle.
//
// # Safety
// `scores` must be null or a live handle.
size_t narvid_scores_size(const struct NarvidScores *scores);

// Writes the fused `n x n` matrix row-major into `buf` of `len` doubles.
//
// # Safety
// `scores` must be live and `buf` writable for `len` doubles.
enum NarvidStatus narvid_scores_fuse(const struct NarvidScores *scores,
                                     enum NarvidFusionMode mode,
                                     double *buf,
                                     size_t len);

// Fuses, orients and ranks the scores into `out`.
//
// # Safety
// `scores` must be live and `out` writable.
enum NarvidStatus narvid_scores_report(const struct NarvidScores *scores,
                                       enum NarvidFusionMode mode,
                                       enum NarvidDirection direction,
                                       struct NarvidReport *out);

// # Safety
// `scores` must be null or a handle not yet freed.
void narvid_scores_free(struct NarvidScores *scores);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NARVID_H */
