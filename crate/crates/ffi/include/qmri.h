#ifndef QMRI_H
#define QMRI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum QmriStatus {
  QMRI_STATUS_OK = 0,
  QMRI_STATUS_INVALID_ARGUMENT = 1,
  QMRI_STATUS_SHAPE_MISMATCH = 2,
  QMRI_STATUS_NUMERICAL = 3,
  QMRI_STATUS_CONFIG = 4,
  QMRI_STATUS_IO = 5,
  QMRI_STATUS_NULL_POINTER = 6,
  QMRI_STATUS_PANIC = 7,
} QmriStatus;

/**
 * Fingerprint dictionary tied to one sequence.
 */
typedef struct QmriDictionary QmriDictionary;

/**
 * Subsampled multi-frame k-space data.
 */
typedef struct QmriKSpace QmriKSpace;

/**
 * Parameter map `(rho, T1, T2)` on a grid.
 */
typedef struct QmriParamMap QmriParamMap;

/**
 * Flip-angle train.
 */
typedef struct QmriSequence QmriSequence;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *qmri_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *qmri_last_error(void);

/**
 * Builds a map from three channels of `nx * ny` values each.
 *
 * # Safety
 * Channel pointers must reference `nx * ny` readable doubles.
 */
enum QmriStatus qmri_param_map_new(size_t nx,
                                   size_t ny,
                                   const double *rho,
                                   const double *t1,
                                   const double *t2,
                                   struct QmriParamMap **out);

/**
 * Built-in `n x n` desk phantom.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum QmriStatus qmri_phantom_desk(size_t n, struct QmriParamMap **out);

/**
 * # Safety
 * `map` must be null or a handle from this library, freed at most once.
 */
void qmri_param_map_free(struct QmriParamMap *map);

/**
 * # Safety
 * `map` must be a live handle; `nx`, `ny` writable.
 */
enum QmriStatus qmri_param_map_dims(const struct QmriParamMap *map, size_t *nx, size_t *ny);

/**
 * Copies channel 0 (rho), 1 (T1) or 2 (T2) into `dst`, which holds `len`
 * doubles and must match the voxel count.
 *
 * # Safety
 * `dst` must reference `len` writable doubles.
 */
enum QmriStatus qmri_param_map_channel(const struct QmriParamMap *map,
                                       size_t channel,
                                       double *dst,
                                       size_t len);

/**
 * Built-in inversion-prepared MRF train with `frames` readouts.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum QmriStatus qmri_sequence_default(size_t frames, struct QmriSequence **out);

/**
 * Sequence from per-readout flip angles (rad) and repetition times (s).
 *
 * # Safety
 * Both arrays must hold `frames` doubles.
 */
enum QmriStatus qmri_sequence_new(const double *flip_angles,
                                  const double *tr,
                                  size_t frames,
                                  bool inversion,
                                  struct QmriSequence **out);

/**
 * # Safety
 * `seq` must be null or a handle from this library, freed at most once.
 */
void qmri_sequence_free(struct QmriSequence *seq);

/**
 * # Safety
 * `seq` must be a live handle.
 */
size_t qmri_sequence_frames(const struct QmriSequence *seq);

/**
 * Fingerprint of one `(T1, T2)` pair, written as `2 * frames` interleaved
 * doubles.
 *
 * # Safety
 * `dst` must reference `len` writable doubles.
 */
enum QmriStatus qmri_simulate_bloch(const struct QmriSequence *seq,
                                    double t1,
                                    double t2,
                                    double *dst,
                                    size_t len);

/**
 * Dictionary over the product of the two grids (pairs with `T2 > T1` are
 * dropped).
 *
 * # Safety
 * Grid arrays must hold `n_t1` and `n_t2` doubles.
 */
enum QmriStatus qmri_dictionary_build(const struct QmriSequence *seq,
                                      const double *t1_grid,
                                      size_t n_t1,
                                      const double *t2_grid,
                                      size_t n_t2,
                                      struct QmriDictionary **out);

/**
 * # Safety
 * `dict` must be null or a handle from this library, freed at most once.
 */
void qmri_dictionary_free(struct QmriDictionary *dict);

/**
 * # Safety
 * `dict` must be a live handle.
 */
size_t qmri_dictionary_len(const struct QmriDictionary *dict);

/**
 * Bloch series of `map`, Cartesian subsampling by `factor` (fresh rows per
 * frame) and complex noise of std `sigma`, all seeded by `seed`.
 *
 * # Safety
 * Handles must be live; `out` a valid handle slot.
 */
enum QmriStatus qmri_kspace_simulate(const struct QmriParamMap *map,
                                     const struct QmriSequence *seq,
                                     size_t factor,
                                     double sigma,
                                     uint64_t seed,
                                     struct QmriKSpace **out);

/**
 * # Safety
 * `y` must be null or a handle from this library, freed at most once.
 */
void qmri_kspace_free(struct QmriKSpace *y);

/**
 * Zero-filled dictionary matching.
 *
 * # Safety
 * Handles must be live; `out` a valid handle slot.
 */
enum QmriStatus qmri_mrf_reconstruct(const struct QmriKSpace *y,
                                     const struct QmriDictionary *dict,
                                     struct QmriParamMap **out);

/**
 * Integrated-physics Levenberg-Marquardt from `init` inside the default
 * admissible box. A negative `sigma` estimates the noise from the data.
 *
 * # Safety
 * Handles must be live; `out` a valid handle slot.
 */
enum QmriStatus qmri_lm_reconstruct(const struct QmriKSpace *y,
                                    const struct QmriSequence *seq,
                                    const struct QmriParamMap *init,
                                    size_t max_iters,
                                    double sigma,
                                    struct QmriParamMap **out);

/**
 * Foreground (`rho > 0` in `truth`) mean relative errors, written to
 * `dst[0..3]` as `(rho, T1, T2)`.
 *
 * # Safety
 * `dst` must reference 3 writable doubles.
 */
enum QmriStatus qmri_rel_errors(const struct QmriParamMap *estimate,
                                const struct QmriParamMap *truth,
                                double *dst);

/**
 * Runs an experiment described by a JSON config (missing keys default).
 * With a non-null `out_dir` the artifacts are written there. `metrics`
 * receives the foreground mean relative errors `(rho, T1, T2)`.
 *
 * # Safety
 * `config_json` must be NUL-terminated; `metrics` 3 writable doubles.
 */
enum QmriStatus qmri_run_experiment(const char *config_json, const char *out_dir, double *metrics);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QMRI_H */
