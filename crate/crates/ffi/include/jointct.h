#ifndef JOINTCT_H
#define JOINTCT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum JctStatus {
  JCT_STATUS_OK = 0,
  JCT_STATUS_INVALID_ARGUMENT = 1,
  JCT_STATUS_DIMENSION_MISMATCH = 2,
  JCT_STATUS_MODEL_DEGENERATE = 3,
  JCT_STATUS_POSITIVITY_VIOLATION = 4,
  JCT_STATUS_NON_FINITE = 5,
  JCT_STATUS_NULL_POINTER = 6,
  JCT_STATUS_IO = 7,
  JCT_STATUS_PANIC = 8,
} JctStatus;

// Reconstruction models available through [`jct_reconstruct`].
typedef enum JctModel {
  // Poisson likelihood with the flat-field ML estimate plugged in.
  JCT_MODEL_AMAP = 0,
  // Joint image and flat-field estimate.
  JCT_MODEL_JMAP = 1,
  // Weighted least squares on log data.
  JCT_MODEL_WLS = 2,
  // Least squares with stripe-correlated weights.
  JCT_MODEL_SWLS = 3,
} JctModel;

// Parallel-beam system operator.
typedef struct JctProjector JctProjector;

// Output of a reconstruction.
typedef struct JctReconstruction JctReconstruction;

// Solver options for [`jct_reconstruct`]; initialize with
// [`jct_solve_options_default`].
typedef struct JctSolveOptions {
  size_t iterations;
  // Step is `step_factor / L`, in (0, 2).
  double step_factor;
  // Flat-field prior weight; the prior shape is `1 + beta * v_f`.
  double beta;
  // TV weight; 0 disables TV.
  double gamma;
  // Huber smoothing of TV, cm^-1.
  double delta;
  // Objective values are recorded every this many iterations.
  size_t record_every;
} JctSolveOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *jct_last_error_message(void);

// Static name of a status code (a `JctStatus` value).
const char *jct_status_name(int32_t status);

// Library version, e.g. "0.1.0".
const char *jct_version(void);

// Creates a projector for an equispaced parallel-beam scan over half a
// rotation (`full_rotation = 0`) or a full rotation. Lengths in cm. With
// `cache_weights` the system matrix is stored once, trading memory for
// speed.
enum JctStatus jct_projector_new(size_t detectors,
                                 size_t projections,
                                 double detector_width,
                                 double domain_side,
                                 size_t grid_n,
                                 bool full_rotation,
                                 bool cache_weights,
                                 struct JctProjector **out);

// Releases a projector; null is ignored.
void jct_projector_free(struct JctProjector *projector);

// Number of rays (`detectors * projections`) and pixels (`grid_n^2`).
enum JctStatus jct_projector_dims(const struct JctProjector *projector,
                                  size_t *rays,
                                  size_t *pixels);

// Line integrals `A u`: `image` has `pixels` values, `sinogram` receives
// `rays` values.
enum JctStatus jct_projector_forward(const struct JctProjector *projector,
                                     const double *image,
                                     size_t image_len,
                                     double *sinogram,
                                     size_t sinogram_len);

// Backprojection `A^T y`.
enum JctStatus jct_projector_back(const struct JctProjector *projector,
                                  const double *sinogram,
                                  size_t sinogram_len,
                                  double *image,
                                  size_t image_len);

// Flat-field ML estimate (per-detector mean of `samples` flat exposures).
enum JctStatus jct_ml_flatfield(const double *flats,
                                size_t detectors,
                                size_t samples,
                                double *out,
                                size_t out_len);

// Defaults: 500 iterations, step factor 1.8, beta 0, no TV, delta 0.01,
// objective recorded every 10 iterations.
struct JctSolveOptions jct_solve_options_default(void);

// Reconstructs from photon counts (`rays` values) and flat samples
// (`detectors * samples` values) with the chosen model (a `JctModel`
// value), starting from zero. `options` may be null for the defaults.
enum JctStatus jct_reconstruct(const struct JctProjector *projector,
                               int32_t model,
                               const double *counts,
                               size_t counts_len,
                               const double *flats,
                               size_t samples,
                               const struct JctSolveOptions *options,
                               struct JctReconstruction **out);

// Releases a reconstruction; null is ignored.
void jct_reconstruction_free(struct JctReconstruction *rec);

// Copies the image (`grid_n^2` values, cm^-1).
enum JctStatus jct_reconstruction_image(const struct JctReconstruction *rec,
                                        double *out,
                                        size_t out_len);

// Copies the flat-field estimate (`detectors` values): the joint estimate
// for JMAP, the ML estimate otherwise.
enum JctStatus jct_reconstruction_flatfield(const struct JctReconstruction *rec,
                                            double *out,
                                            size_t out_len);

// Number of recorded objective values.
enum JctStatus jct_reconstruction_history_len(const struct JctReconstruction *rec, size_t *len);

// Copies the recorded objective values.
enum JctStatus jct_reconstruction_history(const struct JctReconstruction *rec,
                                          double *out,
                                          size_t out_len);

// Lipschitz constant used for the step.
enum JctStatus jct_reconstruction_lipschitz(const struct JctReconstruction *rec, double *out);

// Filtered backprojection of a log-ratio sinogram with apodization
// `epsilon` (0 for the plain ramp filter).
enum JctStatus jct_fbp(const struct JctProjector *projector,
                       const double *sinogram,
                       size_t sinogram_len,
                       double epsilon,
                       double *image,
                       size_t image_len);

// Value of the ring profile produced by a unit stripe at detector offset
// `t0` (cm) at radius `rho`, for apodization `epsilon`.
enum JctStatus jct_ring_profile(double t0, double epsilon, double rho, double *out);

// Runs every stage an experiment configuration (TOML file) asks for,
// writing under `out_dir`. Failed reconstruction jobs are listed in the
// output manifests; the call fails only if a stage cannot complete. An
// unreadable or invalid configuration gives `InvalidArgument`.
enum JctStatus jct_run_experiment(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* JOINTCT_H */
