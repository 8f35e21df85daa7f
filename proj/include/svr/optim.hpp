#pragma once

#include "svr/forward_model.hpp"
#include "svr/init_recon.hpp"

namespace svr {

struct OptimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FlowOptions {
  int window = 5;            // in-plane least-squares window
  double tikhonov = 1e-3;    // damping added to the structure tensor
  double gain = 0.8;         // fraction of the estimated residual applied
  double min_gradient = 1e-3;  // smallest structure-tensor eigenvalue below which in-plane is zeroed
};

struct ReconConfig {
  int outer_iters = 5;
  int inner_recon_iters = 3;
  double cg_tol = 1e-6;           // relative residual on the normal equations
  double pose_step_tol = 0.01;    // degrees / voxels
  int pose_max_iters = 20;
  int pyramid_levels = 5;
  int flow_iters_per_level = 2;
  double flow_max_disp = 2.0;     // voxels, per level
  FlowOptions flow;
  bool deterministic = true;

  void validate() const;
};

struct SvrResult {
  Volume volume;
  std::vector<RigidTransform> poses;  // flattened, one per slice
  std::vector<std::vector<std::vector<DisplacementField>>> fields_per_level;  // [level][stack][slice]
  std::vector<double> data_consistency_history;
  std::vector<double> slice_scales;
  std::vector<std::string> metrics_log;  // JSON lines
};

/// Raw PSF prediction of one pixel (no coverage masking); the linear
/// operator behind both the CG reconstruction and the pose objective.
double predict_pixel(const Volume& volume, const RigidTransform& pose, const PsfKernel& psf,
                     int x, int y);

/// Sum of squared residuals over foreground pixels of all slices.
double data_consistency(const std::vector<SliceStack>& stacks,
                        const std::vector<RigidTransform>& poses, const Volume& volume,
                        const PsfKernel& psf);

struct VolumeUpdateResult {
  Volume volume;
  std::vector<double> normal_residual_history;  // ||A^T(Av - b)|| per CG iteration
  bool truncated = false;                       // hit max iterations before tolerance
};

/// Conjugate-gradient solve of the normal equations of the slice-prediction
/// operator, matrix-free (simulate as apply, splat as adjoint), starting
/// from v0.
VolumeUpdateResult volume_update(const std::vector<SliceStack>& stacks,
                                 const std::vector<RigidTransform>& poses, const PsfKernel& psf,
                                 const Volume& v0, int iters, double cg_tol = 1e-6);

struct PoseUpdateResult {
  RigidTransform pose;
  double initial_objective = 0.0;
  double final_objective = 0.0;
  double step_norm = 0.0;  // last accepted parameter step, max-norm
  bool skipped = false;    // all-masked slice
};

/// Damped Gauss-Newton over 6 rigid parameters (rotation-vector degrees and
/// translation in voxels, about the slice centroid mapped into the volume).
/// The returned objective never exceeds the initial one.
PoseUpdateResult pose_update(const Slice& slice, const Volume& volume,
                             const RigidTransform& pose0, const PsfKernel& psf,
                             const ReconConfig& config);

/// Central finite-difference Jacobian of the pixel predictions with respect
/// to the 6 pose parameters; order 2 or 4 stencil. Rows follow foreground
/// pixels in raster order.
Eigen::MatrixXd pose_jacobian(const Slice& slice, const Volume& volume,
                              const RigidTransform& pose0, const PsfKernel& psf, double step,
                              int order = 2);

/// Per-pixel displacement residual between a simulated and an observed
/// slice: in-plane from a windowed gradient least-squares solve, through-
/// plane from a 3-point quadratic fit of windowed SSD against the +-1 voxel
/// probe slices. Residual magnitude is clamped to max_disp.
DisplacementField flow_residual(const Slice& simulated, const Slice& observed,
                                const Slice* probe_minus, const Slice* probe_plus,
                                double max_disp, const FlowOptions& opts = {});

/// Bilinear resampling of a field onto a target grid; source coordinates are
/// target coordinates times coord_scale, displacement values are multiplied
/// by value_scale.
DisplacementField resample_field(const DisplacementField& src, int target_w, int target_h,
                                 double coord_scale, double value_scale, int target_level);

/// Downsampling by an integer factor: weighted average over a window
/// centered on the source pixel x*factor (edge taps of even windows carry
/// half weight). A pixel is foreground when at least half of its window's
/// weight is.
Slice downsample_slice(const Slice& src, int factor);

struct MultiscaleResult {
  std::vector<std::vector<std::vector<DisplacementField>>> fields_per_level;  // [level][stack][slice]
  /// Fields at full resolution (last level), flattened per slice.
  std::vector<DisplacementField> full_res_fields() const;
};

/// Coarse-to-fine displacement refinement: per level, build the thin-slice
/// volume from the current fields, simulate, and apply flow residual
/// updates; fields are upsampled (x2 coordinates and values) between
/// levels. Initial fields are the prescribed poses at the coarsest level.
MultiscaleResult multiscale_refine(const std::vector<SliceStack>& stacks,
                                   const Eigen::Vector3i& full_dims,
                                   const Eigen::Vector3d& full_spacing,
                                   const ReconConfig& config);

/// Rigid projection of full-resolution fields, one pose per slice.
std::vector<RigidTransform> finalize(const std::vector<DisplacementField>& fields_full_res,
                                     const PixelGrid& grid);

/// Alternating model-based optimization: normalized-splat init, then
/// outer_iters rounds of CG volume update and per-slice pose updates.
SvrResult alternating_svr(const std::vector<SliceStack>& stacks,
                          const std::vector<DisplacementField>& init_fields,
                          const Eigen::Vector3i& dims, const Eigen::Vector3d& spacing,
                          const PsfKernel& psf, const ReconConfig& config);

/// One cross-stack bootstrap cycle: every stack's slice poses are
/// re-registered against a consistency-weighted normalized splat built from
/// the other stacks only, so a slice cannot anchor its own placement.
/// Updates are trust-capped relative to the entry poses and the
/// best-agreeing round is returned. With fewer than two stacks the input
/// poses are returned unchanged.
std::vector<RigidTransform> consensus_bootstrap(const std::vector<SliceStack>& stacks,
                                                const std::vector<RigidTransform>& poses0,
                                                const Eigen::Vector3i& dims,
                                                const Eigen::Vector3d& spacing,
                                                const PsfKernel& psf, const ReconConfig& config);

/// Multi-level L2 diagnostic: per slice, squared norm of the ground-truth
/// field minus the mean of the per-level fields uplifted to full resolution.
double multilayer_residual_loss(
    const std::vector<std::vector<DisplacementField>>& fields_per_level_one_stack,
    const std::vector<DisplacementField>& gt_fields_full, const PixelGrid& full_grid);

}  // namespace svr
