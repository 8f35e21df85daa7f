#pragma once

#include "svr/forward_model.hpp"
#include "svr/rng.hpp"

namespace svr {

struct MotionSimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MotionConfig {
  double bulk_inplane_rot_range_deg = 12.0;  // uniform in +-range
  int n_perturbations_min = 1;
  int n_perturbations_max = 100;
  double rot_sigma_deg = 20.0;     // per-axis normal on rotation vectors
  double trans_range_mm = 6.1;     // uniform in +-range, per axis
  double noise_sigma = 0.0;        // fraction of foreground intensity range
  double bias_amplitude = 0.0;     // peak multiplicative deviation
  double gamma_min = 1.0;
  double gamma_max = 1.0;
  uint64_t seed = 0;
};

/// Prescribed (motion-free) pose of slice k in a stack: maps slice pixel
/// coordinates into volume voxel coordinates. step_vox is the slice advance
/// in voxel units.
RigidTransform prescribed_pose(Orientation orientation, int slice_index, double step_vox);

/// Ideal stacks extracted from a phantom at prescribed poses. Pixel units
/// must match voxel units (in-plane spacing equal to the phantom's spacing);
/// the slice advance is slice_thickness (contiguous acquisition).
std::vector<SliceStack> extract_stacks(const Volume& phantom,
                                       const std::vector<Orientation>& orientations,
                                       double in_plane_spacing_mm, double thickness_mm,
                                       const PsfKernel& psf);

struct MotionSample {
  /// Slice-frame motion transform per slice (rotation about the slice
  /// center, translation in mm).
  std::vector<RigidTransform> per_slice;
  std::vector<std::pair<double, RigidTransform>> keyframes;
  double bulk_angle_deg = 0.0;
};

MotionSample sample_motion(const MotionConfig& config, int n_slices, const PixelGrid& grid,
                           CounterRng& rng);

struct GroundTruth {
  std::vector<RigidTransform> true_poses;       // slice pixel -> volume voxel
  std::vector<DisplacementField> fields;        // full resolution, voxel units
  SliceStack clean;                             // geometry-corrupted, pre-intensity
  SliceStack corrupted;
};

/// Re-simulate each slice of a stack at its perturbed pose, then apply
/// intensity corruptions in the order noise -> bias -> gamma. Geometry
/// records are taken before any intensity corruption.
GroundTruth corrupt_stack(const Volume& phantom, const SliceStack& stack,
                          const MotionSample& motion, const MotionConfig& config,
                          const PsfKernel& psf, CounterRng& rng);

}  // namespace svr
