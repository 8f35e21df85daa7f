#pragma once

#include <filesystem>

#include "svr/io.hpp"
#include "svr/metrics.hpp"

namespace svr {

/// PSF-aware normalized splat (the general form of init_volume): each
/// foreground pixel is distributed over the PSF taps at its posed location.
Volume init_volume_psf(const std::vector<SliceStack>& stacks,
                       const std::vector<RigidTransform>& poses, const PsfKernel& psf,
                       const Eigen::Vector3i& dims, const Eigen::Vector3d& spacing);

/// Cubic reconstruction grid covering all stacks at the finest in-plane
/// spacing.
void target_geometry(const std::vector<SliceStack>& stacks, Eigen::Vector3i* dims,
                     Eigen::Vector3d* spacing);

/// Prescribed-pose fields at full resolution, flattened per slice.
std::vector<DisplacementField> prescribed_fields(const std::vector<SliceStack>& stacks,
                                                 const Eigen::Vector3d& spacing);

std::vector<RigidTransform> prescribed_poses(const std::vector<SliceStack>& stacks,
                                             const Eigen::Vector3d& spacing);

struct SimulationResult {
  Volume phantom;
  std::vector<SliceStack> clean_stacks;
  std::vector<SliceStack> corrupted_stacks;
  std::vector<std::vector<RigidTransform>> true_poses;           // [stack][slice]
  std::vector<std::vector<DisplacementField>> true_fields;       // [stack][slice]
};

/// Extract the three orthogonal stacks from a phantom and corrupt them with
/// sampled motion; sub-streams are derived per stack from the config seed.
SimulationResult simulate_dataset(const Volume& phantom, const MotionConfig& motion,
                                  double thickness_mm, const PsfKernel& psf);

enum class ReconMode { init, refine, refine_svr };
ReconMode recon_mode_from_string(const std::string& s);

struct ReconstructionResult {
  Volume volume;
  std::vector<RigidTransform> poses;                     // flattened per slice
  std::vector<std::vector<DisplacementField>> est_fields;  // [stack][slice], full res
  std::vector<double> data_consistency_history;
  std::vector<std::string> metrics_log;
};

ReconstructionResult reconstruct(const std::vector<SliceStack>& stacks, ReconMode mode,
                                 const ReconConfig& config);

struct EvaluationReport {
  std::vector<double> median_max_tre_per_stack_mm;
  double median_max_tre_mean_mm = 0.0;
  double volume_ssim = 0.0;
  double volume_psnr_db = 0.0;
  double volume_ncc = 0.0;
  bool has_volume_metrics = false;
};

EvaluationReport evaluate_against_truth(const ReconstructionResult& result,
                                        const std::vector<std::vector<DisplacementField>>& gt_fields,
                                        double spacing_mm, const Volume* phantom);

// Directory formats used by the CLI verbs.
void save_simulation(const std::filesystem::path& dir, const SimulationResult& sim,
                     const MotionConfig& motion);
struct LoadedDataset {
  std::vector<SliceStack> stacks;
  std::vector<std::vector<RigidTransform>> poses;   // empty when absent
  std::vector<std::vector<DisplacementField>> fields;  // empty when absent
};
LoadedDataset load_stacks(const std::filesystem::path& dir);
LoadedDataset load_truth(const std::filesystem::path& dir);

void save_reconstruction(const std::filesystem::path& dir, const ReconstructionResult& result,
                         const std::vector<SliceStack>& stacks);
ReconstructionResult load_reconstruction(const std::filesystem::path& dir,
                                         const std::vector<SliceStack>& stacks);

}  // namespace svr
