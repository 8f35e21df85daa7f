#pragma once

#include "svr/forward_model.hpp"

namespace svr {

struct MetricsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MetricReport {
  double tre_max_mm = 0.0;
  double tre_median_max_per_stack_mm = 0.0;
  double ssim = 0.0;
  double ncc = 0.0;
  double psnr_db = 0.0;
  std::vector<double> per_slice_consistency;  // per-slice NCC
  bool ncc_degenerate = false;
};

/// Maximum per-pixel Euclidean discrepancy between two fields over the
/// foreground (all pixels when no mask is given), converted to mm.
double tre(const DisplacementField& est, const DisplacementField& gt, double spacing_mm,
           const std::vector<uint8_t>* mask = nullptr);

/// Per-slice max TRE, median across the slices of each stack; returns one
/// value per stack. `summary` (when given) receives the mean across stacks.
std::vector<double> median_max_tre(const std::vector<std::vector<DisplacementField>>& est,
                                   const std::vector<std::vector<DisplacementField>>& gt,
                                   double spacing_mm, double* summary = nullptr);

struct VolumeMetricOptions {
  double psnr_cap_db = 99.0;
  int ssim_window = 11;
  double ssim_sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// SSIM over the union coverage mask, Gaussian window, dynamic range from
/// the reference (first argument).
double ssim(const Volume& ref, const Volume& other, const VolumeMetricOptions& opts = {});
double psnr(const Volume& ref, const Volume& other, const VolumeMetricOptions& opts = {});
double ncc(const Volume& ref, const Volume& other, bool* degenerate = nullptr);

/// 2D variants over the intersection of the slice masks.
double ssim2d(const Slice& ref, const Slice& other, const VolumeMetricOptions& opts = {});
double psnr2d(const Slice& ref, const Slice& other, const VolumeMetricOptions& opts = {});
double ncc2d(const Slice& ref, const Slice& other, bool* degenerate = nullptr);

struct SliceConsistencyInput {
  const std::vector<SliceStack>* stacks = nullptr;
  const Volume* volume = nullptr;
  const std::vector<RigidTransform>* poses = nullptr;  // flattened, one per slice
  const PsfKernel* psf = nullptr;
};

/// Simulate every slice from the volume at its final pose and score the
/// simulation against the acquired slice (mean SSIM/NCC/PSNR over slices).
MetricReport slice_consistency(const SliceConsistencyInput& in);

}  // namespace svr
