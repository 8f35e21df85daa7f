#include "svr/motion_sim.hpp"

#include <algorithm>
#include <cmath>

namespace svr {

namespace {

RigidTransform about_center(const Eigen::Vector3d& c, const Eigen::Matrix3d& rot,
                            const Eigen::Vector3d& t) {
  RigidTransform out;
  out.rotation = rot;
  out.translation = c - rot * c + t;
  return out;
}

}  // namespace

RigidTransform prescribed_pose(Orientation orientation, int slice_index, double step_vox) {
  RigidTransform pose;
  const double depth = slice_index * step_vox;
  switch (orientation) {
    case Orientation::axial:
      // (px, py) -> (px, py, depth)
      pose.translation = {0.0, 0.0, depth};
      break;
    case Orientation::sagittal:
      // (px, py) -> (depth, px, py)
      pose.rotation << 0, 0, 1, 1, 0, 0, 0, 1, 0;
      pose.translation = {depth, 0.0, 0.0};
      break;
    case Orientation::coronal:
      // (px, py) -> (py, depth, px)
      pose.rotation << 0, 1, 0, 0, 0, 1, 1, 0, 0;
      pose.translation = {0.0, depth, 0.0};
      break;
  }
  return pose;
}

std::vector<SliceStack> extract_stacks(const Volume& phantom,
                                       const std::vector<Orientation>& orientations,
                                       double in_plane_spacing_mm, double thickness_mm,
                                       const PsfKernel& psf) {
  const double voxel = phantom.spacing.x();
  if ((phantom.spacing.array() != voxel).any())
    throw MotionSimError("extract_stacks: anisotropic phantom spacing unsupported");
  if (std::abs(in_plane_spacing_mm - voxel) > 1e-12)
    throw MotionSimError("extract_stacks: in-plane spacing must match phantom spacing");
  const double step_vox = thickness_mm / voxel;

  std::vector<SliceStack> stacks;
  for (Orientation o : orientations) {
    // Slice grid spans the two in-plane axes; slice count tiles the normal axis.
    int w = 0, h = 0, extent = 0;
    switch (o) {
      case Orientation::axial:
        w = phantom.dims.x(); h = phantom.dims.y(); extent = phantom.dims.z();
        break;
      case Orientation::sagittal:
        w = phantom.dims.y(); h = phantom.dims.z(); extent = phantom.dims.x();
        break;
      case Orientation::coronal:
        w = phantom.dims.z(); h = phantom.dims.x(); extent = phantom.dims.y();
        break;
    }
    const int n_slices = std::max(1, static_cast<int>(std::round(extent / step_vox)));

    SliceStack stack;
    stack.orientation_label = o;
    stack.slice_thickness = thickness_mm;
    stack.slice_gap = thickness_mm;
    stack.in_plane_spacing = in_plane_spacing_mm;
    PixelGrid grid{w, h, in_plane_spacing_mm};
    bool any_covered = false;
    for (int k = 0; k < n_slices; ++k) {
      bool empty = false;
      Slice s = simulate_slice_psf(phantom, prescribed_pose(o, k, step_vox), grid, psf, &empty);
      s.index_in_stack = k;
      s.acquisition_time_index = k;
      any_covered = any_covered || !empty;
      stack.slices.push_back(std::move(s));
    }
    if (!any_covered) throw MotionSimError("extract_stacks: stack has empty overlap with phantom");
    stacks.push_back(std::move(stack));
  }
  return stacks;
}

MotionSample sample_motion(const MotionConfig& config, int n_slices, const PixelGrid& grid,
                           CounterRng& rng) {
  if (n_slices < 1) throw MotionSimError("sample_motion: n_slices must be >= 1");
  MotionSample out;

  const int k = rng.uniform_int(config.n_perturbations_min, config.n_perturbations_max);
  for (int i = 0; i < k; ++i) {
    const double t = (k == 1) ? 0.0 : static_cast<double>(i) * (n_slices - 1) / (k - 1);
    Eigen::Vector3d rotvec, trans;
    for (int a = 0; a < 3; ++a) rotvec[a] = rng.normal(0.0, config.rot_sigma_deg);
    for (int a = 0; a < 3; ++a)
      trans[a] = rng.uniform(-config.trans_range_mm, config.trans_range_mm);
    out.keyframes.emplace_back(t, RigidTransform::from_rotation_vector_deg(rotvec, trans));
  }
  out.bulk_angle_deg =
      rng.uniform(-config.bulk_inplane_rot_range_deg, config.bulk_inplane_rot_range_deg);

  std::vector<double> query(n_slices);
  for (int i = 0; i < n_slices; ++i) query[i] = static_cast<double>(i);
  const auto traj = interpolate_rigid_trajectory(out.keyframes, query);

  const Eigen::Vector3d c = uplift(grid.center());
  const Eigen::Matrix3d bulk =
      Eigen::AngleAxisd(out.bulk_angle_deg * M_PI / 180.0, Eigen::Vector3d::UnitZ())
          .toRotationMatrix();
  const RigidTransform bulk_tf = about_center(c, bulk, Eigen::Vector3d::Zero());

  out.per_slice.resize(n_slices);
  for (int i = 0; i < n_slices; ++i) {
    const RigidTransform slice_tf = about_center(c, traj[i].rotation, traj[i].translation);
    out.per_slice[i] = compose(slice_tf, bulk_tf);
  }
  return out;
}

GroundTruth corrupt_stack(const Volume& phantom, const SliceStack& stack,
                          const MotionSample& motion, const MotionConfig& config,
                          const PsfKernel& psf, CounterRng& rng) {
  const int n = static_cast<int>(stack.n_slices());
  if (static_cast<int>(motion.per_slice.size()) != n)
    throw MotionSimError("corrupt_stack: trajectory length must equal slice count");
  if (n == 0) throw MotionSimError("corrupt_stack: empty stack");
  const double voxel = phantom.spacing.x();
  const double step_vox = stack.slice_gap / voxel;
  const PixelGrid grid = stack.slices.front().grid;

  GroundTruth gt;
  gt.clean = stack;
  gt.clean.slices.clear();
  for (int k = 0; k < n; ++k) {
    // Motion acts in the slice frame; translations convert from mm to voxels.
    RigidTransform m = motion.per_slice[k];
    m.translation /= voxel;
    const RigidTransform pose = compose(prescribed_pose(stack.orientation_label, k, step_vox), m);
    gt.true_poses.push_back(pose);
    gt.fields.push_back(field_from_pose(pose, grid));
    Slice s = simulate_slice_psf(phantom, pose, grid, psf);
    s.index_in_stack = k;
    s.acquisition_time_index = k;
    gt.clean.slices.push_back(std::move(s));
  }

  gt.corrupted = gt.clean;
  for (auto& slice : gt.corrupted.slices) {
    double lo = 0.0, hi = 0.0;
    bool first = true;
    for (size_t i = 0; i < slice.n_pixels(); ++i) {
      if (!slice.mask[i]) continue;
      if (first) { lo = hi = slice.data[i]; first = false; }
      lo = std::min(lo, slice.data[i]);
      hi = std::max(hi, slice.data[i]);
    }
    const double range = hi - lo;

    if (config.noise_sigma > 0.0 && range > 0.0) {
      const double sigma = config.noise_sigma * range;
      for (size_t i = 0; i < slice.n_pixels(); ++i)
        if (slice.mask[i]) slice.data[i] += rng.normal(0.0, sigma);
    }

    if (config.bias_amplitude > 0.0) {
      // Slice-wise second-order polynomial bias, scaled to the amplitude bound.
      double coeff[5];
      for (double& c : coeff) c = rng.uniform(-1.0, 1.0);
      const double cx = (slice.grid.width - 1) / 2.0, cy = (slice.grid.height - 1) / 2.0;
      std::vector<double> raw(slice.n_pixels(), 0.0);
      double peak = 0.0;
      for (int y = 0; y < slice.grid.height; ++y)
        for (int x = 0; x < slice.grid.width; ++x) {
          const double u = (x - cx) / std::max(1.0, cx), v = (y - cy) / std::max(1.0, cy);
          const double b = coeff[0] * u + coeff[1] * v + coeff[2] * u * u + coeff[3] * v * v +
                           coeff[4] * u * v;
          raw[slice.pix(x, y)] = b;
          peak = std::max(peak, std::abs(b));
        }
      const double scale = peak > 0.0 ? config.bias_amplitude / peak : 0.0;
      for (size_t i = 0; i < slice.n_pixels(); ++i)
        if (slice.mask[i]) slice.data[i] *= 1.0 + scale * raw[i];
    }

    const double gamma = rng.uniform(config.gamma_min, config.gamma_max);
    if (gamma != 1.0 && range > 0.0) {
      for (size_t i = 0; i < slice.n_pixels(); ++i) {
        if (!slice.mask[i]) continue;
        const double u = std::max(0.0, (slice.data[i] - lo) / range);
        slice.data[i] = lo + range * std::pow(u, gamma);
      }
    }
  }
  return gt;
}

}  // namespace svr
