#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "svr/geometry.hpp"
#include "svr/sampling.hpp"

namespace svr {

struct ForwardModelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Slice {
  PixelGrid grid;
  std::vector<double> data;    // row-major, masked-out pixels are 0
  std::vector<uint8_t> mask;   // foreground
  int index_in_stack = 0;
  int acquisition_time_index = 0;

  Slice() = default;
  Slice(const PixelGrid& g, int idx = 0)
      : grid(g), data(static_cast<size_t>(g.width) * g.height, 0.0),
        mask(static_cast<size_t>(g.width) * g.height, 0),
        index_in_stack(idx), acquisition_time_index(idx) {}

  size_t pix(int x, int y) const { return static_cast<size_t>(y) * grid.width + x; }
  size_t n_pixels() const { return data.size(); }
  size_t n_foreground() const;
};

enum class Orientation { sagittal, axial, coronal };

std::string to_string(Orientation o);
Orientation orientation_from_string(const std::string& s);

struct SliceStack {
  std::vector<Slice> slices;
  Orientation orientation_label = Orientation::axial;
  double slice_thickness = 1.0;  // mm
  double slice_gap = 1.0;        // mm, defaults to thickness (contiguous)
  double in_plane_spacing = 1.0; // mm

  size_t n_slices() const { return slices.size(); }
};

/// PSF forward model: pixel p samples the volume at pose(p^ + tap) for every
/// PSF tap, weighted by the tap weights. The pose maps slice pixel
/// coordinates (plane z=0) into volume voxel coordinates. Pixels whose
/// in-bounds tap weight falls below 0.5 are masked out and zeroed.
Slice simulate_slice_psf(const Volume& volume, const RigidTransform& pose, const PixelGrid& grid,
                         const PsfKernel& psf, bool* empty_overlap = nullptr);

/// Thin-slice forward model: pull at p^ + f(p) (+ optional probe offset);
/// mask is the in-bounds flag.
Slice simulate_slice_field(const Volume& volume, const DisplacementField& field,
                           const PixelGrid& grid,
                           const Eigen::Vector3d& probe_offset = Eigen::Vector3d::Zero());

/// Explicit dense realization of the slicing operator for tiny volumes:
/// one row per pixel, columns in vec(V) order (x fastest). Rows mirror
/// simulate_slice_psf exactly, including the coverage masking.
Eigen::MatrixXd assemble_dense_system(const Eigen::Vector3i& volume_dims,
                                      const std::vector<RigidTransform>& poses,
                                      const std::vector<PixelGrid>& grids, const PsfKernel& psf);

/// Concatenate slice rasters into one vector, in slice order.
Eigen::VectorXd stack_slices_vector(const std::vector<Slice>& slices);

}  // namespace svr
