#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace svr {

struct SamplingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// 3D scalar grid plus an accumulated-contribution weight grid. Voxels with
/// weight below the coverage epsilon count as uncovered.
struct Volume {
  static constexpr double kCoverageEps = 1e-8;

  Eigen::Vector3i dims = Eigen::Vector3i::Zero();
  Eigen::Vector3d spacing = Eigen::Vector3d::Ones();  // mm per voxel
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();   // mm
  std::vector<double> data;
  std::vector<double> weight;

  Volume() = default;
  Volume(const Eigen::Vector3i& d, const Eigen::Vector3d& sp,
         const Eigen::Vector3d& org = Eigen::Vector3d::Zero())
      : dims(d), spacing(sp), origin(org),
        data(static_cast<size_t>(d.x()) * d.y() * d.z(), 0.0),
        weight(static_cast<size_t>(d.x()) * d.y() * d.z(), 0.0) {}

  size_t size() const { return data.size(); }
  size_t index(int x, int y, int z) const {
    return static_cast<size_t>(z) * dims.y() * dims.x() + static_cast<size_t>(y) * dims.x() + x;
  }
  double& at(int x, int y, int z) { return data[index(x, y, z)]; }
  double at(int x, int y, int z) const { return data[index(x, y, z)]; }
  bool in_bounds(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims.x() && y < dims.y() && z < dims.z();
  }
  bool covered(int x, int y, int z) const { return weight[index(x, y, z)] > kCoverageEps; }
};

enum class PsfKind { gaussian, boxcar, thin };

/// Discretized PSF: taps live at integer offsets in slice-local voxel
/// coordinates (z = through-plane) and sum to 1.
struct PsfKernel {
  PsfKind kind = PsfKind::thin;
  std::vector<Eigen::Vector3d> offsets;
  std::vector<double> weights;

  size_t size() const { return weights.size(); }
};

PsfKernel make_thin_psf();
PsfKernel make_gaussian_psf(double slice_thickness_mm, double in_plane_spacing_mm,
                            double voxel_spacing_mm);
PsfKernel make_boxcar_psf(double slice_thickness_mm, double voxel_spacing_mm);

struct PushStats {
  int64_t dropped = 0;  // samples falling entirely outside the volume
};

struct PushOptions {
  /// Strict Eq.-style indicator weights [I > 0] instead of unit weights per
  /// contributing pixel.
  bool indicator_weights = false;
};

/// Trilinear splat of (coords, values) into the accumulator's data grid,
/// with matching weight accumulation. Out-of-bounds corners are dropped.
PushStats push(Volume& target, const std::vector<Eigen::Vector3d>& coords,
               const std::vector<double>& values, const PushOptions& opts = {});

struct PullResult {
  std::vector<double> values;
  std::vector<uint8_t> out_of_bounds;  // 1 where the sample fell outside
};

/// Trilinear interpolation of the volume's data at the given voxel
/// coordinates; out-of-bounds samples return 0.
PullResult pull(const Volume& source, const std::vector<Eigen::Vector3d>& coords);

/// Single-point pull; oob set when any corner falls outside.
double pull_one(const Volume& source, const Eigen::Vector3d& coord, bool* oob = nullptr);

/// Splat a single value; adds w_corner * value to data and w_corner * weight_value
/// to weight at each in-bounds corner. Returns false if fully dropped.
bool push_one(Volume& target, const Eigen::Vector3d& coord, double value, double weight_value);

/// data <- data / weight where covered; uncovered voxels are zeroed.
void normalize(Volume& accumulator);

}  // namespace svr
