#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <vector>

namespace svr {

struct GeometryError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Rigid body transform: x -> R*x + t. Rotation is kept orthonormal with
/// det +1; translation units follow the caller (mm or voxels).
struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static RigidTransform identity() { return {}; }
  static RigidTransform translate(const Eigen::Vector3d& t);
  /// Axis-angle rotation; the vector's norm is the angle in degrees.
  static RigidTransform from_rotation_vector_deg(const Eigen::Vector3d& rotvec_deg,
                                                 const Eigen::Vector3d& t = Eigen::Vector3d::Zero());

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }
  Eigen::Matrix4d homogeneous() const;
  RigidTransform inverse() const;
  Eigen::Vector3d rotation_vector_deg() const;

  bool is_valid(double tol = 1e-9) const;
};

/// a then... applying the result equals applying b first, then a.
RigidTransform compose(const RigidTransform& a, const RigidTransform& b);

inline Eigen::Vector3d uplift(const Eigen::Vector2d& p) { return {p.x(), p.y(), 0.0}; }
inline Eigen::Vector2d drop_z(const Eigen::Vector3d& p) { return {p.x(), p.y()}; }

struct PixelGrid {
  int width = 0;
  int height = 0;
  double spacing = 1.0;  // mm per pixel, in-plane

  bool valid() const { return width >= 1 && height >= 1 && spacing > 0.0; }
  Eigen::Vector2d center() const { return {(width - 1) / 2.0, (height - 1) / 2.0}; }
};

/// Per-pixel 3D displacement attached to a slice grid. Values are in volume
/// voxel units at the field's resolution level.
struct DisplacementField {
  int width = 0;
  int height = 0;
  int level = 0;
  std::vector<Eigen::Vector3d> data;  // row-major, y*width + x

  DisplacementField() = default;
  DisplacementField(int w, int h, int lvl)
      : width(w), height(h), level(lvl), data(static_cast<size_t>(w) * h, Eigen::Vector3d::Zero()) {}

  Eigen::Vector3d& at(int x, int y) { return data[static_cast<size_t>(y) * width + x]; }
  const Eigen::Vector3d& at(int x, int y) const { return data[static_cast<size_t>(y) * width + x]; }
  bool finite() const;
};

/// Parameters of one pyramid level of the slice-pose parametrization:
/// the centering translation and the uniform pixel-to-voxel scale.
struct LevelParams {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();  // rotation center, voxel units
  double scale = 1.0;                                // pixel -> voxel scale, must be > 0
};

/// Fused homogeneous product  C R C^-1 S^-1 T  evaluated over the grid;
/// the field is the product applied to each uplifted pixel, minus the pixel.
DisplacementField prescribed_pose_field(const RigidTransform& stack_index_translation,
                                        const RigidTransform& orientation,
                                        const PixelGrid& grid, int level,
                                        const LevelParams& params);

/// Field of an arbitrary rigid pose mapping slice pixel coords into volume
/// voxel coords: f(p) = G p^ - p^.
DisplacementField field_from_pose(const RigidTransform& pose, const PixelGrid& grid, int level = 0);

/// Decompose a rigid pose into the (T_n, R_n) pair such that
/// prescribed_pose_field(T_n, R_n) reproduces field_from_pose(pose) with
/// unit scale: T = C R^-1 C^-1 G.
RigidTransform index_translation_for_pose(const RigidTransform& pose, const LevelParams& params);

/// Least-squares rigid fit (SVD of the centered cross-covariance) between
/// the grid's uplifted pixels and their displaced targets. Reflections are
/// corrected by flipping the smallest singular direction.
RigidTransform project_to_rigid(const DisplacementField& field, const PixelGrid& grid);

/// Cubic B-spline interpolation of a rigid trajectory, componentwise on
/// (rotation-vector degrees, translation) 6-vectors. Clamped knot vector;
/// keyframes are interpolated exactly.
std::vector<RigidTransform> interpolate_rigid_trajectory(
    const std::vector<std::pair<double, RigidTransform>>& keyframes,
    const std::vector<double>& query_times);

namespace detail {
/// Endpoint-interpolating cubic B-spline through (times, values); returns
/// values at query times. Exposed for oracle tests.
std::vector<double> spline_interp_1d(const std::vector<double>& times,
                                     const std::vector<double>& values,
                                     const std::vector<double>& queries);
}  // namespace detail

}  // namespace svr
