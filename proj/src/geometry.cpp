#include "svr/geometry.hpp"

#include <Eigen/Geometry>
#include <Eigen/SVD>
#include <algorithm>
#include <array>
#include <cmath>

namespace svr {

RigidTransform RigidTransform::translate(const Eigen::Vector3d& t) {
  RigidTransform out;
  out.translation = t;
  return out;
}

RigidTransform RigidTransform::from_rotation_vector_deg(const Eigen::Vector3d& rotvec_deg,
                                                        const Eigen::Vector3d& t) {
  RigidTransform out;
  const double angle_deg = rotvec_deg.norm();
  if (angle_deg > 0.0) {
    const double angle_rad = angle_deg * M_PI / 180.0;
    out.rotation = Eigen::AngleAxisd(angle_rad, rotvec_deg.normalized()).toRotationMatrix();
  }
  out.translation = t;
  return out;
}

Eigen::Matrix4d RigidTransform::homogeneous() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.block<3, 3>(0, 0) = rotation;
  m.block<3, 1>(0, 3) = translation;
  return m;
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform out;
  out.rotation = rotation.transpose();
  out.translation = -out.rotation * translation;
  return out;
}

Eigen::Vector3d RigidTransform::rotation_vector_deg() const {
  Eigen::AngleAxisd aa(rotation);
  return aa.axis() * (aa.angle() * 180.0 / M_PI);
}

bool RigidTransform::is_valid(double tol) const {
  if (!rotation.allFinite() || !translation.allFinite()) return false;
  const Eigen::Matrix3d gram = rotation.transpose() * rotation;
  if ((gram - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > tol) return false;
  return std::abs(rotation.determinant() - 1.0) <= tol;
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  RigidTransform out;
  out.rotation = a.rotation * b.rotation;
  out.translation = a.rotation * b.translation + a.translation;
  return out;
}

bool DisplacementField::finite() const {
  for (const auto& v : data)
    if (!v.allFinite()) return false;
  return true;
}

DisplacementField prescribed_pose_field(const RigidTransform& stack_index_translation,
                                        const RigidTransform& orientation,
                                        const PixelGrid& grid, int level,
                                        const LevelParams& params) {
  if (!(params.scale > 0.0)) throw GeometryError("prescribed_pose_field: non-positive scale");
  if (!grid.valid()) throw GeometryError("prescribed_pose_field: invalid grid");

  Eigen::Matrix4d center = Eigen::Matrix4d::Identity();
  center.block<3, 1>(0, 3) = params.center;
  Eigen::Matrix4d decenter = Eigen::Matrix4d::Identity();
  decenter.block<3, 1>(0, 3) = -params.center;
  Eigen::Matrix4d scale_inv = Eigen::Matrix4d::Identity();
  scale_inv.block<3, 3>(0, 0) *= 1.0 / params.scale;

  const Eigen::Matrix4d fused = center * orientation.homogeneous() * decenter * scale_inv *
                                stack_index_translation.homogeneous();

  DisplacementField field(grid.width, grid.height, level);
  for (int y = 0; y < grid.height; ++y) {
    for (int x = 0; x < grid.width; ++x) {
      const Eigen::Vector4d p(static_cast<double>(x), static_cast<double>(y), 0.0, 1.0);
      field.at(x, y) = (fused * p).head<3>() - p.head<3>();
    }
  }
  return field;
}

DisplacementField field_from_pose(const RigidTransform& pose, const PixelGrid& grid, int level) {
  DisplacementField field(grid.width, grid.height, level);
  for (int y = 0; y < grid.height; ++y) {
    for (int x = 0; x < grid.width; ++x) {
      const Eigen::Vector3d p(static_cast<double>(x), static_cast<double>(y), 0.0);
      field.at(x, y) = pose.apply(p) - p;
    }
  }
  return field;
}

RigidTransform index_translation_for_pose(const RigidTransform& pose, const LevelParams& params) {
  // Solve C R C^-1 T = G for a pure-translation T, with R = pose rotation.
  const Eigen::Vector3d c = params.center;
  RigidTransform t;
  t.translation = pose.rotation.transpose() * (pose.translation - c) + c;
  return t;
}

RigidTransform project_to_rigid(const DisplacementField& field, const PixelGrid& grid) {
  if (field.width != grid.width || field.height != grid.height)
    throw GeometryError("project_to_rigid: field/grid size mismatch");
  const size_t n = field.data.size();
  if (n < 3 || grid.width < 2 || grid.height < 2)
    throw GeometryError("project_to_rigid: degenerate (collinear) pixel set");
  if (!field.finite()) throw GeometryError("project_to_rigid: non-finite field");

  Eigen::Vector3d src_mean = Eigen::Vector3d::Zero();
  Eigen::Vector3d dst_mean = Eigen::Vector3d::Zero();
  for (int y = 0; y < grid.height; ++y) {
    for (int x = 0; x < grid.width; ++x) {
      const Eigen::Vector3d p(static_cast<double>(x), static_cast<double>(y), 0.0);
      src_mean += p;
      dst_mean += p + field.at(x, y);
    }
  }
  src_mean /= static_cast<double>(n);
  dst_mean /= static_cast<double>(n);

  Eigen::Matrix3d cross = Eigen::Matrix3d::Zero();
  for (int y = 0; y < grid.height; ++y) {
    for (int x = 0; x < grid.width; ++x) {
      const Eigen::Vector3d p(static_cast<double>(x), static_cast<double>(y), 0.0);
      cross += (p - src_mean) * (p + field.at(x, y) - dst_mean).transpose();
    }
  }

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  RigidTransform out;
  out.rotation = svd.matrixV() * d * svd.matrixU().transpose();
  out.translation = dst_mean - out.rotation * src_mean;
  return out;
}

namespace {

// Cox-de Boor basis function N_{i,p} on a clamped knot vector. Evaluation at
// the right endpoint is folded into the last nonempty span.
double basis(const std::vector<double>& knots, int i, int p, double t) {
  if (p == 0) {
    const bool last = (knots[i + 1] == knots.back()) && (t == knots.back());
    return (t >= knots[i] && (t < knots[i + 1] || last)) ? 1.0 : 0.0;
  }
  double left = 0.0, right = 0.0;
  const double den_l = knots[i + p] - knots[i];
  const double den_r = knots[i + p + 1] - knots[i + 1];
  if (den_l > 0.0) left = (t - knots[i]) / den_l * basis(knots, i, p - 1, t);
  if (den_r > 0.0) right = (knots[i + p + 1] - t) / den_r * basis(knots, i + 1, p - 1, t);
  return left + right;
}

double basis_d1(const std::vector<double>& knots, int i, int p, double t) {
  double left = 0.0, right = 0.0;
  const double den_l = knots[i + p] - knots[i];
  const double den_r = knots[i + p + 1] - knots[i + 1];
  if (den_l > 0.0) left = basis(knots, i, p - 1, t) / den_l;
  if (den_r > 0.0) right = basis(knots, i + 1, p - 1, t) / den_r;
  return p * (left - right);
}

double basis_d2(const std::vector<double>& knots, int i, int p, double t) {
  double left = 0.0, right = 0.0;
  const double den_l = knots[i + p] - knots[i];
  const double den_r = knots[i + p + 1] - knots[i + 1];
  if (den_l > 0.0) left = basis_d1(knots, i, p - 1, t) / den_l;
  if (den_r > 0.0) right = basis_d1(knots, i + 1, p - 1, t) / den_r;
  return p * (left - right);
}

}  // namespace

namespace detail {

std::vector<double> spline_interp_1d(const std::vector<double>& times,
                                     const std::vector<double>& values,
                                     const std::vector<double>& queries) {
  const int n = static_cast<int>(times.size());
  if (n == 0 || times.size() != values.size())
    throw GeometryError("spline_interp_1d: bad keyframe arrays");
  for (int i = 1; i < n; ++i)
    if (!(times[i] > times[i - 1])) throw GeometryError("spline_interp_1d: unsorted keyframe times");

  std::vector<double> out(queries.size());
  if (n == 1) {
    std::fill(out.begin(), out.end(), values[0]);
    return out;
  }
  if (n == 2) {
    for (size_t q = 0; q < queries.size(); ++q) {
      const double t = std::clamp(queries[q], times.front(), times.back());
      const double u = (t - times[0]) / (times[1] - times[0]);
      out[q] = (1.0 - u) * values[0] + u * values[1];
    }
    return out;
  }

  // Cubic with clamped knots; interior knots at interior keyframe times.
  const int p = 3;
  const int m = n + 2;  // control points
  std::vector<double> knots;
  knots.reserve(m + p + 1);
  for (int k = 0; k <= p; ++k) knots.push_back(times.front());
  for (int i = 1; i < n - 1; ++i) knots.push_back(times[i]);
  for (int k = 0; k <= p; ++k) knots.push_back(times.back());

  // Collocation: interpolate all keyframes, zero second derivative at ends.
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(m, m);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(m);
  for (int j = 0; j < m; ++j) A(0, j) = basis_d2(knots, j, p, times.front());
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) A(i + 1, j) = basis(knots, j, p, times[i]);
    b(i + 1) = values[i];
  }
  for (int j = 0; j < m; ++j) A(m - 1, j) = basis_d2(knots, j, p, times.back());

  const Eigen::VectorXd ctrl = A.colPivHouseholderQr().solve(b);

  for (size_t q = 0; q < queries.size(); ++q) {
    const double t = std::clamp(queries[q], times.front(), times.back());
    double v = 0.0;
    for (int j = 0; j < m; ++j) v += ctrl(j) * basis(knots, j, p, t);
    out[q] = v;
  }
  return out;
}

}  // namespace detail

std::vector<RigidTransform> interpolate_rigid_trajectory(
    const std::vector<std::pair<double, RigidTransform>>& keyframes,
    const std::vector<double>& query_times) {
  if (keyframes.empty()) throw GeometryError("interpolate_rigid_trajectory: no keyframes");
  std::vector<double> times(keyframes.size());
  std::array<std::vector<double>, 6> comps;
  for (auto& c : comps) c.resize(keyframes.size());
  for (size_t i = 0; i < keyframes.size(); ++i) {
    times[i] = keyframes[i].first;
    const Eigen::Vector3d rv = keyframes[i].second.rotation_vector_deg();
    const Eigen::Vector3d tr = keyframes[i].second.translation;
    for (int a = 0; a < 3; ++a) {
      comps[a][i] = rv[a];
      comps[3 + a][i] = tr[a];
    }
  }

  std::array<std::vector<double>, 6> interp;
  for (int a = 0; a < 6; ++a) interp[a] = detail::spline_interp_1d(times, comps[a], query_times);

  std::vector<RigidTransform> out(query_times.size());
  for (size_t q = 0; q < query_times.size(); ++q) {
    const Eigen::Vector3d rv(interp[0][q], interp[1][q], interp[2][q]);
    const Eigen::Vector3d tr(interp[3][q], interp[4][q], interp[5][q]);
    out[q] = RigidTransform::from_rotation_vector_deg(rv, tr);
  }
  return out;
}

}  // namespace svr
