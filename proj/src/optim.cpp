#include "svr/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <numbers>
#include <json.hpp>

#include "svr/metrics.hpp"
#include "svr/motion_sim.hpp"

namespace svr {

namespace {

RigidTransform about_point(const Eigen::Vector3d& c, const Eigen::Matrix3d& rot,
                           const Eigen::Vector3d& t) {
  RigidTransform out;
  out.rotation = rot;
  out.translation = c - rot * c + t;
  return out;
}

struct PixelRef {
  size_t stack, slice;
  int x, y;
};

std::vector<PixelRef> foreground_pixels(const std::vector<SliceStack>& stacks) {
  std::vector<PixelRef> out;
  for (size_t s = 0; s < stacks.size(); ++s)
    for (size_t k = 0; k < stacks[s].slices.size(); ++k) {
      const Slice& sl = stacks[s].slices[k];
      for (int y = 0; y < sl.grid.height; ++y)
        for (int x = 0; x < sl.grid.width; ++x)
          if (sl.mask[sl.pix(x, y)]) out.push_back({s, k, x, y});
    }
  return out;
}

}  // namespace

void ReconConfig::validate() const {
  if (outer_iters < 1 || inner_recon_iters < 1 || pyramid_levels < 1 || pose_max_iters < 1 ||
      flow_iters_per_level < 1)
    throw OptimError("ReconConfig: iteration counts must be >= 1");
  if (!(cg_tol > 0.0) || !(pose_step_tol > 0.0) || !(flow_max_disp > 0.0))
    throw OptimError("ReconConfig: tolerances must be > 0");
}

double predict_pixel(const Volume& volume, const RigidTransform& pose, const PsfKernel& psf,
                     int x, int y) {
  const Eigen::Vector3d p(static_cast<double>(x), static_cast<double>(y), 0.0);
  double v = 0.0;
  for (size_t t = 0; t < psf.size(); ++t)
    v += psf.weights[t] * pull_one(volume, pose.apply(p + psf.offsets[t]));
  return v;
}

double data_consistency(const std::vector<SliceStack>& stacks,
                        const std::vector<RigidTransform>& poses, const Volume& volume,
                        const PsfKernel& psf) {
  double acc = 0.0;
  size_t pose_idx = 0;
  for (const auto& stack : stacks)
    for (const auto& slice : stack.slices) {
      const RigidTransform& pose = poses[pose_idx++];
      for (int y = 0; y < slice.grid.height; ++y)
        for (int x = 0; x < slice.grid.width; ++x) {
          if (!slice.mask[slice.pix(x, y)]) continue;
          const double r = slice.data[slice.pix(x, y)] - predict_pixel(volume, pose, psf, x, y);
          acc += r * r;
        }
    }
  return acc;
}

VolumeUpdateResult volume_update(const std::vector<SliceStack>& stacks,
                                 const std::vector<RigidTransform>& poses, const PsfKernel& psf,
                                 const Volume& v0, int iters, double cg_tol) {
  std::vector<const Slice*> slices;
  std::vector<const RigidTransform*> slice_pose;
  {
    size_t pose_idx = 0;
    for (const auto& stack : stacks)
      for (const auto& slice : stack.slices) {
        slices.push_back(&slice);
        slice_pose.push_back(&poses[pose_idx++]);
      }
  }

  Volume scratch(v0.dims, v0.spacing, v0.origin);
  const size_t n_vox = scratch.size();

  // y = A x over foreground pixels (raster order per slice).
  auto apply = [&](const std::vector<double>& x, std::vector<double>& y) {
    scratch.data = x;
    size_t row = 0;
    for (size_t s = 0; s < slices.size(); ++s) {
      const Slice& sl = *slices[s];
      for (int py = 0; py < sl.grid.height; ++py)
        for (int px = 0; px < sl.grid.width; ++px) {
          if (!sl.mask[sl.pix(px, py)]) continue;
          y[row++] = predict_pixel(scratch, *slice_pose[s], psf, px, py);
        }
    }
  };

  auto adjoint = [&](const std::vector<double>& y, std::vector<double>& x) {
    std::fill(scratch.data.begin(), scratch.data.end(), 0.0);
    std::fill(scratch.weight.begin(), scratch.weight.end(), 0.0);
    size_t row = 0;
    for (size_t s = 0; s < slices.size(); ++s) {
      const Slice& sl = *slices[s];
      for (int py = 0; py < sl.grid.height; ++py)
        for (int px = 0; px < sl.grid.width; ++px) {
          if (!sl.mask[sl.pix(px, py)]) continue;
          const double v = y[row++];
          const Eigen::Vector3d p(static_cast<double>(px), static_cast<double>(py), 0.0);
          for (size_t t = 0; t < psf.size(); ++t)
            push_one(scratch, slice_pose[s]->apply(p + psf.offsets[t]), psf.weights[t] * v,
                     psf.weights[t]);
        }
    }
    x = scratch.data;
  };

  size_t n_rows = 0;
  for (const Slice* sl : slices) n_rows += sl->n_foreground();

  std::vector<double> obs(n_rows);
  {
    size_t row = 0;
    for (const Slice* sl : slices)
      for (size_t i = 0; i < sl->n_pixels(); ++i)
        if (sl->mask[i]) obs[row++] = sl->data[i];
  }

  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
  };

  std::vector<double> atb(n_vox), x = v0.data, tmp_rows(n_rows), atax(n_vox);
  adjoint(obs, atb);

  auto normal_apply = [&](const std::vector<double>& v, std::vector<double>& out) {
    apply(v, tmp_rows);
    adjoint(tmp_rows, out);
  };

  VolumeUpdateResult result;
  normal_apply(x, atax);
  std::vector<double> r(n_vox), p(n_vox), ap(n_vox);
  for (size_t i = 0; i < n_vox; ++i) r[i] = atb[i] - atax[i];
  p = r;
  double rr = dot(r, r);
  const double b_norm = std::sqrt(dot(atb, atb));
  result.normal_residual_history.push_back(std::sqrt(rr));

  int it = 0;
  for (; it < iters; ++it) {
    if (b_norm > 0.0 && std::sqrt(rr) <= cg_tol * b_norm) break;
    if (rr == 0.0) break;
    normal_apply(p, ap);
    const double pap = dot(p, ap);
    if (!(pap > 0.0)) break;  // p in the operator's null space
    const double alpha = rr / pap;
    for (size_t i = 0; i < n_vox; ++i) {
      x[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
    }
    const double rr_new = dot(r, r);
    if (!std::isfinite(rr_new)) throw OptimError("volume_update: non-finite residual");
    result.normal_residual_history.push_back(std::sqrt(rr_new));
    const double beta = rr_new / rr;
    rr = rr_new;
    for (size_t i = 0; i < n_vox; ++i) p[i] = r[i] + beta * p[i];
  }
  result.truncated = (it == iters) && b_norm > 0.0 && std::sqrt(rr) > cg_tol * b_norm;

  result.volume = Volume(v0.dims, v0.spacing, v0.origin);
  result.volume.data = x;
  // Coverage from the adjoint of all-ones slices.
  std::vector<double> ones(n_rows, 1.0), cov(n_vox);
  adjoint(ones, cov);
  result.volume.weight = scratch.weight;
  return result;
}

namespace {

std::vector<double> slice_objective_residuals(const Slice& slice, const Volume& volume,
                                              const RigidTransform& pose, const PsfKernel& psf) {
  std::vector<double> r;
  r.reserve(slice.n_foreground());
  for (int y = 0; y < slice.grid.height; ++y)
    for (int x = 0; x < slice.grid.width; ++x) {
      if (!slice.mask[slice.pix(x, y)]) continue;
      r.push_back(slice.data[slice.pix(x, y)] - predict_pixel(volume, pose, psf, x, y));
    }
  return r;
}

double sum_sq(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return acc;
}

Eigen::Vector3d slice_centroid(const Slice& slice) {
  Eigen::Vector3d c = Eigen::Vector3d::Zero();
  size_t n = 0;
  for (int y = 0; y < slice.grid.height; ++y)
    for (int x = 0; x < slice.grid.width; ++x)
      if (slice.mask[slice.pix(x, y)]) {
        c += Eigen::Vector3d(x, y, 0.0);
        ++n;
      }
  return n > 0 ? Eigen::Vector3d(c / static_cast<double>(n)) : c;
}

RigidTransform perturbed_pose(const RigidTransform& pose, const Eigen::Vector3d& center_vol,
                              const Eigen::Matrix<double, 6, 1>& params) {
  const RigidTransform delta =
      about_point(center_vol,
                  RigidTransform::from_rotation_vector_deg(params.head<3>()).rotation,
                  params.tail<3>());
  return compose(delta, pose);
}

}  // namespace

Eigen::MatrixXd pose_jacobian(const Slice& slice, const Volume& volume,
                              const RigidTransform& pose0, const PsfKernel& psf, double step,
                              int order) {
  const Eigen::Vector3d center = pose0.apply(slice_centroid(slice));
  const size_t n = slice.n_foreground();
  Eigen::MatrixXd jac(n, 6);

  auto predict_at = [&](const Eigen::Matrix<double, 6, 1>& params) {
    const RigidTransform pose = perturbed_pose(pose0, center, params);
    std::vector<double> out;
    out.reserve(n);
    for (int y = 0; y < slice.grid.height; ++y)
      for (int x = 0; x < slice.grid.width; ++x)
        if (slice.mask[slice.pix(x, y)]) out.push_back(predict_pixel(volume, pose, psf, x, y));
    return out;
  };

  for (int j = 0; j < 6; ++j) {
    Eigen::Matrix<double, 6, 1> params = Eigen::Matrix<double, 6, 1>::Zero();
    if (order == 4) {
      params(j) = 2.0 * step;
      const auto f_p2 = predict_at(params);
      params(j) = step;
      const auto f_p1 = predict_at(params);
      params(j) = -step;
      const auto f_m1 = predict_at(params);
      params(j) = -2.0 * step;
      const auto f_m2 = predict_at(params);
      for (size_t i = 0; i < n; ++i)
        jac(i, j) = (-f_p2[i] + 8.0 * f_p1[i] - 8.0 * f_m1[i] + f_m2[i]) / (12.0 * step);
    } else {
      params(j) = step;
      const auto f_p = predict_at(params);
      params(j) = -step;
      const auto f_m = predict_at(params);
      for (size_t i = 0; i < n; ++i) jac(i, j) = (f_p[i] - f_m[i]) / (2.0 * step);
    }
  }
  return jac;
}

PoseUpdateResult pose_update(const Slice& slice, const Volume& volume,
                             const RigidTransform& pose0, const PsfKernel& psf,
                             const ReconConfig& config) {
  PoseUpdateResult result;
  result.pose = pose0;
  if (slice.n_foreground() == 0) {
    result.skipped = true;
    return result;
  }
  constexpr double kFdStep = 0.1;  // degrees / voxels

  RigidTransform pose = pose0;
  double objective = sum_sq(slice_objective_residuals(slice, volume, pose, psf));
  result.initial_objective = objective;

  for (int it = 0; it < config.pose_max_iters; ++it) {
    const Eigen::Vector3d center = pose.apply(slice_centroid(slice));
    const Eigen::MatrixXd jac = pose_jacobian(slice, volume, pose, psf, kFdStep, 2);
    const std::vector<double> res = slice_objective_residuals(slice, volume, pose, psf);
    Eigen::VectorXd r(res.size());
    for (size_t i = 0; i < res.size(); ++i) r(i) = res[i];

    Eigen::Matrix<double, 6, 6> jtj = jac.transpose() * jac;
    jtj.diagonal().array() += 1e-8 * (1.0 + jtj.diagonal().maxCoeff());
    const Eigen::Matrix<double, 6, 1> delta = jtj.ldlt().solve(jac.transpose() * r);
    if (!delta.allFinite()) break;

    double scale = 1.0;
    bool accepted = false;
    for (int h = 0; h < 12; ++h, scale *= 0.5) {
      const RigidTransform candidate = perturbed_pose(pose, center, scale * delta);
      const double cand_obj = sum_sq(slice_objective_residuals(slice, volume, candidate, psf));
      if (cand_obj < objective) {
        pose = candidate;
        objective = cand_obj;
        result.step_norm = (scale * delta).cwiseAbs().maxCoeff();
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    if (result.step_norm < config.pose_step_tol) break;
  }

  result.pose = pose;
  result.final_objective = objective;
  return result;
}

namespace {

// Deterministic greedy pattern search over the 6 rigid parameters, used to
// seed the Gauss-Newton pose update: its single-axis probe moves span a much
// wider basin than the local linearization, so slices several voxels or
// degrees off still find their way back. Only decisive objective decreases
// are accepted, so an aligned slice is never perturbed.
RigidTransform pattern_pose_search(const Slice& slice, const Volume& volume,
                                   const RigidTransform& pose0, const PsfKernel& psf) {
  if (slice.n_foreground() == 0) return pose0;
  RigidTransform pose = pose0;
  double objective = sum_sq(slice_objective_residuals(slice, volume, pose, psf));
  if (!(objective > 0.0)) return pose;
  const double rot_mags[] = {4.0, 2.0, 1.0};
  const double trans_mags[] = {2.0, 1.0, 0.5};
  for (int round = 0; round < 12; ++round) {
    const Eigen::Vector3d center = pose.apply(slice_centroid(slice));
    double best_obj = 0.98 * objective;
    RigidTransform best_pose = pose;
    bool found = false;
    for (int axis = 0; axis < 6; ++axis) {
      for (const double mag : axis < 3 ? rot_mags : trans_mags) {
        for (const double sign : {1.0, -1.0}) {
          Eigen::Matrix<double, 6, 1> params = Eigen::Matrix<double, 6, 1>::Zero();
          params(axis) = sign * mag;
          const RigidTransform cand = perturbed_pose(pose, center, params);
          const double obj = sum_sq(slice_objective_residuals(slice, volume, cand, psf));
          if (obj < best_obj) {
            best_obj = obj;
            best_pose = cand;
            found = true;
          }
        }
      }
    }
    if (!found) break;
    pose = best_pose;
    objective = best_obj;
  }
  return pose;
}

}  // namespace

DisplacementField flow_residual(const Slice& simulated, const Slice& observed,
                                const Slice* probe_minus, const Slice* probe_plus,
                                double max_disp, const FlowOptions& opts) {
  const PixelGrid& grid = simulated.grid;
  if (grid.width != observed.grid.width || grid.height != observed.grid.height)
    throw OptimError("flow_residual: grid mismatch");

  const int w = grid.width, h = grid.height;
  auto valid = [&](int x, int y) {
    const size_t i = simulated.pix(x, y);
    return simulated.mask[i] && observed.mask[i];
  };

  // Central-difference gradients of the simulated slice; zero where a
  // neighbor is missing.
  std::vector<double> gx(simulated.n_pixels(), 0.0), gy(simulated.n_pixels(), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!simulated.mask[simulated.pix(x, y)]) continue;
      if (x > 0 && x < w - 1 && simulated.mask[simulated.pix(x - 1, y)] &&
          simulated.mask[simulated.pix(x + 1, y)])
        gx[simulated.pix(x, y)] =
            0.5 * (simulated.data[simulated.pix(x + 1, y)] - simulated.data[simulated.pix(x - 1, y)]);
      if (y > 0 && y < h - 1 && simulated.mask[simulated.pix(x, y - 1)] &&
          simulated.mask[simulated.pix(x, y + 1)])
        gy[simulated.pix(x, y)] =
            0.5 * (simulated.data[simulated.pix(x, y + 1)] - simulated.data[simulated.pix(x, y - 1)]);
    }

  const int r = opts.window / 2;
  DisplacementField out(w, h, 0);

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!valid(x, y)) continue;

      double gxx = 0.0, gyy = 0.0, gxy = 0.0, bx = 0.0, by = 0.0;
      double ssd0 = 0.0, ssdm = 0.0, ssdp = 0.0;
      bool have_probes = probe_minus && probe_plus;
      for (int dy = -r; dy <= r; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= h) continue;
        for (int dx = -r; dx <= r; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= w) continue;
          if (!valid(xx, yy)) continue;
          const size_t i = simulated.pix(xx, yy);
          const double it = observed.data[i] - simulated.data[i];
          gxx += gx[i] * gx[i];
          gyy += gy[i] * gy[i];
          gxy += gx[i] * gy[i];
          bx += gx[i] * it;
          by += gy[i] * it;
          ssd0 += it * it;
          if (have_probes && probe_minus->mask[i] && probe_plus->mask[i]) {
            const double dm = observed.data[i] - probe_minus->data[i];
            const double dp = observed.data[i] - probe_plus->data[i];
            ssdm += dm * dm;
            ssdp += dp * dp;
          }
        }
      }

      Eigen::Vector3d d = Eigen::Vector3d::Zero();
      // Gate on the structure tensor's smallest eigenvalue: a window that is
      // flat (or has gradients along a single direction only) cannot support
      // a two-axis displacement solve and would emit arbitrary estimates.
      const double tr = gxx + gyy;
      const double det = gxx * gyy - gxy * gxy;
      const double lambda_min = 0.5 * (tr - std::sqrt(std::max(0.0, tr * tr - 4.0 * det)));
      if (lambda_min >= opts.min_gradient) {
        Eigen::Matrix2d g;
        g << gxx + opts.tikhonov, gxy, gxy, gyy + opts.tikhonov;
        const Eigen::Vector2d sol = g.inverse() * Eigen::Vector2d(bx, by);
        d.x() = sol.x();
        d.y() = sol.y();
      }
      if (have_probes) {
        const double denom = ssdm - 2.0 * ssd0 + ssdp;
        // A center SSD far below both probes means the slice already sits at
        // the through-plane optimum; the raw vertex formula would still emit
        // a step there (its fitted minimum dips below zero, impossible for
        // an SSD), so treat those pixels as converged.
        const bool at_optimum = ssd0 <= 0.05 * std::min(ssdm, ssdp);
        if (denom > 0.0 && !at_optimum) {
          const double z = std::clamp(0.5 * (ssdm - ssdp) / denom, -1.0, 1.0);
          const double fitted_min = ssd0 - 0.125 * (ssdm - ssdp) * (ssdm - ssdp) / denom;
          if (fitted_min >= 0.0) d.z() = z;
        }
      }

      d *= opts.gain;
      const double norm = d.norm();
      if (norm > max_disp) d *= max_disp / norm;
      out.at(x, y) = d;
    }
  return out;
}

DisplacementField resample_field(const DisplacementField& src, int target_w, int target_h,
                                 double coord_scale, double value_scale, int target_level) {
  DisplacementField out(target_w, target_h, target_level);
  for (int y = 0; y < target_h; ++y)
    for (int x = 0; x < target_w; ++x) {
      // Interpolate from the last interior cell when the target coordinate
      // falls past the source edge; the resulting linear extrapolation keeps
      // affine (in particular rigid) fields exact, where clamping would bend
      // them at the border.
      const double sx = x * coord_scale;
      const double sy = y * coord_scale;
      const int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, std::max(0, src.width - 2));
      const int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, std::max(0, src.height - 2));
      const int x1 = std::min(x0 + 1, src.width - 1);
      const int y1 = std::min(y0 + 1, src.height - 1);
      const double fx = (src.width > 1) ? sx - x0 : 0.0;
      const double fy = (src.height > 1) ? sy - y0 : 0.0;
      const Eigen::Vector3d v = (1 - fy) * ((1 - fx) * src.at(x0, y0) + fx * src.at(x1, y0)) +
                                fy * ((1 - fx) * src.at(x0, y1) + fx * src.at(x1, y1));
      out.at(x, y) = value_scale * v;
    }
  return out;
}

Slice downsample_slice(const Slice& src, int factor) {
  if (factor <= 1) return src;
  PixelGrid grid;
  grid.width = (src.grid.width + factor - 1) / factor;
  grid.height = (src.grid.height + factor - 1) / factor;
  grid.spacing = src.grid.spacing * factor;
  Slice out(grid, src.index_in_stack);
  out.acquisition_time_index = src.acquisition_time_index;

  // Window centered on the source pixel x*factor, so the coarse pixel and
  // its averaging footprint share the same coordinate; edge pixels of an
  // even-sized window carry half weight. A shifted (block-aligned) window
  // would put a (factor-1)/2-pixel bias into every coarse level, which the
  // flow refinement would then chase as apparent motion.
  const double half = factor / 2.0;
  auto tap_weight = [&](int d) {
    return std::max(0.0, std::min(d + 0.5, half) - std::max(d - 0.5, -half));
  };
  const int r = (factor + 1) / 2;

  for (int y = 0; y < grid.height; ++y)
    for (int x = 0; x < grid.width; ++x) {
      double acc = 0.0, w_fg = 0.0, w_total = 0.0;
      for (int dy = -r; dy <= r; ++dy) {
        const int yy = y * factor + dy;
        if (yy < 0 || yy >= src.grid.height) continue;
        const double wy = tap_weight(dy);
        if (wy <= 0.0) continue;
        for (int dx = -r; dx <= r; ++dx) {
          const int xx = x * factor + dx;
          if (xx < 0 || xx >= src.grid.width) continue;
          const double w = wy * tap_weight(dx);
          if (w <= 0.0) continue;
          w_total += w;
          if (src.mask[src.pix(xx, yy)]) {
            acc += w * src.data[src.pix(xx, yy)];
            w_fg += w;
          }
        }
      }
      if (w_total > 0.0 && 2.0 * w_fg >= w_total) {
        out.data[out.pix(x, y)] = acc / w_fg;
        out.mask[out.pix(x, y)] = 1;
      }
    }
  return out;
}

std::vector<DisplacementField> MultiscaleResult::full_res_fields() const {
  std::vector<DisplacementField> out;
  if (fields_per_level.empty()) return out;
  for (const auto& stack_fields : fields_per_level.back())
    for (const auto& f : stack_fields) out.push_back(f);
  return out;
}

namespace {

// Data term of one slice against the current volume: SSD over the slice's
// foreground, with pixels the field pushes out of bounds scored against zero
// so that shrinking the overlap cannot masquerade as an improvement.
// Mean squared residual of one slice against the current volume, restricted
// to pixels whose interpolation support is actually covered by data. Pulling
// from in-bounds but uncovered voxels reads zeros, which would let dark
// slices "match" empty space; those pixels carry no evidence and are
// excluded. Returns +inf when nothing overlaps.
double slice_ssd(const Volume& vol, const Volume& cov, const DisplacementField& field,
                 const Slice& obs, size_t* covered = nullptr) {
  const Slice sim = simulate_slice_field(vol, field, obs.grid);
  const Slice cov_sim = simulate_slice_field(cov, field, obs.grid);
  double ssd = 0.0;
  size_t n_cov = 0;
  for (size_t i = 0; i < obs.n_pixels(); ++i) {
    if (!obs.mask[i]) continue;
    if (!sim.mask[i] || cov_sim.data[i] < 0.5) continue;
    ++n_cov;
    ssd += (obs.data[i] - sim.data[i]) * (obs.data[i] - sim.data[i]);
  }
  if (covered) *covered = n_cov;
  if (n_cov == 0) return std::numeric_limits<double>::infinity();
  return ssd / static_cast<double>(n_cov);
}

// Mean squared residuals of two candidate fields over the pixels where both
// have covered support. Comparing each field on its own covered set would
// bias the decision whenever a shift moves boundary pixels in or out of
// coverage.
struct PairSsd {
  double current = std::numeric_limits<double>::infinity();
  double candidate = std::numeric_limits<double>::infinity();
  size_t common = 0;
  size_t cov_candidate = 0;  // candidate's total covered count
};

PairSsd slice_ssd_pair(const Volume& vol, const Volume& cov, const DisplacementField& fa,
                       const DisplacementField& fb, const Slice& obs) {
  const Slice sim_a = simulate_slice_field(vol, fa, obs.grid);
  const Slice cov_a = simulate_slice_field(cov, fa, obs.grid);
  const Slice sim_b = simulate_slice_field(vol, fb, obs.grid);
  const Slice cov_b = simulate_slice_field(cov, fb, obs.grid);
  PairSsd out;
  double ssd_a = 0.0, ssd_b = 0.0;
  for (size_t i = 0; i < obs.n_pixels(); ++i) {
    if (!obs.mask[i]) continue;
    const bool valid_a = sim_a.mask[i] && cov_a.data[i] >= 0.5;
    const bool valid_b = sim_b.mask[i] && cov_b.data[i] >= 0.5;
    if (valid_b) ++out.cov_candidate;
    if (!valid_a || !valid_b) continue;
    ++out.common;
    ssd_a += (obs.data[i] - sim_a.data[i]) * (obs.data[i] - sim_a.data[i]);
    ssd_b += (obs.data[i] - sim_b.data[i]) * (obs.data[i] - sim_b.data[i]);
  }
  if (out.common > 0) {
    out.current = ssd_a / static_cast<double>(out.common);
    out.candidate = ssd_b / static_cast<double>(out.common);
  }
  return out;
}

// Indicator volume of the covered voxels; interpolating it gives the covered
// fraction of a pull's support.
Volume coverage_indicator(const Volume& vol) {
  Volume cov(vol.dims, vol.spacing);
  for (size_t i = 0; i < vol.size(); ++i) {
    cov.data[i] = vol.weight[i] > Volume::kCoverageEps ? 1.0 : 0.0;
    cov.weight[i] = 1.0;
  }
  return cov;
}

}  // namespace

MultiscaleResult multiscale_refine(const std::vector<SliceStack>& stacks,
                                   const Eigen::Vector3i& full_dims,
                                   const Eigen::Vector3d& full_spacing,
                                   const ReconConfig& config) {
  config.validate();
  // Cap the pyramid depth so the coarsest slice grid keeps at least 8 pixels
  // per axis; below that the flow window spans the whole slice and the
  // estimates are meaningless.
  int min_extent = std::numeric_limits<int>::max();
  for (const auto& stack : stacks)
    for (const auto& sl : stack.slices)
      min_extent = std::min(min_extent, std::min(sl.grid.width, sl.grid.height));
  int levels = config.pyramid_levels;
  while (levels > 1 && (min_extent >> (levels - 1)) < 8) --levels;
  MultiscaleResult result;
  result.fields_per_level.resize(levels);

  std::vector<std::vector<DisplacementField>> fields(stacks.size());
  // Current rigid rotation per slice; maps the flow's slice-local residual
  // axes (in-plane x/y, through-plane z) into volume coordinates.
  std::vector<std::vector<Eigen::Matrix3d>> rotations(stacks.size());

  for (int s = 0; s < levels; ++s) {
    const int factor = 1 << (levels - 1 - s);
    Eigen::Vector3i dims_s;
    for (int a = 0; a < 3; ++a) dims_s[a] = std::max(1, (full_dims[a] + factor - 1) / factor);
    const Eigen::Vector3d spacing_s = full_spacing * factor;

    std::vector<SliceStack> stacks_s(stacks.size());
    for (size_t st = 0; st < stacks.size(); ++st) {
      stacks_s[st] = stacks[st];
      stacks_s[st].slices.clear();
      for (const auto& sl : stacks[st].slices)
        stacks_s[st].slices.push_back(downsample_slice(sl, factor));
    }

    if (s == 0) {
      // Prescribed poses at the coarsest level: same rotations, coordinates
      // scaled down by the level factor.
      for (size_t st = 0; st < stacks.size(); ++st) {
        const double step_vox = stacks[st].slice_gap / full_spacing.x();
        for (size_t k = 0; k < stacks[st].slices.size(); ++k) {
          RigidTransform pose =
              prescribed_pose(stacks[st].orientation_label, static_cast<int>(k), step_vox);
          pose.translation /= factor;
          const PixelGrid& g = stacks_s[st].slices[k].grid;
          fields[st].push_back(field_from_pose(pose, g, s));
          rotations[st].push_back(pose.rotation);
        }
      }
    }

    // Raw (unnormalized) splat of one slice under its current field.
    const auto splat_slice = [&](Volume& acc, const Slice& slice, const DisplacementField& f) {
      for (int y = 0; y < slice.grid.height; ++y)
        for (int x = 0; x < slice.grid.width; ++x) {
          const size_t i = slice.pix(x, y);
          if (!slice.mask[i]) continue;
          const Eigen::Vector3d p(static_cast<double>(x), static_cast<double>(y), 0.0);
          push_one(acc, p + f.at(x, y), slice.data[i], 1.0);
        }
    };

    for (int inner = 0; inner < config.flow_iters_per_level; ++inner) {
      // Unnormalized consensus accumulator over all slices; each slice is
      // then matched against the volume with its own contribution removed.
      // Matching against a volume that contains the slice itself anchors the
      // slice to its own (possibly misplaced) data and stalls the refinement.
      Volume acc(dims_s, spacing_s);
      const std::vector<std::vector<DisplacementField>> fields_snap = fields;
      for (size_t st = 0; st < stacks.size(); ++st)
        for (size_t k = 0; k < stacks_s[st].slices.size(); ++k)
          splat_slice(acc, stacks_s[st].slices[k], fields_snap[st][k]);

      // Mean foreground energy per slice; slices far below their stack's
      // median carry almost no intensity, so any motion estimate on them is
      // noise-driven. They keep their prescribed/upsampled fields.
      std::vector<std::vector<double>> slice_energy(stacks.size());
      std::vector<double> stack_median_energy(stacks.size(), 0.0);
      for (size_t st = 0; st < stacks.size(); ++st) {
        for (const auto& sl : stacks_s[st].slices) {
          double e = 0.0;
          size_t n_fg = 0;
          for (size_t i = 0; i < sl.n_pixels(); ++i)
            if (sl.mask[i]) {
              e += sl.data[i] * sl.data[i];
              ++n_fg;
            }
          slice_energy[st].push_back(n_fg ? e / static_cast<double>(n_fg) : 0.0);
        }
        std::vector<double> sorted = slice_energy[st];
        std::sort(sorted.begin(), sorted.end());
        if (!sorted.empty()) stack_median_energy[st] = sorted[sorted.size() / 2];
      }

      for (size_t st = 0; st < stacks.size(); ++st) {
        for (size_t k = 0; k < stacks_s[st].slices.size(); ++k) {
          const Slice& obs = stacks_s[st].slices[k];
          DisplacementField& f = fields[st][k];
          const Eigen::Matrix3d& rot = rotations[st][k];
          if (slice_energy[st][k] < 0.01 * stack_median_energy[st]) continue;
          Volume own(dims_s, spacing_s);
          splat_slice(own, obs, fields_snap[st][k]);
          Volume vol = acc;
          for (size_t i = 0; i < vol.size(); ++i) {
            vol.data[i] -= own.data[i];
            vol.weight[i] -= own.weight[i];
          }
          normalize(vol);
          const Volume cov = coverage_indicator(vol);

          // Greedy rigid pattern search first: single-axis translation and
          // rotation moves in the slice's local frame, accepted when they
          // improve the leave-one-out data term decisively. The flow's
          // 3-point quadratic only sees +-1 voxel and its incremental steps
          // improve too gradually in a smooth volume, so gross motion (and
          // coupled rotation/translation error) is fixed here; the flow
          // then polishes sub-voxel in-plane structure.
          {
            size_t cov0 = 0;
            slice_ssd(vol, cov, f, obs, &cov0);

            const auto centroid = [&]() {
              Eigen::Vector3d c = Eigen::Vector3d::Zero();
              size_t n = 0;
              for (int y = 0; y < obs.grid.height; ++y)
                for (int x = 0; x < obs.grid.width; ++x) {
                  if (!obs.mask[obs.pix(x, y)]) continue;
                  c += Eigen::Vector3d(x, y, 0.0) + f.at(x, y);
                  ++n;
                }
              return n ? Eigen::Vector3d(c / static_cast<double>(n)) : c;
            };

            // Candidate moves: (kind, axis, magnitude, acceptance bar).
            // Through-plane translations and tilts see a phase-biased
            // consensus (slices splat at fractional plane positions), so
            // they need a decisive gain; in-plane moves are unbiased and
            // accept on a normal margin.
            struct Move {
              int kind;     // 0 translation, 1 rotation
              int axis;     // slice-local axis index
              double mag;   // level voxels / degrees
              double bar;   // acceptance ratio
            };
            std::vector<Move> moves;
            for (const double t : {2.0, 1.0, 0.5}) {
              moves.push_back({0, 0, t, 0.9});
              moves.push_back({0, 0, -t, 0.9});
              moves.push_back({0, 1, t, 0.9});
              moves.push_back({0, 1, -t, 0.9});
              moves.push_back({0, 2, t, 0.6});
              moves.push_back({0, 2, -t, 0.6});
            }
            for (const double a : {4.0, 2.0, 1.0}) {
              moves.push_back({1, 2, a, 0.9});
              moves.push_back({1, 2, -a, 0.9});
              moves.push_back({1, 0, a, 0.75});
              moves.push_back({1, 0, -a, 0.75});
              moves.push_back({1, 1, a, 0.75});
              moves.push_back({1, 1, -a, 0.75});
            }

            for (int round = 0; round < 10; ++round) {
              const Eigen::Matrix3d& r = rotations[st][k];
              const Eigen::Vector3d c = centroid();
              double best_score = 1.0;  // ratio / bar, must be <= 1
              DisplacementField best_field;
              Eigen::Matrix3d best_rot = r;
              bool found = false;
              for (const Move& m : moves) {
                DisplacementField cand = f;
                Eigen::Matrix3d cand_rot = r;
                if (m.kind == 0) {
                  const Eigen::Vector3d off = r.col(m.axis) * m.mag;
                  for (auto& d : cand.data) d += off;
                } else {
                  const Eigen::Matrix3d rd =
                      Eigen::AngleAxisd(m.mag * std::numbers::pi / 180.0, r.col(m.axis))
                          .toRotationMatrix();
                  for (int y = 0; y < obs.grid.height; ++y)
                    for (int x = 0; x < obs.grid.width; ++x) {
                      const Eigen::Vector3d p(static_cast<double>(x), static_cast<double>(y),
                                              0.0);
                      cand.at(x, y) = rd * (p + f.at(x, y) - c) + c - p;
                    }
                  cand_rot = rd * r;
                }
                const PairSsd p = slice_ssd_pair(vol, cov, f, cand, obs);
                if (p.common == 0 || p.current <= 0.0) continue;
                if (static_cast<double>(p.cov_candidate) < 0.5 * static_cast<double>(cov0))
                  continue;
                const double score = (p.candidate / p.current) / m.bar;
                if (score < best_score) {
                  best_score = score;
                  best_field = cand;
                  best_rot = cand_rot;
                  found = true;
                }
              }
              if (!found) break;
              f = best_field;
              rotations[st][k] = best_rot;
            }
          }
          // Probe along the slice normal in volume coordinates; probing a
          // fixed volume axis would mix an in-plane direction into the
          // "through-plane" estimate for non-axial slices.
          const Eigen::Vector3d normal = rot.col(2);
          const Slice sim = simulate_slice_field(vol, f, obs.grid);
          const Slice pm = simulate_slice_field(vol, f, obs.grid, -normal);
          const Slice pp = simulate_slice_field(vol, f, obs.grid, normal);
          const DisplacementField delta =
              flow_residual(sim, obs, &pm, &pp, config.flow_max_disp, config.flow);
          // The slices move rigidly; projecting after every update keeps the
          // per-pixel flow noise from accumulating into a non-rigid drift.
          // The mean through-plane shift of each update is removed: the
          // flow's z estimate inherits a phase bias from splatting slices at
          // fractional plane positions, so its mean is owned by the discrete
          // normal search above, while its gradient (the slice tilt) is
          // unbiased and kept.
          const auto make_candidate = [&](bool keep_tilt) {
            DisplacementField cand = f;
            for (size_t i = 0; i < cand.data.size(); ++i) {
              Eigen::Vector3d d = delta.data[i];
              if (!keep_tilt) d.z() = 0.0;
              cand.data[i] += rot * d;
            }
            RigidTransform pose;
            pose.rotation = rot;
            if (obs.grid.width >= 2 && obs.grid.height >= 2) {
              pose = project_to_rigid(cand, obs.grid);
              cand = field_from_pose(pose, obs.grid, s);
              Eigen::Vector3d mean_step = Eigen::Vector3d::Zero();
              for (size_t i = 0; i < cand.data.size(); ++i)
                mean_step += cand.data[i] - f.data[i];
              mean_step /= static_cast<double>(cand.data.size());
              const double zc = mean_step.dot(normal);
              for (auto& d : cand.data) d -= normal * zc;
              pose.translation -= normal * zc;
            }
            return std::make_pair(cand, pose);
          };

          size_t cov_old = 0;
          slice_ssd(vol, cov, f, obs, &cov_old);
          // The tilt estimate is noisy when the true motion is mostly
          // translational; try the update with and without it and keep the
          // better-scoring one. Require a clear improvement either way:
          // marginal gains at this point come from chasing the
          // reconstruction's own blur, not from motion.
          bool accepted = false;
          double best_ratio = 0.9;
          DisplacementField best_field;
          Eigen::Matrix3d best_rot = rot;
          for (const bool keep_tilt : {false, true}) {
            const auto [cand, pose] = make_candidate(keep_tilt);
            const PairSsd p = slice_ssd_pair(vol, cov, f, cand, obs);
            if (p.common == 0 || p.current <= 0.0) continue;
            if (static_cast<double>(p.cov_candidate) < 0.5 * static_cast<double>(cov_old))
              continue;
            const double ratio = p.candidate / p.current;
            // The tilted candidate can chase interpolation blur, so it must
            // beat the flat one decisively, not just on the margin.
            const double bar = keep_tilt && accepted ? 0.8 * best_ratio : best_ratio;
            if (ratio <= bar) {
              best_ratio = ratio;
              best_field = cand;
              best_rot = pose.rotation;
              accepted = true;
            }
          }
          if (accepted) {
            f = best_field;
            rotations[st][k] = best_rot;
          }
        }
      }
    }

    for (const auto& sf : fields) result.fields_per_level[s].push_back(sf);

    if (s + 1 < levels) {
      const int next_factor = 1 << (levels - 2 - s);
      for (size_t st = 0; st < stacks.size(); ++st) {
        for (size_t k = 0; k < fields[st].size(); ++k) {
          const Slice full = stacks[st].slices[k];
          const int tw = std::max(1, (full.grid.width + next_factor - 1) / next_factor);
          const int th = std::max(1, (full.grid.height + next_factor - 1) / next_factor);
          fields[st][k] = resample_field(fields[st][k], tw, th, 0.5, 2.0, s + 1);
        }
      }
    }
  }
  return result;
}

std::vector<RigidTransform> finalize(const std::vector<DisplacementField>& fields_full_res,
                                     const PixelGrid& grid) {
  std::vector<RigidTransform> poses;
  poses.reserve(fields_full_res.size());
  for (const auto& f : fields_full_res) poses.push_back(project_to_rigid(f, grid));
  return poses;
}

SvrResult alternating_svr(const std::vector<SliceStack>& stacks,
                          const std::vector<DisplacementField>& init_fields,
                          const Eigen::Vector3i& dims, const Eigen::Vector3d& spacing,
                          const PsfKernel& psf, const ReconConfig& config) {
  config.validate();
  SvrResult result;
  result.volume = init_volume(stacks, init_fields, dims, spacing);

  {
    size_t idx = 0;
    for (const auto& stack : stacks)
      for (const auto& slice : stack.slices)
        result.poses.push_back(project_to_rigid(init_fields[idx++], slice.grid));
  }

  result.data_consistency_history.push_back(
      data_consistency(stacks, result.poses, result.volume, psf));

  const size_t n_slices = result.poses.size();
  result.slice_scales.assign(n_slices, 1.0);

  for (int outer = 0; outer < config.outer_iters; ++outer) {
    VolumeUpdateResult vu = volume_update(stacks, result.poses, psf, result.volume,
                                          config.inner_recon_iters, config.cg_tol);
    result.volume = std::move(vu.volume);

    double step_acc = 0.0;
    size_t idx = 0;
    std::vector<double> slice_ncc;
    for (const auto& stack : stacks) {
      for (const auto& slice : stack.slices) {
        const RigidTransform seeded =
            pattern_pose_search(slice, result.volume, result.poses[idx], psf);
        const PoseUpdateResult pu = pose_update(slice, result.volume, seeded, psf, config);
        result.poses[idx] = pu.pose;
        step_acc += pu.step_norm;

        // Closed-form per-slice intensity scale against the simulation.
        double num = 0.0, den = 0.0;
        for (int y = 0; y < slice.grid.height; ++y)
          for (int x = 0; x < slice.grid.width; ++x) {
            if (!slice.mask[slice.pix(x, y)]) continue;
            const double sim = predict_pixel(result.volume, result.poses[idx], psf, x, y);
            num += slice.data[slice.pix(x, y)] * sim;
            den += sim * sim;
          }
        result.slice_scales[idx] = den > 0.0 ? std::max(0.0, num / den) : 1.0;

        const Slice sim_slice = simulate_slice_psf(result.volume, result.poses[idx], slice.grid, psf);
        bool degenerate = false;
        bool any = false;
        for (size_t i = 0; i < slice.n_pixels(); ++i)
          if (slice.mask[i] && sim_slice.mask[i]) { any = true; break; }
        slice_ncc.push_back(any ? ncc2d(slice, sim_slice, &degenerate) : 0.0);
        ++idx;
      }
    }

    const double dc = data_consistency(stacks, result.poses, result.volume, psf);
    result.data_consistency_history.push_back(dc);

    nlohmann::json line;
    line["iteration"] = outer + 1;
    line["data_consistency"] = dc;
    line["mean_pose_step"] = n_slices > 0 ? step_acc / static_cast<double>(n_slices) : 0.0;
    line["per_slice_ncc"] = slice_ncc;
    result.metrics_log.push_back(line.dump());
  }

  // Mean slice scale fixes the global intensity gauge of the volume.
  double mean_scale = 0.0;
  for (double s : result.slice_scales) mean_scale += s;
  mean_scale = n_slices > 0 ? mean_scale / static_cast<double>(n_slices) : 1.0;
  if (mean_scale > 0.0)
    for (double& v : result.volume.data) v *= mean_scale;

  return result;
}

namespace {

// NCC between a slice's observed foreground pixels and the model prediction
// at the given pose.
double slice_prediction_ncc(const Slice& slice, const Volume& volume, const RigidTransform& pose,
                            const PsfKernel& psf) {
  std::vector<double> a, b;
  for (int y = 0; y < slice.grid.height; ++y)
    for (int x = 0; x < slice.grid.width; ++x) {
      if (!slice.mask[slice.pix(x, y)]) continue;
      a.push_back(slice.data[slice.pix(x, y)]);
      b.push_back(predict_pixel(volume, pose, psf, x, y));
    }
  if (a.size() < 9) return 0.0;
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(b.size());
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 1e-12 || sbb <= 1e-12) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

std::vector<RigidTransform> consensus_bootstrap(const std::vector<SliceStack>& stacks,
                                                const std::vector<RigidTransform>& poses0,
                                                const Eigen::Vector3i& dims,
                                                const Eigen::Vector3d& spacing,
                                                const PsfKernel& psf, const ReconConfig& config) {
  config.validate();
  // With a single stack there is no cross-stack consensus to register against.
  if (stacks.size() < 2) return poses0;

  std::vector<size_t> offset;
  size_t total = 0;
  for (const auto& stack : stacks) {
    offset.push_back(total);
    total += stack.n_slices();
  }
  if (poses0.size() != total) throw OptimError("consensus_bootstrap: pose count mismatch");

  // Joint slice-to-volume registration reaches fixed points where every slice
  // anchors its own plane of the reconstruction and trivially confirms its
  // current pose. Here each stack is instead registered against a normalized
  // splat built from the *other* stacks only, whose in-plane detail
  // constrains this stack's through-plane axis; a slice cannot vote for its
  // own placement. Complement slices are weighted by how well they agreed
  // with their own complement in the previous round, so poorly placed slices
  // blur the target less as the rounds proceed.
  constexpr int kRounds = 12;
  constexpr double kWeightPower = 20.0;
  // Updates are capped relative to the entry poses: the cross-registration
  // is intentionally aggressive, and an unbounded run can collapse onto a
  // drifting self-consistent configuration far from the data.
  constexpr double kTrustRadiusVoxels = 6.0;
  constexpr size_t kMinForeground = 20;
  constexpr size_t kMinScoreForeground = 50;

  const std::vector<RigidTransform> anchor = poses0;
  std::vector<RigidTransform> poses = poses0;
  std::vector<double> ncc(total, 1.0);
  double best_score = -1.0;
  std::vector<RigidTransform> best_poses = poses;

  for (int round = 0; round < kRounds; ++round) {
    std::vector<Volume> complements;
    complements.reserve(stacks.size());
    for (size_t a = 0; a < stacks.size(); ++a) {
      Volume acc(dims, spacing);
      for (size_t b = 0; b < stacks.size(); ++b) {
        if (b == a) continue;
        for (size_t k = 0; k < stacks[b].n_slices(); ++k) {
          const Slice& s = stacks[b].slices[k];
          const double w = std::pow(std::clamp(ncc[offset[b] + k], 0.0, 1.0), kWeightPower);
          if (w <= 1e-6) continue;
          const DisplacementField f = field_from_pose(poses[offset[b] + k], s.grid);
          for (int y = 0; y < s.grid.height; ++y)
            for (int x = 0; x < s.grid.width; ++x) {
              if (!s.mask[s.pix(x, y)]) continue;
              push_one(acc,
                       Eigen::Vector3d(static_cast<double>(x), static_cast<double>(y), 0.0) +
                           f.at(x, y),
                       w * s.data[s.pix(x, y)], w);
            }
        }
      }
      normalize(acc);
      complements.push_back(std::move(acc));
    }

    // Jacobi-style simultaneous update: every stack registers against the
    // complements built from the same previous-round poses.
    std::vector<RigidTransform> next = poses;
    for (size_t a = 0; a < stacks.size(); ++a)
      for (size_t k = 0; k < stacks[a].n_slices(); ++k) {
        const Slice& s = stacks[a].slices[k];
        if (s.n_foreground() < kMinForeground) continue;
        const size_t idx = offset[a] + k;
        RigidTransform p = pattern_pose_search(s, complements[a], poses[idx], psf);
        p = pose_update(s, complements[a], p, psf, config).pose;
        p = pattern_pose_search(s, complements[a], p, psf);
        double max_move = 0.0;
        for (const int cy : {0, s.grid.height - 1})
          for (const int cx : {0, s.grid.width - 1}) {
            const Eigen::Vector3d pt(static_cast<double>(cx), static_cast<double>(cy), 0.0);
            max_move = std::max(max_move, (p.apply(pt) - anchor[idx].apply(pt)).norm());
          }
        if (max_move <= kTrustRadiusVoxels) next[idx] = p;
      }
    poses = std::move(next);

    // Cross-validated agreement of the updated poses with the complements;
    // the best round wins, since the iteration can wander after converging.
    double score = 0.0;
    size_t n_scored = 0;
    for (size_t a = 0; a < stacks.size(); ++a)
      for (size_t k = 0; k < stacks[a].n_slices(); ++k) {
        const size_t idx = offset[a] + k;
        ncc[idx] = slice_prediction_ncc(stacks[a].slices[k], complements[a], poses[idx], psf);
        if (stacks[a].slices[k].n_foreground() >= kMinScoreForeground) {
          score += ncc[idx];
          ++n_scored;
        }
      }
    if (n_scored > 0 && score / static_cast<double>(n_scored) > best_score) {
      best_score = score / static_cast<double>(n_scored);
      best_poses = poses;
    }
  }
  return best_score >= 0.0 ? best_poses : poses;
}

double multilayer_residual_loss(
    const std::vector<std::vector<DisplacementField>>& fields_per_level_one_stack,
    const std::vector<DisplacementField>& gt_fields_full, const PixelGrid& full_grid) {
  const size_t levels = fields_per_level_one_stack.size();
  if (levels == 0) throw OptimError("multilayer_residual_loss: no levels");
  const size_t n_slices = gt_fields_full.size();
  for (const auto& level : fields_per_level_one_stack)
    if (level.size() != n_slices) throw OptimError("multilayer_residual_loss: slice count mismatch");

  double loss = 0.0;
  for (size_t k = 0; k < n_slices; ++k) {
    const DisplacementField& gt = gt_fields_full[k];
    if (gt.width != full_grid.width || gt.height != full_grid.height)
      throw OptimError("multilayer_residual_loss: grid mismatch");
    std::vector<Eigen::Vector3d> mean(gt.data.size(), Eigen::Vector3d::Zero());
    for (size_t s = 0; s < levels; ++s) {
      const double up = static_cast<double>(1 << (levels - 1 - s));
      const DisplacementField lifted = resample_field(
          fields_per_level_one_stack[s][k], full_grid.width, full_grid.height, 1.0 / up, up, 0);
      for (size_t i = 0; i < mean.size(); ++i) mean[i] += lifted.data[i];
    }
    for (size_t i = 0; i < mean.size(); ++i)
      loss += (gt.data[i] - mean[i] / static_cast<double>(levels)).squaredNorm();
  }
  return loss;
}

}  // namespace svr
