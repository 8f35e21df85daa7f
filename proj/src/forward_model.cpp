#include "svr/forward_model.hpp"

#include <cmath>

namespace svr {

size_t Slice::n_foreground() const {
  size_t n = 0;
  for (auto m : mask) n += m ? 1 : 0;
  return n;
}

std::string to_string(Orientation o) {
  switch (o) {
    case Orientation::sagittal: return "sagittal";
    case Orientation::axial: return "axial";
    case Orientation::coronal: return "coronal";
  }
  return "axial";
}

Orientation orientation_from_string(const std::string& s) {
  if (s == "sagittal") return Orientation::sagittal;
  if (s == "axial") return Orientation::axial;
  if (s == "coronal") return Orientation::coronal;
  throw ForwardModelError("unknown orientation label: " + s);
}

Slice simulate_slice_psf(const Volume& volume, const RigidTransform& pose, const PixelGrid& grid,
                         const PsfKernel& psf, bool* empty_overlap) {
  Slice out(grid);
  size_t covered = 0;
  for (int y = 0; y < grid.height; ++y) {
    for (int x = 0; x < grid.width; ++x) {
      double value = 0.0;
      double in_weight = 0.0;
      const Eigen::Vector3d p(static_cast<double>(x), static_cast<double>(y), 0.0);
      for (size_t t = 0; t < psf.size(); ++t) {
        bool oob = false;
        const double v = pull_one(volume, pose.apply(p + psf.offsets[t]), &oob);
        value += psf.weights[t] * v;
        if (!oob) in_weight += psf.weights[t];
      }
      const size_t i = out.pix(x, y);
      if (in_weight >= 0.5) {
        out.data[i] = value;
        out.mask[i] = 1;
        ++covered;
      }
    }
  }
  if (empty_overlap) *empty_overlap = (covered == 0);
  return out;
}

Slice simulate_slice_field(const Volume& volume, const DisplacementField& field,
                           const PixelGrid& grid, const Eigen::Vector3d& probe_offset) {
  if (field.width != grid.width || field.height != grid.height)
    throw ForwardModelError("simulate_slice_field: field/grid size mismatch");
  if (!field.finite()) throw ForwardModelError("simulate_slice_field: non-finite field");
  Slice out(grid);
  for (int y = 0; y < grid.height; ++y) {
    for (int x = 0; x < grid.width; ++x) {
      const Eigen::Vector3d p(static_cast<double>(x), static_cast<double>(y), 0.0);
      bool oob = false;
      const double v = pull_one(volume, p + field.at(x, y) + probe_offset, &oob);
      const size_t i = out.pix(x, y);
      if (!oob) {
        out.data[i] = v;
        out.mask[i] = 1;
      }
    }
  }
  return out;
}

Eigen::MatrixXd assemble_dense_system(const Eigen::Vector3i& volume_dims,
                                      const std::vector<RigidTransform>& poses,
                                      const std::vector<PixelGrid>& grids, const PsfKernel& psf) {
  const int64_t n_vox = static_cast<int64_t>(volume_dims.x()) * volume_dims.y() * volume_dims.z();
  if (n_vox > 4096) throw ForwardModelError("assemble_dense_system: volume exceeds 4096 voxels");
  if (poses.size() != grids.size())
    throw ForwardModelError("assemble_dense_system: poses/grids length mismatch");

  // Bounds bookkeeping mirrors pull_one.
  Volume shape(volume_dims, Eigen::Vector3d::Ones());
  int64_t n_rows = 0;
  for (const auto& g : grids) n_rows += static_cast<int64_t>(g.width) * g.height;

  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n_rows, n_vox);
  int64_t row = 0;
  for (size_t s = 0; s < poses.size(); ++s) {
    const PixelGrid& grid = grids[s];
    for (int y = 0; y < grid.height; ++y) {
      for (int x = 0; x < grid.width; ++x, ++row) {
        const Eigen::Vector3d p(static_cast<double>(x), static_cast<double>(y), 0.0);
        double in_weight = 0.0;
        for (size_t t = 0; t < psf.size(); ++t) {
          const Eigen::Vector3d c = poses[s].apply(p + psf.offsets[t]);
          const int x0 = static_cast<int>(std::floor(c.x()));
          const int y0 = static_cast<int>(std::floor(c.y()));
          const int z0 = static_cast<int>(std::floor(c.z()));
          const double fx = c.x() - x0, fy = c.y() - y0, fz = c.z() - z0;
          const double wx[2] = {1.0 - fx, fx};
          const double wy[2] = {1.0 - fy, fy};
          const double wz[2] = {1.0 - fz, fz};
          bool oob = false;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const double w = wx[dx] * wy[dy] * wz[dz];
                if (w == 0.0) continue;
                if (!shape.in_bounds(x0 + dx, y0 + dy, z0 + dz)) {
                  oob = true;
                  continue;
                }
                a(row, static_cast<int64_t>(shape.index(x0 + dx, y0 + dy, z0 + dz))) +=
                    psf.weights[t] * w;
              }
          if (!oob) in_weight += psf.weights[t];
        }
        if (in_weight < 0.5) a.row(row).setZero();
      }
    }
  }
  return a;
}

Eigen::VectorXd stack_slices_vector(const std::vector<Slice>& slices) {
  int64_t n = 0;
  for (const auto& s : slices) n += static_cast<int64_t>(s.n_pixels());
  Eigen::VectorXd v(n);
  int64_t i = 0;
  for (const auto& s : slices)
    for (double d : s.data) v(i++) = d;
  return v;
}

}  // namespace svr
