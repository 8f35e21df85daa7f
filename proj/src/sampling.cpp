#include "svr/sampling.hpp"

#include <cmath>

namespace svr {

namespace {

struct Corner {
  int x, y, z;
  double w;
};

// Trilinear corner weights for a point in voxel units. Count may be < 8 when
// some corners fall outside; fully dropped points yield count 0.
int corners_of(const Volume& v, const Eigen::Vector3d& c, Corner out[8], bool* any_oob) {
  const int x0 = static_cast<int>(std::floor(c.x()));
  const int y0 = static_cast<int>(std::floor(c.y()));
  const int z0 = static_cast<int>(std::floor(c.z()));
  const double fx = c.x() - x0, fy = c.y() - y0, fz = c.z() - z0;
  const double wx[2] = {1.0 - fx, fx};
  const double wy[2] = {1.0 - fy, fy};
  const double wz[2] = {1.0 - fz, fz};
  int n = 0;
  bool oob = false;
  for (int dz = 0; dz < 2; ++dz) {
    for (int dy = 0; dy < 2; ++dy) {
      for (int dx = 0; dx < 2; ++dx) {
        const double w = wx[dx] * wy[dy] * wz[dz];
        if (w == 0.0) continue;
        const int x = x0 + dx, y = y0 + dy, z = z0 + dz;
        if (!v.in_bounds(x, y, z)) {
          oob = true;
          continue;
        }
        out[n++] = {x, y, z, w};
      }
    }
  }
  if (any_oob) *any_oob = oob;
  return n;
}

}  // namespace

bool push_one(Volume& target, const Eigen::Vector3d& coord, double value, double weight_value) {
  Corner corners[8];
  const int n = corners_of(target, coord, corners, nullptr);
  for (int i = 0; i < n; ++i) {
    const size_t idx = target.index(corners[i].x, corners[i].y, corners[i].z);
    target.data[idx] += corners[i].w * value;
    target.weight[idx] += corners[i].w * weight_value;
  }
  return n > 0;
}

PushStats push(Volume& target, const std::vector<Eigen::Vector3d>& coords,
               const std::vector<double>& values, const PushOptions& opts) {
  if (coords.size() != values.size())
    throw SamplingError("push: coords/values length mismatch");
  PushStats stats;
  for (size_t i = 0; i < coords.size(); ++i) {
    if (!coords[i].allFinite()) throw SamplingError("push: non-finite coordinate");
    const double wv = opts.indicator_weights ? (values[i] > 0.0 ? 1.0 : 0.0) : 1.0;
    if (!push_one(target, coords[i], values[i], wv)) ++stats.dropped;
  }
  return stats;
}

double pull_one(const Volume& source, const Eigen::Vector3d& coord, bool* oob) {
  Corner corners[8];
  bool any_oob = false;
  const int n = corners_of(source, coord, corners, &any_oob);
  if (oob) *oob = any_oob;
  double v = 0.0;
  for (int i = 0; i < n; ++i)
    v += corners[i].w * source.data[source.index(corners[i].x, corners[i].y, corners[i].z)];
  return v;
}

PullResult pull(const Volume& source, const std::vector<Eigen::Vector3d>& coords) {
  PullResult out;
  out.values.resize(coords.size());
  out.out_of_bounds.resize(coords.size());
  for (size_t i = 0; i < coords.size(); ++i) {
    if (!coords[i].allFinite()) throw SamplingError("pull: non-finite coordinate");
    bool oob = false;
    out.values[i] = pull_one(source, coords[i], &oob);
    out.out_of_bounds[i] = oob ? 1 : 0;
  }
  return out;
}

void normalize(Volume& accumulator) {
  if (accumulator.data.size() != accumulator.weight.size())
    throw SamplingError("normalize: data/weight size mismatch");
  for (size_t i = 0; i < accumulator.data.size(); ++i) {
    if (accumulator.weight[i] > Volume::kCoverageEps) {
      accumulator.data[i] /= accumulator.weight[i];
    } else {
      accumulator.data[i] = 0.0;
      accumulator.weight[i] = 0.0;
    }
  }
}

PsfKernel make_thin_psf() {
  PsfKernel k;
  k.kind = PsfKind::thin;
  k.offsets.push_back(Eigen::Vector3d::Zero());
  k.weights.push_back(1.0);
  return k;
}

PsfKernel make_gaussian_psf(double slice_thickness_mm, double in_plane_spacing_mm,
                            double voxel_spacing_mm) {
  if (slice_thickness_mm <= 0.0 || in_plane_spacing_mm <= 0.0 || voxel_spacing_mm <= 0.0)
    throw SamplingError("make_gaussian_psf: non-positive spacing");
  constexpr double kFwhmToSigma = 1.0 / 2.3548200450309493;  // 1 / (2 sqrt(2 ln 2))
  constexpr double kTruncSigmas = 2.5;
  const double sigma_ip = in_plane_spacing_mm * kFwhmToSigma / voxel_spacing_mm;
  const double sigma_tp = slice_thickness_mm * kFwhmToSigma / voxel_spacing_mm;
  const int r_ip = std::max(0, static_cast<int>(std::floor(kTruncSigmas * sigma_ip)));
  const int r_tp = std::max(0, static_cast<int>(std::floor(kTruncSigmas * sigma_tp)));

  auto profile = [](int radius, double sigma) {
    std::vector<double> taps(2 * radius + 1);
    for (int i = -radius; i <= radius; ++i)
      taps[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    return taps;
  };
  const auto px = profile(r_ip, sigma_ip);
  const auto py = px;
  const auto pz = profile(r_tp, sigma_tp);

  PsfKernel k;
  k.kind = PsfKind::gaussian;
  double total = 0.0;
  for (int z = -r_tp; z <= r_tp; ++z)
    for (int y = -r_ip; y <= r_ip; ++y)
      for (int x = -r_ip; x <= r_ip; ++x) {
        const double w = px[x + r_ip] * py[y + r_ip] * pz[z + r_tp];
        k.offsets.emplace_back(x, y, z);
        k.weights.push_back(w);
        total += w;
      }
  for (auto& w : k.weights) w /= total;
  return k;
}

PsfKernel make_boxcar_psf(double slice_thickness_mm, double voxel_spacing_mm) {
  if (slice_thickness_mm <= 0.0 || voxel_spacing_mm <= 0.0)
    throw SamplingError("make_boxcar_psf: non-positive spacing");
  const double half = 0.5 * slice_thickness_mm / voxel_spacing_mm;  // voxel units
  const int radius = static_cast<int>(std::ceil(half - 0.5));

  PsfKernel k;
  k.kind = PsfKind::boxcar;
  double total = 0.0;
  for (int z = -radius; z <= radius; ++z) {
    // Overlap of the voxel cell [z-0.5, z+0.5] with the slab [-half, half].
    const double overlap =
        std::max(0.0, std::min(z + 0.5, half) - std::max(z - 0.5, -half));
    if (overlap <= 0.0) continue;
    k.offsets.emplace_back(0.0, 0.0, static_cast<double>(z));
    k.weights.push_back(overlap);
    total += overlap;
  }
  for (auto& w : k.weights) w /= total;
  return k;
}

}  // namespace svr
