#include "svr/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace svr {

namespace {

struct MaskedPair {
  const std::vector<double>* a;
  const std::vector<double>* b;
  std::vector<uint8_t> mask;
  Eigen::Vector3i dims;
};

MaskedPair volume_pair(const Volume& ref, const Volume& other) {
  if (ref.dims != other.dims) throw MetricsError("volume metrics: dims mismatch");
  MaskedPair p{&ref.data, &other.data, {}, ref.dims};
  p.mask.resize(ref.size());
  for (size_t i = 0; i < ref.size(); ++i)
    p.mask[i] = (ref.weight[i] > Volume::kCoverageEps || other.weight[i] > Volume::kCoverageEps)
                    ? 1 : 0;
  return p;
}

MaskedPair slice_pair(const Slice& ref, const Slice& other) {
  if (ref.grid.width != other.grid.width || ref.grid.height != other.grid.height)
    throw MetricsError("slice metrics: grid mismatch");
  MaskedPair p{&ref.data, &other.data, {}, {ref.grid.width, ref.grid.height, 1}};
  p.mask.resize(ref.n_pixels());
  for (size_t i = 0; i < ref.n_pixels(); ++i) p.mask[i] = (ref.mask[i] && other.mask[i]) ? 1 : 0;
  return p;
}

double range_of(const std::vector<double>& v, const std::vector<uint8_t>& mask) {
  double lo = 0.0, hi = 0.0;
  bool first = true;
  for (size_t i = 0; i < v.size(); ++i) {
    if (!mask[i]) continue;
    if (first) { lo = hi = v[i]; first = false; }
    lo = std::min(lo, v[i]);
    hi = std::max(hi, v[i]);
  }
  return hi - lo;
}

double ncc_masked(const MaskedPair& p, bool* degenerate) {
  double ma = 0.0, mb = 0.0;
  size_t n = 0;
  for (size_t i = 0; i < p.a->size(); ++i) {
    if (!p.mask[i]) continue;
    ma += (*p.a)[i];
    mb += (*p.b)[i];
    ++n;
  }
  if (degenerate) *degenerate = false;
  if (n == 0) throw MetricsError("ncc: empty mask");
  ma /= n;
  mb /= n;
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  bool identical = true;
  for (size_t i = 0; i < p.a->size(); ++i) {
    if (!p.mask[i]) continue;
    const double da = (*p.a)[i] - ma, db = (*p.b)[i] - mb;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
    identical = identical && ((*p.a)[i] == (*p.b)[i]);
  }
  if (saa == 0.0 || sbb == 0.0) {
    if (degenerate) *degenerate = true;
    return identical ? 1.0 : 0.0;
  }
  return sab / std::sqrt(saa * sbb);
}

double psnr_masked(const MaskedPair& p, const VolumeMetricOptions& opts) {
  double mse = 0.0;
  size_t n = 0;
  for (size_t i = 0; i < p.a->size(); ++i) {
    if (!p.mask[i]) continue;
    const double d = (*p.a)[i] - (*p.b)[i];
    mse += d * d;
    ++n;
  }
  if (n == 0) throw MetricsError("psnr: empty mask");
  mse /= n;
  const double range = range_of(*p.a, p.mask);
  if (mse == 0.0 || range == 0.0) return opts.psnr_cap_db;
  return std::min(opts.psnr_cap_db, 10.0 * std::log10(range * range / mse));
}

// Mean SSIM with a separable Gaussian window, renormalized over the mask.
// Axes of extent 1 collapse to a single tap, which also covers the 2D case.
double ssim_masked(const MaskedPair& p, const VolumeMetricOptions& opts) {
  const double range = range_of(*p.a, p.mask);
  const double c1 = (opts.k1 * range) * (opts.k1 * range);
  const double c2 = (opts.k2 * range) * (opts.k2 * range);
  const int r = opts.ssim_window / 2;

  std::vector<double> g(2 * r + 1);
  for (int i = -r; i <= r; ++i)
    g[i + r] = std::exp(-0.5 * i * i / (opts.ssim_sigma * opts.ssim_sigma));

  const auto& dims = p.dims;
  auto idx = [&](int x, int y, int z) {
    return static_cast<size_t>(z) * dims.y() * dims.x() + static_cast<size_t>(y) * dims.x() + x;
  };

  double total = 0.0;
  size_t count = 0;
  for (int z = 0; z < dims.z(); ++z)
    for (int y = 0; y < dims.y(); ++y)
      for (int x = 0; x < dims.x(); ++x) {
        if (!p.mask[idx(x, y, z)]) continue;
        double w_sum = 0.0, mu_a = 0.0, mu_b = 0.0, aa = 0.0, bb = 0.0, ab = 0.0;
        const int rz = dims.z() > 1 ? r : 0;
        const int ry = dims.y() > 1 ? r : 0;
        const int rx = dims.x() > 1 ? r : 0;
        for (int dz = -rz; dz <= rz; ++dz) {
          const int zz = z + dz;
          if (zz < 0 || zz >= dims.z()) continue;
          for (int dy = -ry; dy <= ry; ++dy) {
            const int yy = y + dy;
            if (yy < 0 || yy >= dims.y()) continue;
            for (int dx = -rx; dx <= rx; ++dx) {
              const int xx = x + dx;
              if (xx < 0 || xx >= dims.x()) continue;
              const size_t i = idx(xx, yy, zz);
              if (!p.mask[i]) continue;
              const double w = g[dx + r] * g[dy + r] * g[dz + r];
              const double va = (*p.a)[i], vb = (*p.b)[i];
              w_sum += w;
              mu_a += w * va;
              mu_b += w * vb;
              aa += w * va * va;
              bb += w * vb * vb;
              ab += w * va * vb;
            }
          }
        }
        if (w_sum <= 0.0) continue;
        mu_a /= w_sum;
        mu_b /= w_sum;
        const double var_a = aa / w_sum - mu_a * mu_a;
        const double var_b = bb / w_sum - mu_b * mu_b;
        const double cov = ab / w_sum - mu_a * mu_b;
        const double num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
        const double den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
        total += den > 0.0 ? num / den : 1.0;
        ++count;
      }
  if (count == 0) throw MetricsError("ssim: empty mask");
  return total / count;
}

}  // namespace

double tre(const DisplacementField& est, const DisplacementField& gt, double spacing_mm,
           const std::vector<uint8_t>* mask) {
  if (est.width != gt.width || est.height != gt.height)
    throw MetricsError("tre: field grid mismatch");
  double max_sq = 0.0;
  for (size_t i = 0; i < est.data.size(); ++i) {
    if (mask && !(*mask)[i]) continue;
    max_sq = std::max(max_sq, (est.data[i] - gt.data[i]).squaredNorm());
  }
  return std::sqrt(max_sq) * spacing_mm;
}

std::vector<double> median_max_tre(const std::vector<std::vector<DisplacementField>>& est,
                                   const std::vector<std::vector<DisplacementField>>& gt,
                                   double spacing_mm, double* summary) {
  if (est.size() != gt.size()) throw MetricsError("median_max_tre: stack count mismatch");
  std::vector<double> per_stack;
  for (size_t s = 0; s < est.size(); ++s) {
    if (est[s].empty() || est[s].size() != gt[s].size())
      throw MetricsError("median_max_tre: empty or mismatched stack");
    std::vector<double> per_slice;
    for (size_t k = 0; k < est[s].size(); ++k)
      per_slice.push_back(tre(est[s][k], gt[s][k], spacing_mm));
    std::sort(per_slice.begin(), per_slice.end());
    const size_t n = per_slice.size();
    const double median = (n % 2 == 1) ? per_slice[n / 2]
                                       : 0.5 * (per_slice[n / 2 - 1] + per_slice[n / 2]);
    per_stack.push_back(median);
  }
  if (summary) {
    double acc = 0.0;
    for (double v : per_stack) acc += v;
    *summary = per_stack.empty() ? 0.0 : acc / per_stack.size();
  }
  return per_stack;
}

double ssim(const Volume& ref, const Volume& other, const VolumeMetricOptions& opts) {
  return ssim_masked(volume_pair(ref, other), opts);
}

double psnr(const Volume& ref, const Volume& other, const VolumeMetricOptions& opts) {
  return psnr_masked(volume_pair(ref, other), opts);
}

double ncc(const Volume& ref, const Volume& other, bool* degenerate) {
  return ncc_masked(volume_pair(ref, other), degenerate);
}

double ssim2d(const Slice& ref, const Slice& other, const VolumeMetricOptions& opts) {
  return ssim_masked(slice_pair(ref, other), opts);
}

double psnr2d(const Slice& ref, const Slice& other, const VolumeMetricOptions& opts) {
  return psnr_masked(slice_pair(ref, other), opts);
}

double ncc2d(const Slice& ref, const Slice& other, bool* degenerate) {
  return ncc_masked(slice_pair(ref, other), degenerate);
}

MetricReport slice_consistency(const SliceConsistencyInput& in) {
  if (!in.stacks || !in.volume || !in.poses || !in.psf)
    throw MetricsError("slice_consistency: missing input");
  MetricReport report;
  double ssim_acc = 0.0, ncc_acc = 0.0, psnr_acc = 0.0;
  size_t n = 0, pose_idx = 0;
  for (const auto& stack : *in.stacks) {
    for (const auto& slice : stack.slices) {
      const RigidTransform& pose = (*in.poses)[pose_idx++];
      const Slice sim = simulate_slice_psf(*in.volume, pose, slice.grid, *in.psf);
      bool empty = true;
      for (size_t i = 0; i < slice.n_pixels(); ++i)
        if (slice.mask[i] && sim.mask[i]) { empty = false; break; }
      if (empty) {
        report.per_slice_consistency.push_back(0.0);
        continue;
      }
      const double s = ssim2d(slice, sim);
      const double c = ncc2d(slice, sim);
      const double p = psnr2d(slice, sim);
      report.per_slice_consistency.push_back(c);
      ssim_acc += s;
      ncc_acc += c;
      psnr_acc += p;
      ++n;
    }
  }
  if (n > 0) {
    report.ssim = ssim_acc / n;
    report.ncc = ncc_acc / n;
    report.psnr_db = psnr_acc / n;
  }
  return report;
}

}  // namespace svr
