#include "svr/init_recon.hpp"

namespace svr {

Volume init_volume(const std::vector<SliceStack>& stacks,
                   const std::vector<DisplacementField>& fields, const Eigen::Vector3i& dims,
                   const Eigen::Vector3d& spacing, const PushOptions& opts) {
  size_t n_slices = 0;
  for (const auto& st : stacks) n_slices += st.n_slices();
  if (fields.size() != n_slices)
    throw InitReconError("init_volume: one field per slice required");

  Volume acc(dims, spacing);
  size_t field_idx = 0;
  size_t n_foreground = 0;
  for (const auto& st : stacks) {
    for (const auto& slice : st.slices) {
      const DisplacementField& f = fields[field_idx++];
      if (f.width != slice.grid.width || f.height != slice.grid.height)
        throw InitReconError("init_volume: field/slice grid mismatch");
      for (int y = 0; y < slice.grid.height; ++y) {
        for (int x = 0; x < slice.grid.width; ++x) {
          const size_t i = slice.pix(x, y);
          if (!slice.mask[i]) continue;
          ++n_foreground;
          const double wv =
              opts.indicator_weights ? (slice.data[i] > 0.0 ? 1.0 : 0.0) : 1.0;
          const Eigen::Vector3d p(static_cast<double>(x), static_cast<double>(y), 0.0);
          push_one(acc, p + f.at(x, y), slice.data[i], wv);
        }
      }
    }
  }
  if (n_foreground == 0) throw InitReconError("init_volume: no foreground pixels");
  normalize(acc);
  return acc;
}

}  // namespace svr
