#pragma once

#include "svr/forward_model.hpp"

namespace svr {

struct InitReconError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Normalized-splat initialization: every foreground pixel of every slice is
/// pushed to p^ + f(p), then the accumulator is normalized. `fields` holds
/// one field per slice, flattened in stack order.
Volume init_volume(const std::vector<SliceStack>& stacks,
                   const std::vector<DisplacementField>& fields, const Eigen::Vector3i& dims,
                   const Eigen::Vector3d& spacing, const PushOptions& opts = {});

}  // namespace svr
