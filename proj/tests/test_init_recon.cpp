#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "svr/init_recon.hpp"
#include "svr/io.hpp"
#include "svr/motion_sim.hpp"
#include "svr/rng.hpp"

using namespace svr;

namespace {

SliceStack single_slice_stack(const Slice& s) {
  SliceStack stack;
  stack.slices.push_back(s);
  return stack;
}

}  // namespace

TEST_CASE("init_volume: one slice with a zero field fills the z=0 plane") {
  const PixelGrid grid{4, 4, 1.0};
  Slice s(grid);
  CounterRng rng(1);
  for (size_t i = 0; i < s.n_pixels(); ++i) {
    s.data[i] = rng.uniform(0.1, 1.0);
    s.mask[i] = 1;
  }
  const Volume v = init_volume({single_slice_stack(s)}, {DisplacementField(4, 4, 0)},
                               Eigen::Vector3i(4, 4, 4), Eigen::Vector3d::Ones());
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      CHECK(v.covered(x, y, 0));
      CHECK(v.at(x, y, 0) == doctest::Approx(s.data[s.pix(x, y)]).epsilon(1e-12));
    }
  for (int z = 1; z < 4; ++z)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) CHECK(!v.covered(x, y, z));
}

TEST_CASE("init_volume: coincident slices average") {
  const PixelGrid grid{3, 3, 1.0};
  Slice a(grid), b(grid);
  for (size_t i = 0; i < a.n_pixels(); ++i) {
    a.data[i] = 2.0;
    a.mask[i] = 1;
    b.data[i] = 4.0;
    b.mask[i] = 1;
  }
  SliceStack stack;
  stack.slices = {a, b};
  const Volume v = init_volume({stack}, {DisplacementField(3, 3, 0), DisplacementField(3, 3, 0)},
                               Eigen::Vector3i(3, 3, 3), Eigen::Vector3d::Ones());
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) CHECK(v.at(x, y, 0) == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("init_volume: lossless three-stack round trip of a 16^3 phantom") {
  const Volume phantom = make_phantom(PhantomKind::ellipsoids, Eigen::Vector3i::Constant(16), 3);
  const auto stacks = extract_stacks(
      phantom, {Orientation::sagittal, Orientation::coronal, Orientation::axial}, 1.0, 1.0,
      make_thin_psf());

  std::vector<DisplacementField> fields;
  for (const auto& stack : stacks)
    for (size_t k = 0; k < stack.n_slices(); ++k)
      fields.push_back(field_from_pose(
          prescribed_pose(stack.orientation_label, static_cast<int>(k), 1.0),
          stack.slices[k].grid));

  const Volume rec = init_volume(stacks, fields, phantom.dims, phantom.spacing);
  for (int z = 0; z < 16; ++z)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        if (!rec.covered(x, y, z)) continue;
        CHECK(std::abs(rec.at(x, y, z) - phantom.at(x, y, z)) <= 1e-6);
      }
}

TEST_CASE("init_volume: intensities stay within the input range") {
  CounterRng rng(4);
  const PixelGrid grid{6, 6, 1.0};
  Slice s(grid);
  double lo = 1e30, hi = -1e30;
  for (size_t i = 0; i < s.n_pixels(); ++i) {
    s.data[i] = rng.uniform(0.2, 0.9);
    s.mask[i] = 1;
    lo = std::min(lo, s.data[i]);
    hi = std::max(hi, s.data[i]);
  }
  // An off-grid rigid field exercises fractional splatting.
  const RigidTransform pose = RigidTransform::from_rotation_vector_deg({3.0, 2.0, 10.0},
                                                                       {1.3, 0.7, 2.2});
  const Volume v = init_volume({single_slice_stack(s)}, {field_from_pose(pose, grid)},
                               Eigen::Vector3i(10, 10, 10), Eigen::Vector3d::Ones());
  for (size_t i = 0; i < v.size(); ++i) {
    if (v.weight[i] <= Volume::kCoverageEps) continue;
    CHECK(v.data[i] >= lo - 1e-9);
    CHECK(v.data[i] <= hi + 1e-9);
  }
}

TEST_CASE("init_volume: adding a stack never shrinks coverage") {
  const Volume phantom = make_phantom(PhantomKind::shell, Eigen::Vector3i::Constant(12), 5);
  const auto stacks =
      extract_stacks(phantom, {Orientation::axial, Orientation::coronal}, 1.0, 1.0,
                     make_thin_psf());

  auto fields_for = [&](const std::vector<SliceStack>& use) {
    std::vector<DisplacementField> fields;
    for (const auto& stack : use)
      for (size_t k = 0; k < stack.n_slices(); ++k)
        fields.push_back(field_from_pose(
            prescribed_pose(stack.orientation_label, static_cast<int>(k), 1.0),
            stack.slices[k].grid));
    return fields;
  };

  const std::vector<SliceStack> one{stacks[0]};
  const Volume va = init_volume(one, fields_for(one), phantom.dims, phantom.spacing);
  const Volume vb = init_volume(stacks, fields_for(stacks), phantom.dims, phantom.spacing);
  for (size_t i = 0; i < va.size(); ++i)
    if (va.weight[i] > Volume::kCoverageEps) CHECK(vb.weight[i] > Volume::kCoverageEps);
}

TEST_CASE("init_volume: all-background input is an error") {
  const PixelGrid grid{3, 3, 1.0};
  Slice s(grid);  // mask all zero
  CHECK_THROWS_AS(init_volume({single_slice_stack(s)}, {DisplacementField(3, 3, 0)},
                              Eigen::Vector3i(3, 3, 3), Eigen::Vector3d::Ones()),
                  InitReconError);
}

TEST_CASE("init_volume: masked-out pixels never splat") {
  const PixelGrid grid{3, 3, 1.0};
  Slice s(grid);
  s.data[s.pix(1, 1)] = 5.0;
  s.mask[s.pix(1, 1)] = 1;
  // A second bright pixel stays background and must not leak.
  s.data[s.pix(0, 0)] = 99.0;
  const Volume v = init_volume({single_slice_stack(s)}, {DisplacementField(3, 3, 0)},
                               Eigen::Vector3i(3, 3, 3), Eigen::Vector3d::Ones());
  CHECK(v.at(1, 1, 0) == 5.0);
  CHECK(!v.covered(0, 0, 0));
  CHECK(v.at(0, 0, 0) == 0.0);
}
