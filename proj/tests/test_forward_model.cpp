#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "svr/forward_model.hpp"
#include "svr/rng.hpp"

using namespace svr;

namespace {

Volume random_volume(const Eigen::Vector3i& dims, uint64_t seed) {
  Volume v(dims, Eigen::Vector3d::Ones());
  CounterRng rng(seed);
  for (auto& d : v.data) d = rng.uniform(0.0, 1.0);
  std::fill(v.weight.begin(), v.weight.end(), 1.0);
  return v;
}

}  // namespace

TEST_CASE("simulate_slice_psf: thin PSF at identity pose extracts the z=0 plane") {
  const Volume vol = random_volume({5, 4, 3}, 1);
  const Slice s = simulate_slice_psf(vol, RigidTransform::identity(), PixelGrid{5, 4, 1.0},
                                     make_thin_psf());
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 5; ++x) {
      CHECK(s.mask[s.pix(x, y)] == 1);
      CHECK(s.data[s.pix(x, y)] == vol.at(x, y, 0));
    }
}

TEST_CASE("simulate_slice_psf: constant volume gives a constant slice") {
  Volume vol(Eigen::Vector3i(8, 8, 8), Eigen::Vector3d::Ones());
  std::fill(vol.data.begin(), vol.data.end(), 0.7);
  const RigidTransform pose = RigidTransform::from_rotation_vector_deg(
      {0.0, 0.0, 30.0}, {3.5, 1.0, 3.0});
  const Slice s =
      simulate_slice_psf(vol, pose, PixelGrid{3, 3, 1.0}, make_boxcar_psf(3.0, 1.0));
  for (size_t i = 0; i < s.n_pixels(); ++i)
    if (s.mask[i]) CHECK(s.data[i] == doctest::Approx(0.7).epsilon(1e-9));
}

TEST_CASE("simulate_slice_psf: boxcar through a single bright voxel, dense oracle") {
  Volume vol(Eigen::Vector3i(4, 4, 4), Eigen::Vector3d::Ones());
  vol.at(2, 2, 2) = 3.0;
  std::fill(vol.weight.begin(), vol.weight.end(), 1.0);

  const PsfKernel boxcar = make_boxcar_psf(3.0, 1.0);
  const RigidTransform pose = RigidTransform::translate({0.0, 0.0, 2.0});
  const PixelGrid grid{4, 4, 1.0};
  const Slice s = simulate_slice_psf(vol, pose, grid, boxcar);
  // The center tap hits the bright voxel; each tap carries weight 1/3.
  CHECK(s.data[s.pix(2, 2)] == doctest::Approx(3.0 / 3.0).epsilon(1e-9));

  const Eigen::MatrixXd a = assemble_dense_system(vol.dims, {pose}, {grid}, boxcar);
  Eigen::VectorXd v(vol.size());
  for (size_t i = 0; i < vol.size(); ++i) v(static_cast<long>(i)) = vol.data[i];
  const Eigen::VectorXd pred = a * v;
  const Eigen::VectorXd sim = stack_slices_vector({s});
  CHECK((pred - sim).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("simulate_slice_field: zero field extracts the z=0 plane") {
  const Volume vol = random_volume({6, 6, 3}, 2);
  const Slice s = simulate_slice_field(vol, DisplacementField(6, 6, 0), PixelGrid{6, 6, 1.0});
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) CHECK(s.data[s.pix(x, y)] == vol.at(x, y, 0));
}

TEST_CASE("simulate_slice_field: constant unit-z field extracts the z=1 plane") {
  const Volume vol = random_volume({6, 6, 3}, 3);
  DisplacementField f(6, 6, 0);
  for (auto& v : f.data) v = {0.0, 0.0, 1.0};
  const Slice s = simulate_slice_field(vol, f, PixelGrid{6, 6, 1.0});
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) CHECK(s.data[s.pix(x, y)] == vol.at(x, y, 1));
}

TEST_CASE("simulate_slice_field: 90-degree in-plane rotation matches a 2D rotation oracle") {
  const Volume vol = random_volume({7, 7, 3}, 4);
  const PixelGrid grid{7, 7, 1.0};
  LevelParams params;
  params.center = uplift(grid.center());
  const RigidTransform rz = RigidTransform::from_rotation_vector_deg({0.0, 0.0, 90.0});
  const DisplacementField f =
      prescribed_pose_field(RigidTransform::identity(), rz, grid, 0, params);
  const Slice s = simulate_slice_field(vol, f, grid);

  // Oracle: rotate pixel indices by 90 degrees about the integer center and
  // read the z=0 plane directly (integer-exact for a 7x7 grid).
  const int c = 3;
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 7; ++x) {
      const int rx = c - (y - c);
      const int ry = c + (x - c);
      CHECK(s.mask[s.pix(x, y)] == 1);
      CHECK(s.data[s.pix(x, y)] == doctest::Approx(vol.at(rx, ry, 0)).epsilon(1e-9));
    }
}

TEST_CASE("assemble_dense_system: identity pose with thin PSF is a selection matrix") {
  const Eigen::Vector3i dims(2, 2, 2);
  const Eigen::MatrixXd a =
      assemble_dense_system(dims, {RigidTransform::identity()}, {PixelGrid{2, 2, 1.0}},
                            make_thin_psf());
  REQUIRE(a.rows() == 4);
  REQUIRE(a.cols() == 8);
  for (int row = 0; row < 4; ++row)
    for (int col = 0; col < 8; ++col)
      CHECK(a(row, col) == ((col == row) ? 1.0 : 0.0));  // z=0 plane is the first 4 voxels
}

TEST_CASE("assemble_dense_system: row sums bounded by one") {
  const Eigen::Vector3i dims(4, 4, 4);
  CounterRng rng(5);
  std::vector<RigidTransform> poses;
  std::vector<PixelGrid> grids;
  for (int k = 0; k < 6; ++k) {
    Eigen::Vector3d rv, t;
    for (int a = 0; a < 3; ++a) {
      rv[a] = rng.uniform(-20.0, 20.0);
      t[a] = rng.uniform(0.0, 3.0);
    }
    poses.push_back(RigidTransform::from_rotation_vector_deg(rv, t));
    grids.push_back(PixelGrid{4, 4, 1.0});
  }
  const Eigen::MatrixXd a = assemble_dense_system(dims, poses, grids, make_boxcar_psf(2.0, 1.0));
  for (int row = 0; row < a.rows(); ++row) {
    const double sum = a.row(row).sum();
    CHECK(sum <= 1.0 + 1e-9);
  }
}

TEST_CASE("assemble_dense_system agrees with simulate_slice_psf on random volumes") {
  const Eigen::Vector3i dims(4, 4, 4);
  CounterRng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    const Volume vol = random_volume(dims, 100 + trial);
    std::vector<RigidTransform> poses;
    std::vector<PixelGrid> grids;
    std::vector<Slice> slices;
    for (int k = 0; k < 4; ++k) {
      Eigen::Vector3d rv, t;
      for (int a = 0; a < 3; ++a) {
        rv[a] = rng.uniform(-15.0, 15.0);
        t[a] = rng.uniform(0.5, 2.5);
      }
      poses.push_back(RigidTransform::from_rotation_vector_deg(rv, t));
      grids.push_back(PixelGrid{4, 4, 1.0});
      slices.push_back(simulate_slice_psf(vol, poses.back(), grids.back(), make_thin_psf()));
    }
    const Eigen::MatrixXd a = assemble_dense_system(dims, poses, grids, make_thin_psf());
    Eigen::VectorXd v(vol.size());
    for (size_t i = 0; i < vol.size(); ++i) v(static_cast<long>(i)) = vol.data[i];
    CHECK((a * v - stack_slices_vector(slices)).cwiseAbs().maxCoeff() <= 1e-6);
  }
}

TEST_CASE("assemble_dense_system enforces the voxel-count guard") {
  CHECK_THROWS_AS(assemble_dense_system(Eigen::Vector3i(17, 17, 17), {}, {}, make_thin_psf()),
                  ForwardModelError);
}

TEST_CASE("field and psf forward models agree for rigid poses with thin PSF") {
  const Volume vol = random_volume({8, 8, 8}, 7);
  const PixelGrid grid{8, 8, 1.0};
  CounterRng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::Vector3d rv, t;
    for (int a = 0; a < 3; ++a) {
      rv[a] = rng.uniform(-25.0, 25.0);
      t[a] = rng.uniform(0.0, 4.0);
    }
    const RigidTransform pose = RigidTransform::from_rotation_vector_deg(rv, t);
    const Slice via_psf = simulate_slice_psf(vol, pose, grid, make_thin_psf());
    const Slice via_field = simulate_slice_field(vol, field_from_pose(pose, grid), grid);
    for (size_t i = 0; i < via_psf.n_pixels(); ++i) {
      if (!via_psf.mask[i] || !via_field.mask[i]) continue;
      CHECK(std::abs(via_psf.data[i] - via_field.data[i]) <= 1e-6);
    }
  }
}

TEST_CASE("simulation is linear in the volume") {
  const Volume v1 = random_volume({6, 6, 6}, 9);
  const Volume v2 = random_volume({6, 6, 6}, 10);
  Volume mix(v1.dims, v1.spacing);
  const double alpha = 0.3, beta = 1.7;
  for (size_t i = 0; i < mix.size(); ++i) mix.data[i] = alpha * v1.data[i] + beta * v2.data[i];
  std::fill(mix.weight.begin(), mix.weight.end(), 1.0);

  const RigidTransform pose =
      RigidTransform::from_rotation_vector_deg({5.0, -3.0, 12.0}, {1.0, 2.0, 2.5});
  const PixelGrid grid{6, 6, 1.0};
  const PsfKernel psf = make_boxcar_psf(2.0, 1.0);
  const Slice s1 = simulate_slice_psf(v1, pose, grid, psf);
  const Slice s2 = simulate_slice_psf(v2, pose, grid, psf);
  const Slice sm = simulate_slice_psf(mix, pose, grid, psf);
  for (size_t i = 0; i < sm.n_pixels(); ++i)
    if (sm.mask[i]) CHECK(std::abs(sm.data[i] - (alpha * s1.data[i] + beta * s2.data[i])) <= 1e-6);
}

TEST_CASE("simulated slices from a nonnegative volume are nonnegative") {
  const Volume vol = random_volume({6, 6, 6}, 11);
  CounterRng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::Vector3d rv, t;
    for (int a = 0; a < 3; ++a) {
      rv[a] = rng.uniform(-40.0, 40.0);
      t[a] = rng.uniform(-2.0, 6.0);
    }
    const Slice s = simulate_slice_psf(vol, RigidTransform::from_rotation_vector_deg(rv, t),
                                       PixelGrid{6, 6, 1.0}, make_boxcar_psf(3.0, 1.0));
    for (double d : s.data) CHECK(d >= 0.0);
  }
}

TEST_CASE("empty overlap is reported as an all-masked slice") {
  const Volume vol = random_volume({4, 4, 4}, 13);
  bool empty = false;
  const Slice s = simulate_slice_psf(vol, RigidTransform::translate({100.0, 100.0, 100.0}),
                                     PixelGrid{4, 4, 1.0}, make_thin_psf(), &empty);
  CHECK(empty);
  CHECK(s.n_foreground() == 0);
  for (double d : s.data) CHECK(d == 0.0);
}

TEST_CASE("orientation labels round trip") {
  for (Orientation o : {Orientation::sagittal, Orientation::axial, Orientation::coronal})
    CHECK(orientation_from_string(to_string(o)) == o);
  CHECK_THROWS_AS(orientation_from_string("oblique"), ForwardModelError);
}
