#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "svr/io.hpp"
#include "svr/pipeline.hpp"
#include "svr/rng.hpp"

using namespace svr;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "svr_io_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Volume random_volume(const Eigen::Vector3i& dims, uint64_t seed) {
  Volume v(dims, Eigen::Vector3d(1.0, 1.25, 0.75), Eigen::Vector3d(0.5, -1.0, 2.0));
  CounterRng rng(seed);
  for (size_t i = 0; i < v.size(); ++i) {
    v.data[i] = rng.uniform(-2.0, 2.0);
    v.weight[i] = rng.uniform(0.0, 1.0) < 0.3 ? 0.0 : 1.0;
  }
  // Uncovered voxels carry no data by convention.
  for (size_t i = 0; i < v.size(); ++i)
    if (v.weight[i] <= Volume::kCoverageEps) v.data[i] = 0.0;
  return v;
}

#ifdef SVR_CLI_PATH
int run_cli(const std::string& args, std::string* err_text = nullptr) {
  const fs::path err_file = scratch_dir() / "cli_stderr.txt";
  const std::string cmd = std::string(SVR_CLI_PATH) + " " + args + " >/dev/null 2>" +
                          err_file.string();
  const int status = std::system(cmd.c_str());
  if (err_text) *err_text = read_bytes(err_file);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}
#endif

}  // namespace

TEST_CASE("transform JSON round trip carries 12 numbers") {
  const RigidTransform t =
      RigidTransform::from_rotation_vector_deg({12.0, -7.0, 3.0}, {0.5, -1.25, 2.0});
  const json j = transform_to_json(t);
  REQUIRE(j.is_array());
  REQUIRE(j.size() == 12);
  const RigidTransform back = transform_from_json(j);
  CHECK((back.rotation - t.rotation).norm() <= 1e-15);
  CHECK((back.translation - t.translation).norm() <= 1e-15);
  CHECK_THROWS_AS(transform_from_json(json::array({1, 2, 3})), IoError);
}

TEST_CASE("volume file round trip is bit-exact at f32 precision") {
  const Volume v = random_volume(Eigen::Vector3i(6, 5, 4), 3);
  const fs::path base = scratch_dir() / "vol_rt";
  write_volume(base, v);
  const Volume back = read_volume(base);

  REQUIRE(back.dims == v.dims);
  CHECK((back.spacing - v.spacing).norm() <= 1e-15);
  CHECK((back.origin - v.origin).norm() <= 1e-15);
  for (size_t i = 0; i < v.size(); ++i) {
    CHECK(back.data[i] == static_cast<double>(static_cast<float>(v.data[i])));
    CHECK((back.weight[i] > Volume::kCoverageEps) == (v.weight[i] > Volume::kCoverageEps));
  }

  // Writing the read-back object reproduces the files byte for byte.
  const fs::path base2 = scratch_dir() / "vol_rt2";
  write_volume(base2, back);
  CHECK(read_bytes(base.string() + ".raw") == read_bytes(base2.string() + ".raw"));
  CHECK(read_bytes(base.string() + ".mask") == read_bytes(base2.string() + ".mask"));
}

TEST_CASE("volume errors: each failure mode has a distinct structured code") {
  const Volume v = random_volume(Eigen::Vector3i::Constant(4), 5);
  const fs::path base = scratch_dir() / "vol_err";
  write_volume(base, v);

  SUBCASE("missing file") {
    try {
      read_volume(scratch_dir() / "does_not_exist");
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(e.code == IoErrorCode::missing_file);
    }
  }
  SUBCASE("truncated payload, no partial object") {
    const std::string raw = read_bytes(base.string() + ".raw");
    atomic_write(base.string() + ".raw", raw.substr(0, raw.size() - 4));
    try {
      read_volume(base);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(e.code == IoErrorCode::truncated_payload);
    }
    atomic_write(base.string() + ".raw", raw);  // restore
  }
  SUBCASE("dtype mismatch names the field") {
    json header = json::parse(read_bytes(base.string() + ".json"));
    header["dtype"] = "f64";
    atomic_write(base.string() + ".json", header.dump(2) + "\n");
    try {
      read_volume(base);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(e.code == IoErrorCode::dtype_mismatch);
      CHECK(e.field == "dtype");
    }
  }
  SUBCASE("malformed dims name the field") {
    json header = json::parse(read_bytes(base.string() + ".json"));
    header["dims"] = {4, -1, 4};
    atomic_write(base.string() + ".json", header.dump(2) + "\n");
    try {
      read_volume(base);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(e.code == IoErrorCode::malformed_header);
      CHECK(e.field == "dims");
    }
  }
}

TEST_CASE("stack file round trip preserves slices, poses, and seed") {
  const Volume phantom = make_phantom(PhantomKind::ellipsoids, Eigen::Vector3i::Constant(12), 2);
  const auto stacks = extract_stacks(phantom, {Orientation::coronal}, 1.0, 1.0, make_thin_psf());
  REQUIRE(stacks.size() == 1);
  std::vector<RigidTransform> poses;
  for (size_t k = 0; k < stacks[0].n_slices(); ++k)
    poses.push_back(prescribed_pose(stacks[0].orientation_label, static_cast<int>(k), 1.0));

  const fs::path base = scratch_dir() / "stack_rt";
  write_stack(base, stacks[0], &poses, 42);
  const StackFile back = read_stack(base);

  CHECK(back.stack.orientation_label == stacks[0].orientation_label);
  CHECK(back.stack.slice_thickness == stacks[0].slice_thickness);
  REQUIRE(back.stack.n_slices() == stacks[0].n_slices());
  REQUIRE(back.seed.has_value());
  CHECK(*back.seed == 42);
  REQUIRE(back.poses.size() == poses.size());
  for (size_t k = 0; k < poses.size(); ++k)
    CHECK((back.poses[k].translation - poses[k].translation).norm() <= 1e-12);
  for (size_t k = 0; k < stacks[0].n_slices(); ++k) {
    const Slice& a = stacks[0].slices[k];
    const Slice& b = back.stack.slices[k];
    REQUIRE(a.n_pixels() == b.n_pixels());
    for (size_t i = 0; i < a.n_pixels(); ++i) {
      CHECK(b.data[i] == static_cast<double>(static_cast<float>(a.data[i])));
      CHECK(b.mask[i] == a.mask[i]);
    }
  }

  SliceStack empty;
  CHECK_THROWS_AS(write_stack(scratch_dir() / "stack_empty", empty), IoError);
}

TEST_CASE("field file round trip") {
  DisplacementField f(7, 5, 2);
  CounterRng rng(9);
  for (auto& v : f.data)
    v = {rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)};
  const fs::path base = scratch_dir() / "field_rt";
  write_field(base, f);
  const DisplacementField back = read_field(base);
  REQUIRE(back.width == 7);
  REQUIRE(back.height == 5);
  CHECK(back.level == 2);
  for (size_t i = 0; i < f.data.size(); ++i)
    for (int a = 0; a < 3; ++a)
      CHECK(back.data[i][a] == static_cast<double>(static_cast<float>(f.data[i][a])));
}

TEST_CASE("make_phantom: deterministic, clamped, bounded foreground") {
  const Volume a = make_phantom(PhantomKind::ellipsoids, Eigen::Vector3i::Constant(16), 7);
  const Volume b = make_phantom(PhantomKind::ellipsoids, Eigen::Vector3i::Constant(16), 7);
  CHECK(a.data == b.data);  // bitwise identical for the same seed
  const Volume c = make_phantom(PhantomKind::ellipsoids, Eigen::Vector3i::Constant(16), 8);
  CHECK(a.data != c.data);

  for (const PhantomKind kind :
       {PhantomKind::ellipsoids, PhantomKind::checker, PhantomKind::shell}) {
    const Volume v = make_phantom(kind, Eigen::Vector3i::Constant(12), 3);
    for (const double d : v.data) {
      CHECK(d >= 0.0);
      CHECK(d <= 1.0);
    }
  }
  CHECK_THROWS_AS(make_phantom(PhantomKind::shell, Eigen::Vector3i(7, 12, 12), 1), IoError);
  CHECK_THROWS_AS(phantom_kind_from_string("brain"), IoError);
  CHECK(phantom_kind_from_string("shell") == PhantomKind::shell);
}

TEST_CASE("shell phantom foreground matches the analytic ellipsoid volume") {
  const int d = 64;
  const Volume v = make_phantom(PhantomKind::shell, Eigen::Vector3i::Constant(d), 11);
  size_t count = 0;
  for (const double x : v.data)
    if (x > 0.0) ++count;
  const double semi = 0.42 * d;
  const double analytic = 4.0 / 3.0 * M_PI * semi * semi * semi;
  CHECK(std::abs(static_cast<double>(count) - analytic) <= 0.01 * analytic);
}

TEST_CASE("motion and recon configs round trip through JSON; bad values rejected") {
  MotionConfig m;
  m.rot_sigma_deg = 7.5;
  m.trans_range_mm = 2.25;
  m.seed = 99;
  const MotionConfig m2 = motion_config_from_json(motion_config_to_json(m));
  CHECK(m2.rot_sigma_deg == m.rot_sigma_deg);
  CHECK(m2.trans_range_mm == m.trans_range_mm);
  CHECK(m2.seed == m.seed);
  CHECK(m2.n_perturbations_min == m.n_perturbations_min);
  CHECK(m2.n_perturbations_max == m.n_perturbations_max);

  json bad = motion_config_to_json(m);
  bad["rot_sigma_deg"] = -1.0;
  CHECK_THROWS_AS(motion_config_from_json(bad), IoError);

  ReconConfig r;
  r.outer_iters = 7;
  r.flow_max_disp = 1.25;
  const ReconConfig r2 = recon_config_from_json(recon_config_to_json(r));
  CHECK(r2.outer_iters == 7);
  CHECK(r2.flow_max_disp == 1.25);
  json bad_r = recon_config_to_json(r);
  bad_r["pyramid_levels"] = 0;
  CHECK_THROWS_AS(recon_config_from_json(bad_r), OptimError);
}

TEST_CASE("config_hash is stable and sensitive to content") {
  const json a = recon_config_to_json(ReconConfig{});
  CHECK(config_hash(a) == config_hash(a));
  json b = a;
  b["outer_iters"] = 6;
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("write_manifest records command, config hash, and seed") {
  const fs::path dir = scratch_dir() / "manifest_test";
  fs::create_directories(dir);
  const json config = recon_config_to_json(ReconConfig{});
  write_manifest(dir, "reconstruct", {{"stacks", "somewhere"}}, config, 17);
  const json m = json::parse(read_bytes(dir / "manifest.json"));
  CHECK(m["command"] == "reconstruct");
  CHECK(m["inputs"]["stacks"] == "somewhere");
  CHECK(m["config_hash"].get<uint64_t>() == config_hash(config));
  CHECK(m["seed"].get<uint64_t>() == 17);
  CHECK(m.contains("format_version"));
}

#ifdef SVR_CLI_PATH

TEST_CASE("CLI: unknown verb exits 2 with a usage error") {
  std::string err;
  CHECK(run_cli("frobnicate", &err) == 2);
  const json j = json::parse(err);
  CHECK(j["error"]["type"] == "usage");
}

TEST_CASE("CLI: oracle self-checks pass") {
  CHECK(run_cli("oracle --case all") == 0);
  std::string err;
  CHECK(run_cli("oracle --case bogus", &err) == 1);
  CHECK(json::parse(err)["error"].contains("field"));
}

TEST_CASE("CLI: simulate -> reconstruct -> evaluate end-to-end") {
  const fs::path sim_dir = scratch_dir() / "cli_sim";
  const fs::path rec_dir = scratch_dir() / "cli_rec";
  const fs::path report = scratch_dir() / "cli_report.csv";

  CHECK(run_cli("simulate --phantom ellipsoids --dims 16 --seed 5 --out " + sim_dir.string()) ==
        0);
  CHECK(fs::exists(sim_dir / "manifest.json"));
  CHECK(run_cli("reconstruct --stacks " + sim_dir.string() + " --mode init --deterministic" +
                " --out " + rec_dir.string()) == 0);
  CHECK(fs::exists(rec_dir / "manifest.json"));
  CHECK(run_cli("evaluate --result " + rec_dir.string() + " --truth " + sim_dir.string() +
                " --out " + report.string()) == 0);
  const std::string csv = read_bytes(report);
  CHECK(csv.find("median_max_tre_mm_mean") != std::string::npos);
  CHECK(csv.find("volume_ssim") != std::string::npos);
}

TEST_CASE("CLI: IO failures exit nonzero with machine-readable JSON") {
  std::string err;
  const int code = run_cli("reconstruct --stacks " + (scratch_dir() / "nope").string() +
                               " --mode init --out " + (scratch_dir() / "nope_out").string(),
                           &err);
  CHECK(code == 1);
  const json j = json::parse(err);
  CHECK(j.contains("error"));
  CHECK(j["error"].contains("type"));
}

#endif  // SVR_CLI_PATH
