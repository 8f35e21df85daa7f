// Command-line front end: simulate, reconstruct, evaluate, oracle.

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <random>

#include "svr/pipeline.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw svr::IoError(svr::IoErrorCode::missing_file, "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw svr::IoError(svr::IoErrorCode::malformed_header,
                       path + ": " + std::string(e.what()));
  }
}

int run_simulate(const std::string& phantom_arg, int dims, uint64_t phantom_seed,
                 const std::string& motion_path, uint64_t seed, bool seed_given,
                 double thickness, const std::string& out_dir) {
  svr::Volume phantom;
  json phantom_desc;
  if (phantom_arg == "ellipsoids" || phantom_arg == "checker" || phantom_arg == "shell") {
    phantom = svr::make_phantom(svr::phantom_kind_from_string(phantom_arg),
                                Eigen::Vector3i::Constant(dims), phantom_seed);
    phantom_desc = {{"procedural", phantom_arg}, {"dims", dims}, {"seed", phantom_seed}};
  } else {
    phantom = svr::read_volume(phantom_arg);
    phantom_desc = {{"file", phantom_arg}};
  }

  svr::MotionConfig motion;
  json motion_json = svr::motion_config_to_json(motion);
  if (!motion_path.empty()) {
    motion_json = load_json(motion_path);
    motion = svr::motion_config_from_json(motion_json);
  }
  if (seed_given) motion.seed = seed;
  motion_json = svr::motion_config_to_json(motion);

  const svr::PsfKernel psf = svr::make_boxcar_psf(thickness, phantom.spacing.x());
  const svr::SimulationResult sim = svr::simulate_dataset(phantom, motion, thickness, psf);
  svr::save_simulation(out_dir, sim, motion);
  svr::write_manifest(out_dir, "simulate",
                      {{"phantom", phantom_desc}, {"thickness_mm", thickness}}, motion_json,
                      motion.seed);
  std::cout << "wrote " << sim.corrupted_stacks.size() << " stacks to " << out_dir << "\n";
  return 0;
}

int run_reconstruct(const std::string& stacks_dir, const std::string& mode_str,
                    const std::string& config_path, bool deterministic,
                    const std::string& out_dir) {
  svr::ReconConfig config;
  json config_json = svr::recon_config_to_json(config);
  if (!config_path.empty()) {
    config_json = load_json(config_path);
    config = svr::recon_config_from_json(config_json);
  }
  config.deterministic = config.deterministic || deterministic;
  config_json = svr::recon_config_to_json(config);

  const svr::ReconMode mode = svr::recon_mode_from_string(mode_str);
  const svr::LoadedDataset data = svr::load_stacks(stacks_dir);
  const svr::ReconstructionResult result = svr::reconstruct(data.stacks, mode, config);
  svr::save_reconstruction(out_dir, result, data.stacks);
  svr::write_manifest(out_dir, "reconstruct",
                      {{"stacks", stacks_dir}, {"mode", mode_str}}, config_json,
                      std::nullopt);
  std::cout << "wrote reconstruction (" << result.volume.dims.transpose() << " voxels) to "
            << out_dir << "\n";
  return 0;
}

int run_evaluate(const std::string& result_dir, const std::string& truth_dir,
                 const std::string& out_path) {
  const svr::LoadedDataset data = svr::load_stacks(truth_dir);
  const svr::LoadedDataset truth = svr::load_truth(truth_dir);
  const svr::ReconstructionResult result = svr::load_reconstruction(result_dir, data.stacks);

  svr::Volume phantom;
  const bool have_phantom = fs::exists(fs::path(truth_dir) / "phantom.json");
  if (have_phantom) phantom = svr::read_volume(fs::path(truth_dir) / "phantom");

  const double spacing = data.stacks.front().in_plane_spacing;
  const svr::EvaluationReport report = svr::evaluate_against_truth(
      result, truth.fields, spacing, have_phantom ? &phantom : nullptr);

  std::string csv = "metric,value\n";
  for (size_t s = 0; s < report.median_max_tre_per_stack_mm.size(); ++s)
    csv += "median_max_tre_mm_stack" + std::to_string(s) + "," +
           std::to_string(report.median_max_tre_per_stack_mm[s]) + "\n";
  csv += "median_max_tre_mm_mean," + std::to_string(report.median_max_tre_mean_mm) + "\n";
  if (report.has_volume_metrics) {
    csv += "volume_ssim," + std::to_string(report.volume_ssim) + "\n";
    csv += "volume_psnr_db," + std::to_string(report.volume_psnr_db) + "\n";
    csv += "volume_ncc," + std::to_string(report.volume_ncc) + "\n";
  }
  svr::atomic_write(out_path, csv);
  std::cout << csv;
  return 0;
}

// Self-check oracles shared with the acceptance suite, runnable on demand.
int run_oracle(const std::string& name) {
  bool ok = true;
  if (name == "dense-system" || name == "all") {
    // Forward simulation must agree with an explicit dense realization of
    // the slicing operator on a tiny random volume.
    svr::Volume vol(Eigen::Vector3i::Constant(4), Eigen::Vector3d::Ones());
    svr::CounterRng rng(7);
    for (auto& v : vol.data) v = rng.uniform(0.0, 1.0);
    std::fill(vol.weight.begin(), vol.weight.end(), 1.0);

    const svr::PsfKernel psf = svr::make_thin_psf();
    const svr::PixelGrid grid{4, 4, 1.0};
    std::vector<svr::RigidTransform> poses;
    std::vector<svr::PixelGrid> grids;
    for (int k = 0; k < 4; ++k) {
      poses.push_back(svr::RigidTransform::translate({0.0, 0.0, static_cast<double>(k)}));
      grids.push_back(grid);
    }
    const Eigen::MatrixXd a = svr::assemble_dense_system(vol.dims, poses, grids, psf);
    Eigen::VectorXd v(vol.size());
    for (size_t i = 0; i < vol.size(); ++i) v[static_cast<long>(i)] = vol.data[i];
    const Eigen::VectorXd predicted = a * v;

    std::vector<svr::Slice> slices;
    for (const auto& pose : poses)
      slices.push_back(svr::simulate_slice_psf(vol, pose, grid, psf));
    const Eigen::VectorXd simulated = svr::stack_slices_vector(slices);
    const double err = (predicted - simulated).cwiseAbs().maxCoeff();
    std::cout << "oracle dense-system: max abs deviation " << err << "\n";
    ok = ok && err <= 1e-6;
  }
  if (name == "adjoint" || name == "all") {
    // <push(I), V> must equal <I, pull(V)> for random coordinates.
    svr::CounterRng rng(11);
    svr::Volume vol(Eigen::Vector3i::Constant(8), Eigen::Vector3d::Ones());
    for (auto& v : vol.data) v = rng.uniform(0.0, 1.0);
    std::vector<Eigen::Vector3d> coords;
    std::vector<double> values;
    for (int i = 0; i < 200; ++i) {
      coords.emplace_back(rng.uniform(0.0, 7.0), rng.uniform(0.0, 7.0), rng.uniform(0.0, 7.0));
      values.push_back(rng.uniform(-1.0, 1.0));
    }
    svr::Volume acc(vol.dims, vol.spacing);
    svr::push(acc, coords, values);
    double lhs = 0.0;
    for (size_t i = 0; i < vol.size(); ++i) lhs += acc.data[i] * vol.data[i];
    const svr::PullResult pulled = svr::pull(vol, coords);
    double rhs = 0.0;
    for (size_t i = 0; i < values.size(); ++i) rhs += values[i] * pulled.values[i];
    const double err = std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs));
    std::cout << "oracle adjoint: relative deviation " << err << "\n";
    ok = ok && err <= 1e-6;
  }
  if (name != "dense-system" && name != "adjoint" && name != "all")
    throw svr::IoError(svr::IoErrorCode::malformed_header, "unknown oracle case: " + name,
                       "case");
  std::cout << (ok ? "oracle: PASS\n" : "oracle: FAIL\n");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Slice-to-volume reconstruction toolkit"};
  app.require_subcommand(1);

  auto* sim = app.add_subcommand("simulate", "Extract and motion-corrupt synthetic stacks");
  std::string phantom = "ellipsoids";
  int dims = 32;
  uint64_t phantom_seed = 1;
  std::string motion_path;
  uint64_t seed = 0;
  double thickness = 1.0;
  std::string sim_out;
  sim->add_option("--phantom", phantom,
                  "Volume file base or procedural kind (ellipsoids|checker|shell)");
  sim->add_option("--dims", dims, "Procedural phantom edge length in voxels");
  sim->add_option("--phantom-seed", phantom_seed, "Procedural phantom seed");
  sim->add_option("--motion", motion_path, "Motion config JSON");
  auto* seed_opt = sim->add_option("--seed", seed, "Motion seed (overrides config)");
  sim->add_option("--thickness", thickness, "Slice thickness in mm");
  sim->add_option("--out", sim_out, "Output directory")->required();

  auto* rec = app.add_subcommand("reconstruct", "Reconstruct a volume from stacks");
  std::string stacks_dir, mode = "refine+svr", config_path, rec_out;
  bool deterministic = false;
  rec->add_option("--stacks", stacks_dir, "Input stack directory")->required();
  rec->add_option("--mode", mode, "init | refine | refine+svr");
  rec->add_option("--config", config_path, "Reconstruction config JSON");
  rec->add_flag("--deterministic", deterministic, "Force deterministic execution");
  rec->add_option("--out", rec_out, "Output directory")->required();

  auto* eval = app.add_subcommand("evaluate", "Score a reconstruction against ground truth");
  std::string result_dir, truth_dir, report_path = "report.csv";
  eval->add_option("--result", result_dir, "Reconstruction directory")->required();
  eval->add_option("--truth", truth_dir, "Simulation directory with ground truth")->required();
  eval->add_option("--out", report_path, "Report CSV path");

  auto* orc = app.add_subcommand("oracle", "Run built-in numerical oracles");
  std::string oracle_case = "all";
  orc->add_option("--case", oracle_case, "dense-system | adjoint | all");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << nlohmann::json{{"error", {{"type", "usage"}, {"message", e.what()}}}}.dump()
              << "\n";
    return 2;
  }

  try {
    if (sim->parsed())
      return run_simulate(phantom, dims, phantom_seed, motion_path, seed,
                          seed_opt->count() > 0, thickness, sim_out);
    if (rec->parsed())
      return run_reconstruct(stacks_dir, mode, config_path, deterministic, rec_out);
    if (eval->parsed()) return run_evaluate(result_dir, truth_dir, report_path);
    if (orc->parsed()) return run_oracle(oracle_case);
  } catch (const svr::IoError& e) {
    nlohmann::json err = {{"type", to_string(e.code)}, {"message", e.what()}};
    if (!e.field.empty()) err["field"] = e.field;
    std::cerr << nlohmann::json{{"error", err}}.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", {{"type", "runtime"}, {"message", e.what()}}}}.dump()
              << "\n";
    return 1;
  }
  return 2;
}
