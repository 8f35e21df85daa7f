#include "svr/pipeline.hpp"

#include <cmath>
#include <fstream>

namespace svr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<Orientation> kStackOrder = {Orientation::sagittal, Orientation::coronal,
                                              Orientation::axial};

}  // namespace

Volume init_volume_psf(const std::vector<SliceStack>& stacks,
                       const std::vector<RigidTransform>& poses, const PsfKernel& psf,
                       const Eigen::Vector3i& dims, const Eigen::Vector3d& spacing) {
  Volume acc(dims, spacing);
  size_t idx = 0;
  size_t n_foreground = 0;
  for (const auto& stack : stacks) {
    for (const auto& slice : stack.slices) {
      const RigidTransform& pose = poses[idx++];
      for (int y = 0; y < slice.grid.height; ++y)
        for (int x = 0; x < slice.grid.width; ++x) {
          const size_t i = slice.pix(x, y);
          if (!slice.mask[i]) continue;
          ++n_foreground;
          const Eigen::Vector3d p(static_cast<double>(x), static_cast<double>(y), 0.0);
          for (size_t t = 0; t < psf.size(); ++t)
            push_one(acc, pose.apply(p + psf.offsets[t]), psf.weights[t] * slice.data[i],
                     psf.weights[t]);
        }
    }
  }
  if (n_foreground == 0) throw InitReconError("init_volume_psf: no foreground pixels");
  normalize(acc);
  return acc;
}

void target_geometry(const std::vector<SliceStack>& stacks, Eigen::Vector3i* dims,
                     Eigen::Vector3d* spacing) {
  if (stacks.empty()) throw OptimError("target_geometry: no stacks");
  double sp = stacks.front().in_plane_spacing;
  for (const auto& s : stacks) sp = std::min(sp, s.in_plane_spacing);
  int extent = 1;
  for (const auto& s : stacks) {
    const PixelGrid& g = s.slices.front().grid;
    const int depth = static_cast<int>(std::round(s.n_slices() * s.slice_gap / sp));
    extent = std::max({extent, g.width, g.height, depth});
  }
  *dims = Eigen::Vector3i::Constant(extent);
  *spacing = Eigen::Vector3d::Constant(sp);
}

std::vector<DisplacementField> prescribed_fields(const std::vector<SliceStack>& stacks,
                                                 const Eigen::Vector3d& spacing) {
  std::vector<DisplacementField> out;
  for (const auto& stack : stacks) {
    const double step_vox = stack.slice_gap / spacing.x();
    for (size_t k = 0; k < stack.n_slices(); ++k)
      out.push_back(field_from_pose(
          prescribed_pose(stack.orientation_label, static_cast<int>(k), step_vox),
          stack.slices[k].grid));
  }
  return out;
}

std::vector<RigidTransform> prescribed_poses(const std::vector<SliceStack>& stacks,
                                             const Eigen::Vector3d& spacing) {
  std::vector<RigidTransform> out;
  for (const auto& stack : stacks) {
    const double step_vox = stack.slice_gap / spacing.x();
    for (size_t k = 0; k < stack.n_slices(); ++k)
      out.push_back(prescribed_pose(stack.orientation_label, static_cast<int>(k), step_vox));
  }
  return out;
}

SimulationResult simulate_dataset(const Volume& phantom, const MotionConfig& motion,
                                  double thickness_mm, const PsfKernel& psf) {
  SimulationResult out;
  out.phantom = phantom;
  out.clean_stacks =
      extract_stacks(phantom, kStackOrder, phantom.spacing.x(), thickness_mm, psf);

  const CounterRng root(motion.seed);
  for (size_t s = 0; s < out.clean_stacks.size(); ++s) {
    const SliceStack& stack = out.clean_stacks[s];
    CounterRng rng = root.derive(s);
    const MotionSample sample = sample_motion(motion, static_cast<int>(stack.n_slices()),
                                              stack.slices.front().grid, rng);
    GroundTruth gt = corrupt_stack(phantom, stack, sample, motion, psf, rng);
    out.corrupted_stacks.push_back(std::move(gt.corrupted));
    out.true_poses.push_back(std::move(gt.true_poses));
    out.true_fields.push_back(std::move(gt.fields));
  }
  return out;
}

ReconMode recon_mode_from_string(const std::string& s) {
  if (s == "init") return ReconMode::init;
  if (s == "refine") return ReconMode::refine;
  if (s == "refine+svr") return ReconMode::refine_svr;
  throw IoError(IoErrorCode::malformed_header, "unknown reconstruction mode: " + s, "mode");
}

ReconstructionResult reconstruct(const std::vector<SliceStack>& stacks, ReconMode mode,
                                 const ReconConfig& config) {
  config.validate();
  Eigen::Vector3i dims;
  Eigen::Vector3d spacing;
  target_geometry(stacks, &dims, &spacing);

  ReconstructionResult out;
  if (mode == ReconMode::init) {
    const auto fields = prescribed_fields(stacks, spacing);
    out.volume = init_volume(stacks, fields, dims, spacing);
    out.poses = prescribed_poses(stacks, spacing);
  } else {
    const MultiscaleResult refined = multiscale_refine(stacks, dims, spacing, config);
    const auto full_fields = refined.full_res_fields();
    std::vector<RigidTransform> poses;
    {
      size_t idx = 0;
      for (const auto& stack : stacks)
        for (const auto& slice : stack.slices)
          poses.push_back(project_to_rigid(full_fields[idx++], slice.grid));
    }
    const double thickness = stacks.front().slice_thickness;
    const PsfKernel boxcar = make_boxcar_psf(thickness, spacing.x());

    if (mode == ReconMode::refine) {
      out.volume = init_volume_psf(stacks, poses, boxcar, dims, spacing);
      out.poses = std::move(poses);
    } else {
      std::vector<DisplacementField> rigid_fields;
      {
        size_t idx = 0;
        for (const auto& stack : stacks)
          for (const auto& slice : stack.slices)
            rigid_fields.push_back(field_from_pose(poses[idx++], slice.grid));
      }
      SvrResult svr = alternating_svr(stacks, rigid_fields, dims, spacing, boxcar, config);
      // Alternating optimization alone converges to self-consistent fixed
      // points where misplaced slices anchor their own planes of the
      // reconstruction. Each bootstrap cycle breaks that coupling by
      // cross-registering every stack against the other stacks' consensus,
      // then re-runs the alternating optimization from the improved poses.
      constexpr int kBootstrapCycles = 4;
      for (int cycle = 0; cycle < kBootstrapCycles && stacks.size() >= 2; ++cycle) {
        const std::vector<RigidTransform> boot =
            consensus_bootstrap(stacks, svr.poses, dims, spacing, boxcar, config);
        std::vector<DisplacementField> boot_fields;
        boot_fields.reserve(boot.size());
        {
          size_t idx = 0;
          for (const auto& stack : stacks)
            for (const auto& slice : stack.slices)
              boot_fields.push_back(field_from_pose(boot[idx++], slice.grid));
        }
        svr = alternating_svr(stacks, boot_fields, dims, spacing, boxcar, config);
      }
      out.volume = std::move(svr.volume);
      out.poses = std::move(svr.poses);
      out.data_consistency_history = std::move(svr.data_consistency_history);
      out.metrics_log = std::move(svr.metrics_log);
    }
  }

  size_t idx = 0;
  for (const auto& stack : stacks) {
    std::vector<DisplacementField> fields;
    for (const auto& slice : stack.slices)
      fields.push_back(field_from_pose(out.poses[idx++], slice.grid));
    out.est_fields.push_back(std::move(fields));
  }
  return out;
}

EvaluationReport evaluate_against_truth(
    const ReconstructionResult& result,
    const std::vector<std::vector<DisplacementField>>& gt_fields, double spacing_mm,
    const Volume* phantom) {
  EvaluationReport report;
  report.median_max_tre_per_stack_mm =
      median_max_tre(result.est_fields, gt_fields, spacing_mm, &report.median_max_tre_mean_mm);
  if (phantom && phantom->dims == result.volume.dims) {
    report.volume_ssim = ssim(*phantom, result.volume);
    report.volume_psnr_db = psnr(*phantom, result.volume);
    report.volume_ncc = ncc(*phantom, result.volume);
    report.has_volume_metrics = true;
  }
  return report;
}

void save_simulation(const fs::path& dir, const SimulationResult& sim,
                     const MotionConfig& motion) {
  fs::create_directories(dir);
  write_volume(dir / "phantom", sim.phantom);
  for (size_t s = 0; s < sim.corrupted_stacks.size(); ++s) {
    const std::string orient = to_string(sim.corrupted_stacks[s].orientation_label);
    write_stack(dir / ("stack_" + orient), sim.corrupted_stacks[s], nullptr, motion.seed);

    json truth;
    truth["type"] = "truth";
    truth["orientation"] = orient;
    json poses = json::array();
    for (const auto& p : sim.true_poses[s]) poses.push_back(transform_to_json(p));
    truth["poses"] = poses;
    truth["field_count"] = sim.true_fields[s].size();
    atomic_write(dir / ("truth_" + orient + ".json"), truth.dump(2) + "\n");
    for (size_t k = 0; k < sim.true_fields[s].size(); ++k)
      write_field(dir / ("truth_field_" + orient + "_" + std::to_string(k)),
                  sim.true_fields[s][k]);
  }
}

LoadedDataset load_stacks(const fs::path& dir) {
  LoadedDataset out;
  for (Orientation o : kStackOrder) {
    const fs::path base = dir / ("stack_" + to_string(o));
    if (!fs::exists(base.string() + ".json")) continue;
    StackFile f = read_stack(base);
    out.stacks.push_back(std::move(f.stack));
    out.poses.push_back(std::move(f.poses));
  }
  if (out.stacks.empty())
    throw IoError(IoErrorCode::missing_file, "no stack files found in " + dir.string());
  return out;
}

LoadedDataset load_truth(const fs::path& dir) {
  LoadedDataset out;
  for (Orientation o : kStackOrder) {
    const std::string orient = to_string(o);
    const fs::path header_path = dir / ("truth_" + orient + ".json");
    if (!fs::exists(header_path)) continue;
    std::ifstream in(header_path);
    const json truth = json::parse(in);
    std::vector<RigidTransform> poses;
    for (const auto& j : truth["poses"]) poses.push_back(transform_from_json(j));
    std::vector<DisplacementField> fields;
    const size_t n = truth.value("field_count", size_t{0});
    for (size_t k = 0; k < n; ++k)
      fields.push_back(read_field(dir / ("truth_field_" + orient + "_" + std::to_string(k))));
    out.poses.push_back(std::move(poses));
    out.fields.push_back(std::move(fields));
  }
  if (out.poses.empty())
    throw IoError(IoErrorCode::missing_file, "no truth files found in " + dir.string());
  return out;
}

void save_reconstruction(const fs::path& dir, const ReconstructionResult& result,
                         const std::vector<SliceStack>& stacks) {
  fs::create_directories(dir);
  write_volume(dir / "volume", result.volume);
  size_t idx = 0;
  for (const auto& stack : stacks) {
    json j;
    j["type"] = "poses";
    j["orientation"] = to_string(stack.orientation_label);
    json poses = json::array();
    for (size_t k = 0; k < stack.n_slices(); ++k)
      poses.push_back(transform_to_json(result.poses[idx++]));
    j["poses"] = poses;
    atomic_write(dir / ("poses_" + to_string(stack.orientation_label) + ".json"),
                 j.dump(2) + "\n");
  }
  json hist;
  hist["data_consistency_history"] = result.data_consistency_history;
  atomic_write(dir / "history.json", hist.dump(2) + "\n");
  std::string log;
  for (const auto& line : result.metrics_log) log += line + "\n";
  atomic_write(dir / "metrics.jsonl", log);
}

ReconstructionResult load_reconstruction(const fs::path& dir,
                                         const std::vector<SliceStack>& stacks) {
  ReconstructionResult out;
  out.volume = read_volume(dir / "volume");
  for (const auto& stack : stacks) {
    const fs::path path = dir / ("poses_" + to_string(stack.orientation_label) + ".json");
    std::ifstream in(path);
    if (!in) throw IoError(IoErrorCode::missing_file, "missing pose file " + path.string());
    const json j = json::parse(in);
    std::vector<DisplacementField> fields;
    size_t k = 0;
    for (const auto& pj : j["poses"]) {
      const RigidTransform pose = transform_from_json(pj);
      out.poses.push_back(pose);
      fields.push_back(field_from_pose(pose, stack.slices[k++].grid));
    }
    out.est_fields.push_back(std::move(fields));
  }
  return out;
}

}  // namespace svr
