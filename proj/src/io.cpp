#include "svr/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "svr/rng.hpp"

namespace svr {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "raw payloads are little-endian; big-endian hosts need byte swaps");

std::string to_string(IoErrorCode code) {
  switch (code) {
    case IoErrorCode::malformed_header: return "malformed_header";
    case IoErrorCode::truncated_payload: return "truncated_payload";
    case IoErrorCode::dtype_mismatch: return "dtype_mismatch";
    case IoErrorCode::dims_mismatch: return "dims_mismatch";
    case IoErrorCode::missing_file: return "missing_file";
  }
  return "unknown";
}

void atomic_write(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoErrorCode::missing_file, "cannot open " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(IoErrorCode::missing_file, "write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoErrorCode::missing_file, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

json read_header(const fs::path& path) {
  const std::string text = read_file(path);
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded())
    throw IoError(IoErrorCode::malformed_header, "invalid JSON header: " + path.string());
  return j;
}

std::string f32_payload(const std::vector<double>& data) {
  std::string bytes(data.size() * 4, '\0');
  for (size_t i = 0; i < data.size(); ++i) {
    const float f = static_cast<float>(data[i]);
    std::memcpy(bytes.data() + i * 4, &f, 4);
  }
  return bytes;
}

std::vector<double> f32_parse(const std::string& bytes, size_t expected,
                              const std::string& what) {
  if (bytes.size() != expected * 4)
    throw IoError(IoErrorCode::truncated_payload,
                  what + ": payload is " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(expected * 4));
  std::vector<double> data(expected);
  for (size_t i = 0; i < expected; ++i) {
    float f;
    std::memcpy(&f, bytes.data() + i * 4, 4);
    data[i] = static_cast<double>(f);
  }
  return data;
}

void require(bool cond, IoErrorCode code, const std::string& message,
             const std::string& field = {}) {
  if (!cond) throw IoError(code, message, field);
}

}  // namespace

json transform_to_json(const RigidTransform& t) {
  json arr = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) arr.push_back(t.rotation(r, c));
  for (int r = 0; r < 3; ++r) arr.push_back(t.translation(r));
  return arr;
}

RigidTransform transform_from_json(const json& j) {
  require(j.is_array() && j.size() == 12, IoErrorCode::malformed_header,
          "transform must be 12 numbers", "transform");
  RigidTransform t;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) t.rotation(r, c) = j[r * 3 + c].get<double>();
  for (int r = 0; r < 3; ++r) t.translation(r) = j[9 + r].get<double>();
  return t;
}

void write_volume(const fs::path& base, const Volume& volume) {
  json header;
  header["type"] = "volume";
  header["dims"] = {volume.dims.x(), volume.dims.y(), volume.dims.z()};
  header["spacing"] = {volume.spacing.x(), volume.spacing.y(), volume.spacing.z()};
  header["origin"] = {volume.origin.x(), volume.origin.y(), volume.origin.z()};
  header["dtype"] = "f32";
  header["endianness"] = "little";
  header["has_mask"] = true;
  atomic_write(base.string() + ".json", header.dump(2) + "\n");
  atomic_write(base.string() + ".raw", f32_payload(volume.data));
  std::string mask(volume.size(), '\0');
  for (size_t i = 0; i < volume.size(); ++i)
    mask[i] = volume.weight[i] > Volume::kCoverageEps ? 1 : 0;
  atomic_write(base.string() + ".mask", mask);
}

Volume read_volume(const fs::path& base) {
  const json header = read_header(base.string() + ".json");
  require(header.value("type", "") == "volume", IoErrorCode::malformed_header,
          "not a volume header", "type");
  require(header.value("dtype", "") == "f32", IoErrorCode::dtype_mismatch,
          "unsupported dtype: " + header.value("dtype", "<missing>"), "dtype");
  require(header.contains("dims") && header["dims"].is_array() && header["dims"].size() == 3,
          IoErrorCode::malformed_header, "dims must be 3 integers", "dims");

  Eigen::Vector3i dims;
  for (int a = 0; a < 3; ++a) {
    dims[a] = header["dims"][a].get<int>();
    require(dims[a] > 0, IoErrorCode::malformed_header, "dims must be positive", "dims");
  }
  Volume v(dims, Eigen::Vector3d::Ones());
  if (header.contains("spacing"))
    for (int a = 0; a < 3; ++a) v.spacing[a] = header["spacing"][a].get<double>();
  if (header.contains("origin"))
    for (int a = 0; a < 3; ++a) v.origin[a] = header["origin"][a].get<double>();

  v.data = f32_parse(read_file(base.string() + ".raw"), v.size(), base.string());
  if (header.value("has_mask", false)) {
    const std::string mask = read_file(base.string() + ".mask");
    require(mask.size() == v.size(), IoErrorCode::truncated_payload,
            "mask payload size mismatch", "has_mask");
    for (size_t i = 0; i < v.size(); ++i) v.weight[i] = mask[i] ? 1.0 : 0.0;
  } else {
    std::fill(v.weight.begin(), v.weight.end(), 1.0);
  }
  return v;
}

void write_stack(const fs::path& base, const SliceStack& stack,
                 const std::vector<RigidTransform>* poses, std::optional<uint64_t> seed) {
  require(!stack.slices.empty(), IoErrorCode::malformed_header, "cannot write empty stack");
  const PixelGrid& grid = stack.slices.front().grid;
  json header;
  header["type"] = "stack";
  header["orientation"] = to_string(stack.orientation_label);
  header["grid"] = {{"width", grid.width}, {"height", grid.height}, {"spacing", grid.spacing}};
  header["slice_thickness"] = stack.slice_thickness;
  header["slice_gap"] = stack.slice_gap;
  header["in_plane_spacing"] = stack.in_plane_spacing;
  header["slice_count"] = stack.slices.size();
  header["dtype"] = "f32";
  header["endianness"] = "little";
  if (seed) header["seed"] = *seed;
  if (poses) {
    require(poses->size() == stack.slices.size(), IoErrorCode::dims_mismatch,
            "pose count must match slice count", "poses");
    json arr = json::array();
    for (const auto& p : *poses) arr.push_back(transform_to_json(p));
    header["poses"] = arr;
  }
  atomic_write(base.string() + ".json", header.dump(2) + "\n");

  std::vector<double> flat;
  std::string mask;
  for (const auto& slice : stack.slices) {
    flat.insert(flat.end(), slice.data.begin(), slice.data.end());
    for (auto m : slice.mask) mask.push_back(m ? 1 : 0);
  }
  atomic_write(base.string() + ".raw", f32_payload(flat));
  atomic_write(base.string() + ".mask", mask);
}

StackFile read_stack(const fs::path& base) {
  const json header = read_header(base.string() + ".json");
  require(header.value("type", "") == "stack", IoErrorCode::malformed_header,
          "not a stack header", "type");
  require(header.value("dtype", "") == "f32", IoErrorCode::dtype_mismatch,
          "unsupported dtype: " + header.value("dtype", "<missing>"), "dtype");
  require(header.contains("grid"), IoErrorCode::malformed_header, "missing grid", "grid");

  StackFile out;
  out.stack.orientation_label = orientation_from_string(header.value("orientation", "axial"));
  out.stack.slice_thickness = header.value("slice_thickness", 1.0);
  out.stack.slice_gap = header.value("slice_gap", out.stack.slice_thickness);
  out.stack.in_plane_spacing = header.value("in_plane_spacing", 1.0);
  PixelGrid grid;
  grid.width = header["grid"].value("width", 0);
  grid.height = header["grid"].value("height", 0);
  grid.spacing = header["grid"].value("spacing", 1.0);
  require(grid.valid(), IoErrorCode::malformed_header, "invalid grid", "grid");
  const size_t n_slices = header.value("slice_count", size_t{0});
  require(n_slices > 0, IoErrorCode::malformed_header, "slice_count must be positive",
          "slice_count");
  if (header.contains("seed")) out.seed = header["seed"].get<uint64_t>();

  const size_t per_slice = static_cast<size_t>(grid.width) * grid.height;
  const auto flat = f32_parse(read_file(base.string() + ".raw"), per_slice * n_slices,
                              base.string());
  const std::string mask = read_file(base.string() + ".mask");
  require(mask.size() == per_slice * n_slices, IoErrorCode::truncated_payload,
          "mask payload size mismatch");

  for (size_t k = 0; k < n_slices; ++k) {
    Slice s(grid, static_cast<int>(k));
    for (size_t i = 0; i < per_slice; ++i) {
      s.data[i] = flat[k * per_slice + i];
      s.mask[i] = mask[k * per_slice + i] ? 1 : 0;
    }
    out.stack.slices.push_back(std::move(s));
  }

  if (header.contains("poses")) {
    require(header["poses"].size() == n_slices, IoErrorCode::dims_mismatch,
            "pose count does not match slice_count", "poses");
    for (const auto& j : header["poses"]) out.poses.push_back(transform_from_json(j));
  }
  return out;
}

void write_field(const fs::path& base, const DisplacementField& field) {
  json header;
  header["type"] = "field";
  header["width"] = field.width;
  header["height"] = field.height;
  header["level"] = field.level;
  header["dtype"] = "f32";
  header["endianness"] = "little";
  atomic_write(base.string() + ".json", header.dump(2) + "\n");
  std::vector<double> flat;
  flat.reserve(field.data.size() * 3);
  for (const auto& v : field.data) {
    flat.push_back(v.x());
    flat.push_back(v.y());
    flat.push_back(v.z());
  }
  atomic_write(base.string() + ".raw", f32_payload(flat));
}

DisplacementField read_field(const fs::path& base) {
  const json header = read_header(base.string() + ".json");
  require(header.value("type", "") == "field", IoErrorCode::malformed_header,
          "not a field header", "type");
  const int w = header.value("width", 0), h = header.value("height", 0);
  require(w > 0 && h > 0, IoErrorCode::malformed_header, "invalid field dims", "width");
  DisplacementField field(w, h, header.value("level", 0));
  const auto flat =
      f32_parse(read_file(base.string() + ".raw"), field.data.size() * 3, base.string());
  for (size_t i = 0; i < field.data.size(); ++i)
    field.data[i] = {flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]};
  return field;
}

PhantomKind phantom_kind_from_string(const std::string& s) {
  if (s == "ellipsoids") return PhantomKind::ellipsoids;
  if (s == "checker") return PhantomKind::checker;
  if (s == "shell") return PhantomKind::shell;
  throw IoError(IoErrorCode::malformed_header, "unknown phantom kind: " + s, "phantom");
}

Volume make_phantom(PhantomKind kind, const Eigen::Vector3i& dims, uint64_t seed) {
  if (dims.minCoeff() < 8) throw IoError(IoErrorCode::malformed_header, "phantom dims must be >= 8");
  Volume v(dims, Eigen::Vector3d::Ones());
  CounterRng rng(seed);

  const Eigen::Vector3d c = (dims.cast<double>() - Eigen::Vector3d::Ones()) / 2.0;
  const Eigen::Vector3d semi = 0.42 * dims.cast<double>();

  // Smooth random-phase texture shared by all kinds.
  struct Wave {
    Eigen::Vector3d k;
    double phase;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 4; ++i) {
    Eigen::Vector3d k;
    for (int a = 0; a < 3; ++a) k[a] = rng.uniform(0.5, 2.0) * 2.0 * M_PI / dims[a];
    waves.push_back({k, rng.uniform(0.0, 2.0 * M_PI)});
  }
  auto texture = [&](const Eigen::Vector3d& p) {
    double t = 0.0;
    for (const auto& w : waves) t += std::sin(w.k.dot(p) + w.phase);
    return t / static_cast<double>(waves.size());
  };

  // Inner ellipsoids for the "ellipsoids" kind.
  struct Blob {
    Eigen::Vector3d center, semi;
    double intensity;
  };
  std::vector<Blob> blobs;
  for (int i = 0; i < 3; ++i) {
    Blob b;
    for (int a = 0; a < 3; ++a) {
      b.center[a] = c[a] + rng.uniform(-0.2, 0.2) * dims[a];
      b.semi[a] = rng.uniform(0.08, 0.2) * dims[a];
    }
    b.intensity = rng.uniform(0.3, 0.95);
    blobs.push_back(b);
  }

  for (int z = 0; z < dims.z(); ++z)
    for (int y = 0; y < dims.y(); ++y)
      for (int x = 0; x < dims.x(); ++x) {
        const Eigen::Vector3d p(x, y, z);
        const Eigen::Vector3d q = (p - c).cwiseQuotient(semi);
        const double rho2 = q.squaredNorm();
        double value = 0.0;
        if (rho2 <= 1.0) {
          switch (kind) {
            case PhantomKind::ellipsoids: {
              value = 0.45 + 0.15 * texture(p);
              for (const auto& b : blobs) {
                const Eigen::Vector3d u = (p - b.center).cwiseQuotient(b.semi);
                if (u.squaredNorm() <= 1.0) value = b.intensity + 0.1 * texture(p);
              }
              break;
            }
            case PhantomKind::checker: {
              value = 0.55 + 0.4 * std::sin(2.0 * M_PI * x / 8.0) *
                                  std::sin(2.0 * M_PI * y / 8.0) *
                                  std::sin(2.0 * M_PI * z / 8.0);
              break;
            }
            case PhantomKind::shell: {
              const double rho = std::sqrt(rho2);
              value = rho > 0.8 ? 0.9 : 0.25 + 0.1 * texture(p);
              value = std::max(value, 0.05);
              break;
            }
          }
        }
        v.at(x, y, z) = std::clamp(value, 0.0, 1.0);
      }

  std::fill(v.weight.begin(), v.weight.end(), 1.0);
  return v;
}

MotionConfig motion_config_from_json(const json& j) {
  MotionConfig c;
  c.bulk_inplane_rot_range_deg = j.value("bulk_inplane_rot_range_deg", c.bulk_inplane_rot_range_deg);
  c.n_perturbations_min = j.value("n_perturbations_min", c.n_perturbations_min);
  c.n_perturbations_max = j.value("n_perturbations_max", c.n_perturbations_max);
  c.rot_sigma_deg = j.value("rot_sigma_deg", c.rot_sigma_deg);
  c.trans_range_mm = j.value("trans_range_mm", c.trans_range_mm);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.bias_amplitude = j.value("bias_amplitude", c.bias_amplitude);
  c.gamma_min = j.value("gamma_min", c.gamma_min);
  c.gamma_max = j.value("gamma_max", c.gamma_max);
  c.seed = j.value("seed", c.seed);
  if (c.n_perturbations_min < 1 || c.n_perturbations_max < c.n_perturbations_min ||
      c.rot_sigma_deg < 0.0 || c.trans_range_mm < 0.0 || c.noise_sigma < 0.0)
    throw IoError(IoErrorCode::malformed_header, "invalid motion config values", "motion");
  return c;
}

json motion_config_to_json(const MotionConfig& c) {
  json j;
  j["bulk_inplane_rot_range_deg"] = c.bulk_inplane_rot_range_deg;
  j["n_perturbations_min"] = c.n_perturbations_min;
  j["n_perturbations_max"] = c.n_perturbations_max;
  j["rot_sigma_deg"] = c.rot_sigma_deg;
  j["trans_range_mm"] = c.trans_range_mm;
  j["noise_sigma"] = c.noise_sigma;
  j["bias_amplitude"] = c.bias_amplitude;
  j["gamma_min"] = c.gamma_min;
  j["gamma_max"] = c.gamma_max;
  j["seed"] = c.seed;
  return j;
}

ReconConfig recon_config_from_json(const json& j) {
  ReconConfig c;
  c.outer_iters = j.value("outer_iters", c.outer_iters);
  c.inner_recon_iters = j.value("inner_recon_iters", c.inner_recon_iters);
  c.cg_tol = j.value("cg_tol", c.cg_tol);
  c.pose_step_tol = j.value("pose_step_tol", c.pose_step_tol);
  c.pose_max_iters = j.value("pose_max_iters", c.pose_max_iters);
  c.pyramid_levels = j.value("pyramid_levels", c.pyramid_levels);
  c.flow_iters_per_level = j.value("flow_iters_per_level", c.flow_iters_per_level);
  c.flow_max_disp = j.value("flow_max_disp", c.flow_max_disp);
  c.flow.window = j.value("flow_window", c.flow.window);
  c.flow.tikhonov = j.value("flow_tikhonov", c.flow.tikhonov);
  c.flow.gain = j.value("flow_gain", c.flow.gain);
  c.deterministic = j.value("deterministic", c.deterministic);
  c.validate();
  return c;
}

json recon_config_to_json(const ReconConfig& c) {
  json j;
  j["outer_iters"] = c.outer_iters;
  j["inner_recon_iters"] = c.inner_recon_iters;
  j["cg_tol"] = c.cg_tol;
  j["pose_step_tol"] = c.pose_step_tol;
  j["pose_max_iters"] = c.pose_max_iters;
  j["pyramid_levels"] = c.pyramid_levels;
  j["flow_iters_per_level"] = c.flow_iters_per_level;
  j["flow_max_disp"] = c.flow_max_disp;
  j["flow_window"] = c.flow.window;
  j["flow_tikhonov"] = c.flow.tikhonov;
  j["flow_gain"] = c.flow.gain;
  j["deterministic"] = c.deterministic;
  return j;
}

uint64_t config_hash(const json& j) {
  const std::string text = j.dump();
  uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    hash ^= ch;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

void write_manifest(const fs::path& dir, const std::string& command, const json& inputs,
                    const json& config, std::optional<uint64_t> seed) {
  json m;
  m["command"] = command;
  m["inputs"] = inputs;
  m["config"] = config;
  m["config_hash"] = config_hash(config);
  if (seed) m["seed"] = *seed;
  m["format_version"] = 1;
  atomic_write(dir / "manifest.json", m.dump(2) + "\n");
}

}  // namespace svr
