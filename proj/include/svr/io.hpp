#pragma once

#include <filesystem>
#include <json.hpp>
#include <optional>
#include <string>

#include "svr/forward_model.hpp"
#include "svr/motion_sim.hpp"
#include "svr/optim.hpp"

namespace svr {

enum class IoErrorCode {
  malformed_header,
  truncated_payload,
  dtype_mismatch,
  dims_mismatch,
  missing_file,
};

std::string to_string(IoErrorCode code);

struct IoError : std::runtime_error {
  IoErrorCode code;
  std::string field;  // offending header field, when known

  IoError(IoErrorCode c, const std::string& message, std::string bad_field = {})
      : std::runtime_error(message), code(c), field(std::move(bad_field)) {}
};

/// Atomic file write: temp file in the same directory, then rename.
void atomic_write(const std::filesystem::path& path, const std::string& bytes);

// JSON header + raw little-endian f32 payload (x-fastest), optional byte
// mask; all under <base>.json / <base>.raw / <base>.mask.
void write_volume(const std::filesystem::path& base, const Volume& volume);
Volume read_volume(const std::filesystem::path& base);

void write_stack(const std::filesystem::path& base, const SliceStack& stack,
                 const std::vector<RigidTransform>* poses = nullptr,
                 std::optional<uint64_t> seed = std::nullopt);
struct StackFile {
  SliceStack stack;
  std::vector<RigidTransform> poses;  // empty when the header carries none
  std::optional<uint64_t> seed;
};
StackFile read_stack(const std::filesystem::path& base);

void write_field(const std::filesystem::path& base, const DisplacementField& field);
DisplacementField read_field(const std::filesystem::path& base);

nlohmann::json transform_to_json(const RigidTransform& t);  // 12 numbers, row-major R then t
RigidTransform transform_from_json(const nlohmann::json& j);

enum class PhantomKind { ellipsoids, checker, shell };
PhantomKind phantom_kind_from_string(const std::string& s);

/// Deterministic procedural phantom with smooth internal structure and a
/// bounded foreground; intensities in [0, 1], spacing 1 mm.
Volume make_phantom(PhantomKind kind, const Eigen::Vector3i& dims, uint64_t seed);

MotionConfig motion_config_from_json(const nlohmann::json& j);
nlohmann::json motion_config_to_json(const MotionConfig& c);
ReconConfig recon_config_from_json(const nlohmann::json& j);
nlohmann::json recon_config_to_json(const ReconConfig& c);

/// FNV-1a of the canonical (dumped) JSON text; stable across runs.
uint64_t config_hash(const nlohmann::json& j);

void write_manifest(const std::filesystem::path& dir, const std::string& command,
                    const nlohmann::json& inputs, const nlohmann::json& config,
                    std::optional<uint64_t> seed);

}  // namespace svr
