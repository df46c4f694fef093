#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "emask/params.hpp"

namespace emask {

inline constexpr uint32_t kCheckpointFormatVersion = 1;

// Versioned binary container for parameter blobs.
//
// Layout: magic "EMSKCKPT", u32 format version, u64 payload size, payload,
// u64 FNV-1a digest of the payload. The payload is only parsed after the
// digest verifies, so a damaged file never yields a partial load.
struct CheckpointManifest {
  uint32_t format_version = kCheckpointFormatVersion;
  int32_t stage_completed = 0;
  std::string config_hash;
  std::string rng_state;
  std::map<std::string, ParamSet> components;
  std::map<std::string, std::string> blobs;  // opaque byte strings (optimizer state, metadata)
};

void save_checkpoint(const std::filesystem::path& path, const CheckpointManifest& manifest);
CheckpointManifest load_checkpoint(const std::filesystem::path& path);

// In-memory variants used by the file functions.
std::string encode_checkpoint(const CheckpointManifest& manifest);
CheckpointManifest decode_checkpoint(const std::string& bytes);

}  // namespace emask
