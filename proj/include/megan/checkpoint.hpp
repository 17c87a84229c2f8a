#pragma once

// Binary checkpoint: "MGAN", u32 version, u64 header length, JSON header
// (config, metadata, tensor directory), base section, hypernet section, then
// one SHA-256 digest per section (header, base, hyper). Buffers are
// little-endian IEEE doubles.

#include <cstdint>
#include <filesystem>
#include <optional>

#include "json.hpp"
#include "megan/hypernet.hpp"
#include "megan/model.hpp"
#include "megan/model_config.hpp"

namespace megan {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  BaseWeights base;
  std::optional<HypernetParams> hyper;
  nlohmann::json meta = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const BaseWeights& base,
                     const HypernetParams* hyper, const ModelConfig& config,
                     const nlohmann::json& meta = nlohmann::json::object());

/// Throws VersionError, ChecksumError or TruncatedError; nothing is returned on failure.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace megan
