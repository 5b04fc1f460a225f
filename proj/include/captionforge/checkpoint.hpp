#pragma once

#include <filesystem>

#include <json.hpp>

#include "captionforge/model.hpp"

namespace captionforge {

nlohmann::json to_json(const ModelConfig& config);
/// Rejects unknown keys; missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

struct Checkpoint {
  Model model;
  nlohmann::json metadata;  // vocabulary, training provenance
};

/// Container layout (little-endian):
///   "VCK1" | u32 version = 1 | u32 L | L bytes of JSON {"model", "metadata"}
///   | u32 tensor count | per tensor: u32 name length, name, u32 rank,
///   rank x u32 extents, float32 values | u64 sum of bytes 8..end of tensors.
void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const nlohmann::json& metadata);
Checkpoint load_checkpoint(const std::filesystem::path& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace captionforge
