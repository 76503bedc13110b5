#ifndef VOLAGE_CHECKPOINT_HPP
#define VOLAGE_CHECKPOINT_HPP

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "volage/model.hpp"

namespace volage {

// Layout, all integers little-endian:
//   "VOLAGE01"
//   u32 document length, then that many bytes of UTF-8 JSON
//     {"model": <model config>, "meta": <free-form object>}
//   per parameter tensor, in ModelParams::for_each order:
//     u32 rank, u32 extents[rank], f32 values[product(extents)]
// The file ends exactly after the last tensor.

inline constexpr char kCheckpointMagic[8] = {'V', 'O', 'L', 'A', 'G', 'E', '0', '1'};

struct Checkpoint {
  Model model;
  nlohmann::json meta;
};

std::vector<std::uint8_t> serialize_checkpoint(const Model& model,
                                               const nlohmann::json& meta = nlohmann::json::object());
/// Throws CorruptArtifactError on any structural problem.
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const nlohmann::json& meta = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace volage

#endif  // VOLAGE_CHECKPOINT_HPP
