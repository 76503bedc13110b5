#ifndef VOLAGE_CONFIG_HPP
#define VOLAGE_CONFIG_HPP

#include <filesystem>
#include <string>

#include <json.hpp>

#include "volage/model_config.hpp"
#include "volage/training.hpp"

namespace volage {

enum class CamTarget { PostAttention, PreAttention };

std::string to_string(CamTarget t);
CamTarget parse_cam_target(const std::string& text);

/// Everything one CLI run needs, as a single flat JSON object. Missing keys
/// keep their defaults; unknown keys are a ConfigError naming the key.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  bool normalize = true;
  double test_fraction = 0.2;
  double bin_width = 3.0;
  CamTarget gradcam_target = CamTarget::PostAttention;

  void validate() const;
};

nlohmann::ordered_json model_config_to_json(const ModelConfig& c);
/// Applies the model keys present in `j`; other keys are ignored.
void apply_model_json(ModelConfig& c, const nlohmann::json& j);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::ordered_json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace volage

#endif  // VOLAGE_CONFIG_HPP
