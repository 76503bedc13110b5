#include "volage/config.hpp"

#include <fstream>
#include <set>

namespace volage {

using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(CamTarget t) { return t == CamTarget::PostAttention ? "post" : "pre"; }

CamTarget parse_cam_target(const std::string& text) {
  if (text == "post") return CamTarget::PostAttention;
  if (text == "pre") return CamTarget::PreAttention;
  throw ConfigError("gradcam_target must be post or pre, got '" + text + "'");
}

namespace {

const std::set<std::string> kModelKeys = {
    "conv_channels", "conv_kernel",  "conv_stride",      "conv_padding",  "pool_extent",
    "pool_stride",   "dense_widths", "attention_mode",   "attention_kernel", "dropout_conv",
    "dropout_dense", "input_shape",  "dense_input"};

const std::set<std::string> kRunKeys = {"epochs", "learning_rate", "batch_size", "seed", "loss",
                                        "shuffle", "init_head_bias", "normalize", "test_fraction", "bin_width",
                                        "gradcam_target"};

template <typename T>
T get_as(const json& j, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

Triple get_triple(const json& j, const std::string& key) {
  const auto v = get_as<std::vector<Index>>(j, key);
  if (v.size() != 3) throw ConfigError("config key '" + key + "' needs exactly 3 entries");
  return {v[0], v[1], v[2]};
}

std::vector<Index> triple_vec(const Triple& t) { return {t[0], t[1], t[2]}; }

}  // namespace

ordered_json model_config_to_json(const ModelConfig& c) {
  ordered_json j;
  j["conv_channels"] = c.conv_channels;
  j["conv_kernel"] = triple_vec(c.conv_kernel);
  j["conv_stride"] = triple_vec(c.conv_stride);
  j["conv_padding"] = triple_vec(c.conv_padding);
  j["pool_extent"] = triple_vec(c.pool_extent);
  j["pool_stride"] = triple_vec(c.pool_stride);
  j["dense_widths"] = c.dense_widths;
  j["attention_mode"] = to_string(c.attention_mode);
  j["attention_kernel"] = c.attention_kernel;
  j["dropout_conv"] = c.dropout_conv;
  j["dropout_dense"] = c.dropout_dense;
  j["input_shape"] = triple_vec(c.input_shape);
  if (c.dense_input) j["dense_input"] = *c.dense_input;
  return j;
}

void apply_model_json(ModelConfig& c, const json& j) {
  if (j.contains("conv_channels")) c.conv_channels = get_as<std::vector<Index>>(j, "conv_channels");
  if (j.contains("conv_kernel")) c.conv_kernel = get_triple(j, "conv_kernel");
  if (j.contains("conv_stride")) c.conv_stride = get_triple(j, "conv_stride");
  if (j.contains("conv_padding")) c.conv_padding = get_triple(j, "conv_padding");
  if (j.contains("pool_extent")) c.pool_extent = get_triple(j, "pool_extent");
  if (j.contains("pool_stride")) c.pool_stride = get_triple(j, "pool_stride");
  if (j.contains("dense_widths")) c.dense_widths = get_as<std::vector<Index>>(j, "dense_widths");
  if (j.contains("attention_mode"))
    c.attention_mode = parse_attention_mode(get_as<std::string>(j, "attention_mode"));
  if (j.contains("attention_kernel")) c.attention_kernel = get_as<Index>(j, "attention_kernel");
  if (j.contains("dropout_conv")) c.dropout_conv = get_as<double>(j, "dropout_conv");
  if (j.contains("dropout_dense")) c.dropout_dense = get_as<double>(j, "dropout_dense");
  if (j.contains("input_shape")) c.input_shape = get_triple(j, "input_shape");
  if (j.contains("dense_input")) {
    if (j.at("dense_input").is_null())
      c.dense_input.reset();
    else
      c.dense_input = get_as<Index>(j, "dense_input");
  }
}

ModelConfig model_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (!kModelKeys.count(key)) throw ConfigError("unknown model config key '" + key + "'");
  ModelConfig c;
  apply_model_json(c, j);
  c.validate();
  return c;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (train.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0))
    throw ConfigError("test_fraction must lie in [0, 1)");
  if (!(bin_width > 0.0)) throw ConfigError("bin_width must be positive");
}

ordered_json to_json(const RunConfig& c) {
  ordered_json j = model_config_to_json(c.model);
  j["epochs"] = c.train.epochs;
  j["learning_rate"] = c.train.learning_rate;
  j["batch_size"] = c.train.batch_size;
  j["seed"] = c.train.seed;
  j["loss"] = to_string(c.train.loss);
  j["shuffle"] = c.train.shuffle;
  j["init_head_bias"] = c.train.init_head_bias;
  j["normalize"] = c.normalize;
  j["test_fraction"] = c.test_fraction;
  j["bin_width"] = c.bin_width;
  j["gradcam_target"] = to_string(c.gradcam_target);
  return j;
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (!kModelKeys.count(key) && !kRunKeys.count(key))
      throw ConfigError("unknown config key '" + key + "'");
  RunConfig c;
  apply_model_json(c.model, j);
  if (j.contains("epochs")) c.train.epochs = get_as<std::size_t>(j, "epochs");
  if (j.contains("learning_rate")) c.train.learning_rate = get_as<double>(j, "learning_rate");
  if (j.contains("batch_size")) c.train.batch_size = get_as<std::size_t>(j, "batch_size");
  if (j.contains("seed")) c.train.seed = get_as<std::uint64_t>(j, "seed");
  if (j.contains("loss")) c.train.loss = parse_loss(get_as<std::string>(j, "loss"));
  if (j.contains("shuffle")) c.train.shuffle = get_as<bool>(j, "shuffle");
  if (j.contains("init_head_bias")) c.train.init_head_bias = get_as<bool>(j, "init_head_bias");
  if (j.contains("normalize")) c.normalize = get_as<bool>(j, "normalize");
  if (j.contains("test_fraction")) c.test_fraction = get_as<double>(j, "test_fraction");
  if (j.contains("bin_width")) c.bin_width = get_as<double>(j, "bin_width");
  if (j.contains("gradcam_target"))
    c.gradcam_target = parse_cam_target(get_as<std::string>(j, "gradcam_target"));
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace volage
