#include "volage/model_config.hpp"

#include <sstream>

#include "volage/attention.hpp"

namespace volage {

std::string to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::Shared: return "shared";
    case AttentionMode::PerLayer: return "per_layer";
    case AttentionMode::None: return "none";
  }
  return "?";
}

AttentionMode parse_attention_mode(const std::string& text) {
  if (text == "shared") return AttentionMode::Shared;
  if (text == "per_layer") return AttentionMode::PerLayer;
  if (text == "none") return AttentionMode::None;
  throw ConfigError("attention_mode must be shared, per_layer or none, got '" + text + "'");
}

ConvSpec ModelConfig::conv_spec(std::size_t layer) const {
  const Index in = layer == 0 ? 1 : conv_channels.at(layer - 1);
  return ConvSpec{conv_kernel, conv_stride, conv_padding, in, conv_channels.at(layer)};
}

std::size_t ModelConfig::attention_sets() const {
  switch (attention_mode) {
    case AttentionMode::Shared: return 1;
    case AttentionMode::PerLayer: return conv_layers();
    case AttentionMode::None: return 0;
  }
  return 0;
}

void ModelConfig::validate() const {
  if (conv_channels.empty()) throw ConfigError("conv_channels must not be empty");
  for (Index c : conv_channels)
    if (c < 1) throw ConfigError("conv_channels entries must be positive");
  if (dense_widths.empty()) throw ConfigError("dense_widths must not be empty");
  for (Index w : dense_widths)
    if (w < 1) throw ConfigError("dense_widths entries must be positive");
  if (dense_widths.back() != 1)
    throw ConfigError("last dense width must be 1 (scalar age), got " +
                      std::to_string(dense_widths.back()));
  for (std::size_t a = 0; a < 3; ++a) {
    if (conv_kernel[a] < 1 || conv_stride[a] < 1 || conv_padding[a] < 0)
      throw ConfigError("conv_kernel/conv_stride must be >= 1 and conv_padding >= 0");
    if (pool_extent[a] < 1 || pool_stride[a] < 1)
      throw ConfigError("pool_extent and pool_stride must be >= 1");
    if (input_shape[a] < 1) throw ConfigError("input_shape extents must be >= 1");
  }
  if (attention_mode != AttentionMode::None && (attention_kernel < 1 || attention_kernel % 2 == 0))
    throw ConfigError("attention_kernel must be a positive odd integer, got " +
                      std::to_string(attention_kernel));
  for (double r : {dropout_conv, dropout_dense})
    if (!(r >= 0.0) || r >= 1.0)
      throw ConfigError("dropout rates must lie in [0, 1), got " + std::to_string(r));
  if (dense_input && *dense_input < 1) throw ConfigError("dense_input must be positive");
}

std::string ShapeTrace::to_string() const {
  std::ostringstream os;
  for (const auto& e : entries)
    os << e.label << ": " << e.channels << " x " << shape_string({e.extents[0], e.extents[1], e.extents[2]})
       << '\n';
  os << "flatten: " << flatten_length << '\n';
  return os.str();
}

ShapeTrace trace_shapes(const ModelConfig& config) {
  config.validate();
  ShapeTrace trace;
  Triple ext = config.input_shape;
  trace.entries.push_back({"input", 1, ext});
  const PoolSpec pool = config.pool_spec();
  auto fail = [&](const std::string& why) {
    throw ShapeError(why + "\nderived shape trace:\n" + trace.to_string());
  };
  for (std::size_t l = 0; l < config.conv_layers(); ++l) {
    const ConvSpec spec = config.conv_spec(l);
    const Triple conv = spec.output_extents(ext);
    if (conv[0] < 1 || conv[1] < 1 || conv[2] < 1)
      fail("conv" + std::to_string(l + 1) + " output collapses");
    trace.entries.push_back({"conv" + std::to_string(l + 1), spec.out_channels, conv});
    const Triple pooled = pool.output_extents(conv);
    if (pooled[0] < 1 || pooled[1] < 1 || pooled[2] < 1)
      fail("pool" + std::to_string(l + 1) + " input smaller than pooling extent");
    trace.entries.push_back({"pool" + std::to_string(l + 1), spec.out_channels, pooled});
    ext = pooled;
  }
  trace.flatten_length = config.conv_channels.back() * ext[0] * ext[1] * ext[2];
  if (config.dense_input && *config.dense_input != trace.flatten_length)
    fail("flatten length " + std::to_string(trace.flatten_length) +
         " does not match first dense input width " + std::to_string(*config.dense_input));
  return trace;
}

std::vector<LayerParameterCount> parameter_table(const ModelConfig& config) {
  const ShapeTrace trace = trace_shapes(config);
  std::vector<LayerParameterCount> rows;
  const Triple k = config.conv_kernel;
  for (std::size_t l = 0; l < config.conv_layers(); ++l) {
    const ConvSpec spec = config.conv_spec(l);
    rows.push_back({"conv" + std::to_string(l + 1),
                    spec.in_channels * spec.out_channels * k[0] * k[1] * k[2], spec.out_channels});
  }
  const std::size_t sets = config.attention_sets();
  for (std::size_t s = 0; s < sets; ++s) {
    const Index ka = config.attention_kernel;
    rows.push_back({sets == 1 ? std::string("attention") : "attention" + std::to_string(s + 1),
                    2 * ka * ka * ka, 1});
  }
  Index fan_in = trace.flatten_length;
  for (std::size_t j = 0; j < config.dense_widths.size(); ++j) {
    const Index out = config.dense_widths[j];
    rows.push_back({"dense" + std::to_string(j + 1), fan_in * out, out});
    fan_in = out;
  }
  return rows;
}

Index parameter_count(const ModelConfig& config) {
  Index total = 0;
  for (const auto& row : parameter_table(config)) total += row.total();
  return total;
}

}  // namespace volage
