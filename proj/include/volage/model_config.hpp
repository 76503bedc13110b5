#ifndef VOLAGE_MODEL_CONFIG_HPP
#define VOLAGE_MODEL_CONFIG_HPP

#include <optional>
#include <string>
#include <vector>

#include "volage/ops.hpp"

namespace volage {

enum class AttentionMode { Shared, PerLayer, None };

std::string to_string(AttentionMode mode);
AttentionMode parse_attention_mode(const std::string& text);

/// Architecture description. Defaults are the published network: seven
/// conv -> relu -> maxpool -> attention stages, then five dense layers.
struct ModelConfig {
  std::vector<Index> conv_channels{12, 16, 32, 64, 128, 512, 1024};
  Triple conv_kernel{2, 2, 2};
  Triple conv_stride{1, 1, 1};
  Triple conv_padding{1, 1, 1};
  Triple pool_extent{2, 2, 2};
  Triple pool_stride{2, 2, 2};
  std::vector<Index> dense_widths{512, 128, 64, 12, 1};
  AttentionMode attention_mode = AttentionMode::Shared;
  Index attention_kernel = 7;
  double dropout_conv = 0.3;
  double dropout_dense = 0.3;
  Triple input_shape{91, 109, 91};
  // When set, the flattened feature length must equal this value.
  std::optional<Index> dense_input;

  ConvSpec conv_spec(std::size_t layer) const;
  PoolSpec pool_spec() const { return PoolSpec{pool_extent, pool_stride}; }
  std::size_t conv_layers() const { return conv_channels.size(); }
  std::size_t attention_sets() const;

  /// Throws ConfigError on any violated field invariant.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TraceEntry {
  std::string label;  // e.g. "conv3", "pool3"
  Index channels;
  Triple extents;
};

struct ShapeTrace {
  std::vector<TraceEntry> entries;
  Index flatten_length = 0;

  std::string to_string() const;
};

/// Per-stage shapes implied by the config. Throws ShapeError carrying the
/// trace so far when an extent collapses or the flatten length contradicts
/// dense_input.
ShapeTrace trace_shapes(const ModelConfig& config);

struct LayerParameterCount {
  std::string name;
  Index weights;
  Index biases;
  Index total() const { return weights + biases; }
};

/// Closed-form parameter table, one row per layer (attention sets included).
std::vector<LayerParameterCount> parameter_table(const ModelConfig& config);
Index parameter_count(const ModelConfig& config);

}  // namespace volage

#endif  // VOLAGE_MODEL_CONFIG_HPP
