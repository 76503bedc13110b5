#ifndef VOLAGE_ATTENTION_HPP
#define VOLAGE_ATTENTION_HPP

// Spatial attention: a per-voxel gate in (0,1) computed from the channel-max and
// channel-mean descriptors of a feature map, then multiplied into that map.
// One parameter set may be referenced by several sites; their gradient
// contributions are summed in site order.

#include <span>
#include <string>
#include <vector>

#include "volage/ops.hpp"

namespace volage {

template <typename Scalar>
struct AttentionParams {
  Tensor<Scalar> kernel;  // [1, 2, ka, ka, ka]; input channel 0 = channel max, 1 = channel mean
  Tensor<Scalar> bias;    // [1]

  AttentionParams() = default;

  explicit AttentionParams(Index ka) {
    if (ka < 1 || ka % 2 == 0)
      throw ConfigError("attention kernel extent must be a positive odd integer, got " +
                        std::to_string(ka));
    kernel = Tensor<Scalar>({1, 2, ka, ka, ka});
    bias = Tensor<Scalar>({1});
  }

  AttentionParams(Tensor<Scalar> k, Tensor<Scalar> b) : kernel(std::move(k)), bias(std::move(b)) {
    detail::require_rank(kernel.shape(), 5, "AttentionParams", "kernel");
    const Index ka = kernel.dim(2);
    if (ka % 2 == 0)
      throw ConfigError("attention kernel extent must be odd, got " + std::to_string(ka));
    detail::require_same(kernel.shape(), {1, 2, ka, ka, ka}, "AttentionParams", "kernel");
    detail::require_same(bias.shape(), {1}, "AttentionParams", "bias");
  }

  Index extent() const { return kernel.dim(2); }
  Index parameter_count() const { return kernel.size() + bias.size(); }

  ConvSpec conv_spec() const {
    const Index ka = extent(), pad = (ka - 1) / 2;
    return ConvSpec{{ka, ka, ka}, {1, 1, 1}, {pad, pad, pad}, 2, 1};
  }

  AttentionParams& operator+=(const AttentionParams& other) {
    kernel += other.kernel;
    bias += other.bias;
    return *this;
  }

  friend bool operator==(const AttentionParams& a, const AttentionParams& b) {
    return a.kernel == b.kernel && a.bias == b.bias;
  }
};

inline Index attention_parameter_count(Index ka) { return 2 * ka * ka * ka + 1; }

template <typename Scalar>
struct AttentionSiteCache {
  ChannelReduceCache max_cache;
  ChannelReduceCache mean_cache;
  ConvCache<Scalar> conv_cache;
  ActivationCache<Scalar> sigmoid_cache;
  ModulateCache<Scalar> modulate_cache;
};

template <typename Scalar>
struct AttentionResult {
  Tensor<Scalar> map;     // W^(l): [N,1,D,H,W]
  Tensor<Scalar> output;  // Y^(l) = W^(l) * X^(l)
  AttentionSiteCache<Scalar> cache;
};

template <typename Scalar>
AttentionResult<Scalar> attention_forward(const Tensor<Scalar>& x,
                                          const AttentionParams<Scalar>& theta) {
  detail::require_rank(x.shape(), 5, "attention_forward", "input");
  auto [max_map, max_cache] = channel_reduce(x, ChannelReduce::Max);
  auto [mean_map, mean_cache] = channel_reduce(x, ChannelReduce::Mean);
  const Tensor<Scalar> descriptor = concat_channels(max_map, mean_map);
  auto [logits, conv_cache] = conv3d_forward(descriptor, theta.kernel, theta.bias, theta.conv_spec());
  auto [map, sigmoid_cache] = sigmoid(logits);
  auto [y, modulate_cache] = elementwise_mul_broadcast(map, x);
  return {std::move(map), std::move(y),
          AttentionSiteCache<Scalar>{std::move(max_cache), std::move(mean_cache),
                                     std::move(conv_cache), std::move(sigmoid_cache),
                                     std::move(modulate_cache)}};
}

template <typename Scalar>
struct AttentionGrads {
  Tensor<Scalar> input;
  AttentionParams<Scalar> theta;
};

/// Gradient w.r.t. the site input (direct modulation path plus the path through
/// the map) and this site's contribution to the attention parameters.
template <typename Scalar>
AttentionGrads<Scalar> attention_backward(const AttentionSiteCache<Scalar>& cache,
                                          const Tensor<Scalar>& dy) {
  auto mod = elementwise_mul_broadcast_backward(cache.modulate_cache, dy);
  const Tensor<Scalar> dlogits = sigmoid_backward(cache.sigmoid_cache, mod.map);
  auto conv = conv3d_backward(cache.conv_cache, dlogits);
  auto [dmax, dmean] = concat_channels_backward(conv.input);
  Tensor<Scalar> dx = std::move(mod.input);
  dx += channel_reduce_backward(cache.max_cache, dmax);
  dx += channel_reduce_backward(cache.mean_cache, dmean);
  return {std::move(dx), AttentionParams<Scalar>{std::move(conv.weights), std::move(conv.bias)}};
}

/// Sum of per-site contributions, folded left in site order.
template <typename Scalar>
AttentionParams<Scalar> accumulate_shared_grad(std::span<const AttentionParams<Scalar>> parts) {
  if (parts.empty()) throw ConfigError("accumulate_shared_grad: no contributions");
  AttentionParams<Scalar> total = parts.front();
  for (std::size_t l = 1; l < parts.size(); ++l) {
    parts[l].kernel.require_same_shape(total.kernel, "accumulate_shared_grad");
    total += parts[l];
  }
  return total;
}

template <typename Scalar>
AttentionParams<Scalar> accumulate_shared_grad(const std::vector<AttentionParams<Scalar>>& parts) {
  return accumulate_shared_grad(std::span<const AttentionParams<Scalar>>(parts));
}

}  // namespace volage

#endif  // VOLAGE_ATTENTION_HPP
