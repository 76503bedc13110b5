#ifndef VOLAGE_MODEL_HPP
#define VOLAGE_MODEL_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "volage/attention.hpp"
#include "volage/model_config.hpp"

namespace volage {

/// Every trainable tensor of a network. Also used, unchanged, to hold gradients.
template <typename Scalar>
struct ModelParams {
  std::vector<Tensor<Scalar>> conv_weights;  // [Cout, Cin, kd, kh, kw]
  std::vector<Tensor<Scalar>> conv_biases;   // [Cout]
  std::vector<AttentionParams<Scalar>> attention;
  std::vector<Tensor<Scalar>> dense_weights;  // [F, G]
  std::vector<Tensor<Scalar>> dense_biases;   // [G]

  /// Zero-filled tensors with the shapes of `like`.
  static ModelParams zeros_like(const ModelParams& like) {
    ModelParams z = like;
    z.for_each([](const std::string&, Tensor<Scalar>& t) { t.set_zero(); });
    return z;
  }

  /// Visits every tensor in checkpoint order: conv layers, attention sets, dense layers.
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  Index parameter_count() const {
    Index n = 0;
    for_each([&](const std::string&, const Tensor<Scalar>& t) { n += t.size(); });
    return n;
  }

  template <typename Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out;
    for (const auto& t : conv_weights) out.conv_weights.push_back(t.template cast<Other>());
    for (const auto& t : conv_biases) out.conv_biases.push_back(t.template cast<Other>());
    for (const auto& a : attention)
      out.attention.emplace_back(a.kernel.template cast<Other>(), a.bias.template cast<Other>());
    for (const auto& t : dense_weights) out.dense_weights.push_back(t.template cast<Other>());
    for (const auto& t : dense_biases) out.dense_biases.push_back(t.template cast<Other>());
    return out;
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    for (std::size_t l = 0; l < self.conv_weights.size(); ++l) {
      f("conv" + std::to_string(l + 1) + ".weight", self.conv_weights[l]);
      f("conv" + std::to_string(l + 1) + ".bias", self.conv_biases[l]);
    }
    const bool single = self.attention.size() == 1;
    for (std::size_t s = 0; s < self.attention.size(); ++s) {
      const std::string base = single ? std::string("attention") : "attention" + std::to_string(s + 1);
      f(base + ".kernel", self.attention[s].kernel);
      f(base + ".bias", self.attention[s].bias);
    }
    for (std::size_t j = 0; j < self.dense_weights.size(); ++j) {
      f("dense" + std::to_string(j + 1) + ".weight", self.dense_weights[j]);
      f("dense" + std::to_string(j + 1) + ".bias", self.dense_biases[j]);
    }
  }
};

template <typename Scalar>
struct StageCache {
  ConvCache<Scalar> conv;
  ActivationCache<Scalar> relu;
  PoolCache pool;
  std::optional<AttentionSiteCache<Scalar>> attention;
};

template <typename Scalar>
struct ForwardCache {
  std::vector<StageCache<Scalar>> stages;
  DropoutCache<Scalar> conv_dropout;
  Shape flatten_from;
  std::vector<DenseCache<Scalar>> dense;
  std::vector<ActivationCache<Scalar>> dense_relu;
  DropoutCache<Scalar> dense_dropout;
  // Stage features: X^(l) entering attention and Y^(l) leaving it.
  std::vector<Tensor<Scalar>> pre_attention;
  std::vector<Tensor<Scalar>> post_attention;
  std::vector<Tensor<Scalar>> attention_maps;
  const void* owner = nullptr;
  std::uint64_t generation = 0;
};

template <typename Scalar>
struct ForwardResult {
  Tensor<Scalar> predictions;  // [N]
  ForwardCache<Scalar> cache;
};

template <typename Scalar>
struct BackwardResult {
  ModelParams<Scalar> grads;
  Tensor<Scalar> input;                          // dL/d(batch)
  std::vector<Tensor<Scalar>> post_attention;    // dL/dY^(l)
  std::vector<Tensor<Scalar>> pre_attention;     // dL/dX^(l)
  std::vector<AttentionParams<Scalar>> site_theta;  // per-site attention contributions
};

/// Dropout site counters inside one forward call.
inline constexpr std::uint64_t kConvDropoutSite = 0;
inline constexpr std::uint64_t kDenseDropoutSite = 1;

template <typename Scalar>
class BrainAgeModel {
 public:
  BrainAgeModel(ModelConfig config, ModelParams<Scalar> params)
      : config_(std::move(config)), params_(std::move(params)) {
    check_params();
  }

  const ModelConfig& config() const { return config_; }
  const ModelParams<Scalar>& params() const { return params_; }

  /// Mutable access invalidates outstanding forward caches.
  ModelParams<Scalar>& mutable_params() {
    ++generation_;
    return params_;
  }
  std::uint64_t generation() const { return generation_; }

  /// Parameters used by attention site `layer` (0-based).
  const AttentionParams<Scalar>& site_params(std::size_t layer) const {
    return config_.attention_mode == AttentionMode::Shared ? params_.attention.front()
                                                           : params_.attention.at(layer);
  }

  Index parameter_count() const { return params_.parameter_count(); }

  template <typename Other>
  BrainAgeModel<Other> cast() const {
    return BrainAgeModel<Other>(config_, params_.template cast<Other>());
  }

 private:
  void check_params() const {
    config_.validate();
    const ShapeTrace trace = trace_shapes(config_);
    const std::size_t L = config_.conv_layers(), J = config_.dense_widths.size();
    if (params_.conv_weights.size() != L || params_.conv_biases.size() != L ||
        params_.dense_weights.size() != J || params_.dense_biases.size() != J ||
        params_.attention.size() != config_.attention_sets())
      throw ShapeError("model parameters do not match the config layer counts");
    for (std::size_t l = 0; l < L; ++l) {
      const ConvSpec s = config_.conv_spec(l);
      detail::require_same(params_.conv_weights[l].shape(),
                           {s.out_channels, s.in_channels, s.kernel[0], s.kernel[1], s.kernel[2]},
                           "BrainAgeModel", "conv weights");
      detail::require_same(params_.conv_biases[l].shape(), {s.out_channels}, "BrainAgeModel",
                           "conv bias");
    }
    for (const auto& a : params_.attention)
      if (a.extent() != config_.attention_kernel)
        throw ShapeError("attention kernel extent does not match config");
    Index fan_in = trace.flatten_length;
    for (std::size_t j = 0; j < J; ++j) {
      detail::require_same(params_.dense_weights[j].shape(), {fan_in, config_.dense_widths[j]},
                           "BrainAgeModel", "dense weights");
      detail::require_same(params_.dense_biases[j].shape(), {config_.dense_widths[j]},
                           "BrainAgeModel", "dense bias");
      fan_in = config_.dense_widths[j];
    }
  }

  ModelConfig config_;
  ModelParams<Scalar> params_;
  std::uint64_t generation_ = 0;
};

namespace detail {

// Uniform in [-bound, bound) from the top 53 bits of the stream.
template <typename Scalar>
void fill_uniform(Tensor<Scalar>& t, double bound, std::mt19937_64& rng) {
  for (Index i = 0; i < t.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    t[i] = static_cast<Scalar>((2.0 * u - 1.0) * bound);
  }
}

}  // namespace detail

/// Kernels uniform in +-sqrt(6/fan_in), biases zero; draws run conv layers,
/// dense layers, then one attention set that every site copy starts from, so
/// shared and per-layer models built from one seed begin with equal values.
template <typename Scalar = float>
BrainAgeModel<Scalar> build(const ModelConfig& config, std::uint64_t seed) {
  const ShapeTrace trace = trace_shapes(config);
  std::mt19937_64 rng(seed);
  ModelParams<Scalar> p;
  for (std::size_t l = 0; l < config.conv_layers(); ++l) {
    const ConvSpec s = config.conv_spec(l);
    Tensor<Scalar> w({s.out_channels, s.in_channels, s.kernel[0], s.kernel[1], s.kernel[2]});
    const Index fan_in = s.in_channels * s.kernel[0] * s.kernel[1] * s.kernel[2];
    detail::fill_uniform(w, std::sqrt(6.0 / static_cast<double>(fan_in)), rng);
    p.conv_weights.push_back(std::move(w));
    p.conv_biases.emplace_back(Shape{s.out_channels});
  }
  Index fan_in = trace.flatten_length;
  for (Index width : config.dense_widths) {
    Tensor<Scalar> w({fan_in, width});
    detail::fill_uniform(w, std::sqrt(6.0 / static_cast<double>(fan_in)), rng);
    p.dense_weights.push_back(std::move(w));
    p.dense_biases.emplace_back(Shape{width});
    fan_in = width;
  }
  if (config.attention_mode != AttentionMode::None) {
    AttentionParams<Scalar> theta(config.attention_kernel);
    detail::fill_uniform(theta.kernel, std::sqrt(6.0 / static_cast<double>(theta.kernel.size())),
                         rng);
    p.attention.assign(config.attention_sets(), theta);
  }
  return BrainAgeModel<Scalar>(config, std::move(p));
}

template <typename Scalar>
Index param_count(const BrainAgeModel<Scalar>& model) {
  return model.parameter_count();
}

template <typename Scalar>
ForwardResult<Scalar> forward(const BrainAgeModel<Scalar>& model, const Tensor<Scalar>& batch,
                              bool training, std::uint64_t seed = 0) {
  const ModelConfig& cfg = model.config();
  detail::require_rank(batch.shape(), 5, "forward", "batch");
  detail::require_same(batch.shape(),
                       {batch.dim(0), 1, cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]},
                       "forward", "batch");
  const ModelParams<Scalar>& p = model.params();
  ForwardCache<Scalar> cache;
  cache.owner = &model;
  cache.generation = model.generation();

  Tensor<Scalar> h = batch;
  for (std::size_t l = 0; l < cfg.conv_layers(); ++l) {
    StageCache<Scalar> stage;
    auto conv = conv3d_forward(h, p.conv_weights[l], p.conv_biases[l], cfg.conv_spec(l));
    auto act = relu(conv.output);
    auto pooled = maxpool3d_forward(act.output, cfg.pool_spec());
    stage.conv = std::move(conv.cache);
    stage.relu = std::move(act.cache);
    stage.pool = std::move(pooled.cache);
    cache.pre_attention.push_back(pooled.output);
    if (cfg.attention_mode != AttentionMode::None) {
      auto att = attention_forward(pooled.output, model.site_params(l));
      h = std::move(att.output);
      cache.attention_maps.push_back(std::move(att.map));
      stage.attention = std::move(att.cache);
    } else {
      h = std::move(pooled.output);
    }
    cache.post_attention.push_back(h);
    cache.stages.push_back(std::move(stage));
  }

  auto drop = dropout(h, cfg.dropout_conv, seed, kConvDropoutSite, training);
  cache.conv_dropout = std::move(drop.cache);
  cache.flatten_from = h.shape();
  const Index N = batch.dim(0);
  h = drop.output.reshaped({N, drop.output.size() / N});

  const std::size_t J = cfg.dense_widths.size();
  for (std::size_t j = 0; j < J; ++j) {
    auto d = dense_forward(h, p.dense_weights[j], p.dense_biases[j]);
    cache.dense.push_back(std::move(d.cache));
    h = std::move(d.output);
    if (j + 1 < J) {
      auto a = relu(h);
      cache.dense_relu.push_back(std::move(a.cache));
      h = std::move(a.output);
      if (j == 0) {
        auto dd = dropout(h, cfg.dropout_dense, seed, kDenseDropoutSite, training);
        cache.dense_dropout = std::move(dd.cache);
        h = std::move(dd.output);
      }
    }
  }
  return {h.reshaped({N}), std::move(cache)};
}

template <typename Scalar>
BackwardResult<Scalar> backward(const BrainAgeModel<Scalar>& model,
                                const ForwardCache<Scalar>& cache,
                                const Tensor<Scalar>& dloss_dpred) {
  if (cache.owner != &model || cache.generation != model.generation())
    throw StaleCacheError("backward: cache does not come from this model's latest parameters");
  const ModelConfig& cfg = model.config();
  const Index N = cache.flatten_from.front();
  detail::require_same(dloss_dpred.shape(), {N}, "backward", "loss gradient");

  BackwardResult<Scalar> r;
  r.grads = ModelParams<Scalar>::zeros_like(model.params());

  Tensor<Scalar> g = dloss_dpred.reshaped({N, 1});
  const std::size_t J = cfg.dense_widths.size();
  for (std::size_t jj = J; jj-- > 0;) {
    if (jj + 1 < J) {
      if (jj == 0) g = dropout_backward(cache.dense_dropout, g);
      g = relu_backward(cache.dense_relu[jj], g);
    }
    auto d = dense_backward(cache.dense[jj], g);
    r.grads.dense_weights[jj] = std::move(d.weights);
    r.grads.dense_biases[jj] = std::move(d.bias);
    g = std::move(d.input);
  }
  g = dropout_backward(cache.conv_dropout, g.reshaped(cache.flatten_from));

  const std::size_t L = cfg.conv_layers();
  r.post_attention.resize(L);
  r.pre_attention.resize(L);
  std::vector<AttentionParams<Scalar>> sites(L);
  for (std::size_t l = L; l-- > 0;) {
    const StageCache<Scalar>& stage = cache.stages[l];
    r.post_attention[l] = g;
    if (stage.attention) {
      auto a = attention_backward(*stage.attention, g);
      g = std::move(a.input);
      sites[l] = std::move(a.theta);
    }
    r.pre_attention[l] = g;
    g = maxpool3d_backward(stage.pool, g);
    g = relu_backward(stage.relu, g);
    auto c = conv3d_backward(stage.conv, g);
    r.grads.conv_weights[l] = std::move(c.weights);
    r.grads.conv_biases[l] = std::move(c.bias);
    g = std::move(c.input);
  }
  r.input = std::move(g);

  switch (cfg.attention_mode) {
    case AttentionMode::Shared:
      r.grads.attention.front() = accumulate_shared_grad(sites);
      break;
    case AttentionMode::PerLayer:
      r.grads.attention = sites;
      break;
    case AttentionMode::None:
      sites.clear();
      break;
  }
  r.site_theta = std::move(sites);
  return r;
}

using Model = BrainAgeModel<float>;

}  // namespace volage

#endif  // VOLAGE_MODEL_HPP
