#ifndef VOLAGE_TRAINING_HPP
#define VOLAGE_TRAINING_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "volage/data_io.hpp"
#include "volage/model.hpp"

namespace volage {

// -- metrics -------------------------------------------------------------------

struct Metrics {
  double mae = 0.0;   // years
  double rmse = 0.0;  // years
  std::size_t n = 0;
  std::vector<double> residuals;  // prediction - target, dataset order
};

double mae(std::span<const double> pred, std::span<const double> target);
double rmse(std::span<const double> pred, std::span<const double> target);
Metrics compute_metrics(std::span<const double> pred, std::span<const double> target);

// -- Adam ------------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam on one tensor; `t` is the 1-based step index.
template <typename Scalar>
void adam_update(Tensor<Scalar>& param, const Tensor<Scalar>& grad, Tensor<Scalar>& m,
                 Tensor<Scalar>& v, std::uint64_t t, const AdamConfig& cfg) {
  param.require_same_shape(grad, "adam_update");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const auto b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
  const auto step = static_cast<Scalar>(cfg.learning_rate / c1);
  const auto inv_c2 = static_cast<Scalar>(1.0 / c2);
  const auto eps = static_cast<Scalar>(cfg.epsilon);
  auto& g = grad.array();
  m.array() = b1 * m.array() + (Scalar(1) - b1) * g;
  v.array() = b2 * v.array() + (Scalar(1) - b2) * g * g;
  param.array() -= step * m.array() / ((v.array() * inv_c2).sqrt() + eps);
}

template <typename Scalar>
struct AdamState {
  AdamConfig config;
  ModelParams<Scalar> m;
  ModelParams<Scalar> v;
  std::uint64_t t = 0;

  AdamState() = default;
  AdamState(const ModelParams<Scalar>& like, AdamConfig cfg)
      : config(cfg), m(ModelParams<Scalar>::zeros_like(like)), v(m) {}
};

template <typename Scalar>
void adam_step(ModelParams<Scalar>& params, const ModelParams<Scalar>& grads,
               AdamState<Scalar>& state) {
  std::vector<Tensor<Scalar>*> p, m, v;
  std::vector<const Tensor<Scalar>*> gc;
  params.for_each([&](const std::string&, Tensor<Scalar>& t) { p.push_back(&t); });
  grads.for_each([&](const std::string&, const Tensor<Scalar>& t) { gc.push_back(&t); });
  state.m.for_each([&](const std::string&, Tensor<Scalar>& t) { m.push_back(&t); });
  state.v.for_each([&](const std::string&, Tensor<Scalar>& t) { v.push_back(&t); });
  if (gc.size() != p.size() || m.size() != p.size() || v.size() != p.size())
    throw ShapeError("adam_step: gradient/state layout does not match the parameters");
  for (std::size_t i = 0; i < p.size(); ++i) {
    gc[i]->require_same_shape(*p[i], "adam_step");
    m[i]->require_same_shape(*p[i], "adam_step moment");
  }
  ++state.t;
  for (std::size_t i = 0; i < p.size(); ++i)
    adam_update(*p[i], *gc[i], *m[i], *v[i], state.t, state.config);
}

template <typename Scalar>
void adam_step(BrainAgeModel<Scalar>& model, const ModelParams<Scalar>& grads,
               AdamState<Scalar>& state) {
  adam_step(model.mutable_params(), grads, state);
}

// -- split -------------------------------------------------------------------------

/// Unbiased-enough Fisher-Yates over [0, n) driven by a 64-bit Mersenne stream.
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed, std::uint64_t stream);

struct Split {
  Dataset train;
  Dataset test;
};

/// Bins ages by floor(age / bin_width); in each bin round(fraction * size)
/// subjects (at least one) go to test. Both halves keep manifest order.
Split stratified_split(const Dataset& dataset, double test_fraction = 0.2,
                       double bin_width = 3.0, std::uint64_t seed = 0);

// -- training ------------------------------------------------------------------------

enum class LossKind { Mae, Mse };
std::string to_string(LossKind loss);
LossKind parse_loss(const std::string& text);

struct TrainConfig {
  std::size_t epochs = 250;
  double learning_rate = 1e-4;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::Mae;
  bool shuffle = true;
  // Set the regression-head bias to the mean training age before the first step.
  bool init_head_bias = true;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_mae = 0.0;
  double val_mae = 0.0;  // NaN when no validation set is given
  double loss = 0.0;
};

using History = std::vector<EpochRecord>;

/// CSV with header `epoch,train_mae,val_mae,loss`.
std::string history_csv(const History& history);
void write_history_csv(const fs::path& path, const History& history);

/// Loss value and d(loss)/d(prediction) for one batch.
std::pair<double, Tensorf> loss_and_grad(const Tensorf& pred, std::span<const double> target,
                                         LossKind kind);

/// Stacks volumes [D,H,W] into [N,1,D,H,W].
Tensorf make_batch(const Dataset& ds, std::span<const std::size_t> indices);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains in place. Shuffling, dropout and (via build) initialization all
/// derive from config.seed. Throws NumericError on a non-finite loss.
History train(Model& model, const Dataset& train_set, const TrainConfig& config,
              const Dataset* validation = nullptr, const EpochCallback& on_epoch = {});

std::vector<double> predict(const Model& model, const Dataset& ds, std::size_t batch_size = 8);

/// Evaluation-mode metrics over the dataset in manifest order.
Metrics evaluate(const Model& model, const Dataset& ds);

struct CrossReport {
  std::string source;  // dataset the model was trained on
  std::string target;  // dataset evaluated
  Metrics metrics;
};

/// Evaluates without any parameter update on a second cohort.
CrossReport cross_evaluate(const Model& model, const std::string& source_name, const Dataset& target);

struct AblationReport {
  Metrics shared;
  Metrics untied;
  History shared_history;
  History untied_history;
  double mae_delta() const { return shared.mae - untied.mae; }  // shared minus untied
};

/// Trains a shared-attention and a per-layer-attention variant built from the
/// same seed, then evaluates both on `test`.
AblationReport ablate_sharing(const Dataset& train_set, const Dataset& test, ModelConfig config,
                              const TrainConfig& train_config);

// -- reports ---------------------------------------------------------------------------

/// `key=value` lines (mae, rmse, n plus the extra pairs).
std::string metrics_kv(const Metrics& m,
                       const std::vector<std::pair<std::string, std::string>>& extra = {});
std::string metrics_json(const Metrics& m,
                         const std::vector<std::pair<std::string, std::string>>& extra = {});
std::string cross_report_kv(const CrossReport& r);
std::string cross_report_json(const CrossReport& r);

}  // namespace volage

#endif  // VOLAGE_TRAINING_HPP
