#include "volage/training.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <sstream>

#include <json.hpp>

namespace volage {

namespace {

void require_pairs(std::span<const double> pred, std::span<const double> target, const char* op) {
  if (pred.size() != target.size())
    throw ShapeError(std::string(op) + ": " + std::to_string(pred.size()) + " predictions vs " +
                     std::to_string(target.size()) + " targets");
  if (pred.empty()) throw ConfigError(std::string(op) + ": empty input");
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << v;
  return os.str();
}

}  // namespace

double mae(std::span<const double> pred, std::span<const double> target) {
  require_pairs(pred, target, "mae");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += std::abs(pred[i] - target[i]);
  return sum / static_cast<double>(pred.size());
}

double rmse(std::span<const double> pred, std::span<const double> target) {
  require_pairs(pred, target, "rmse");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += (pred[i] - target[i]) * (pred[i] - target[i]);
  return std::sqrt(sum / static_cast<double>(pred.size()));
}

Metrics compute_metrics(std::span<const double> pred, std::span<const double> target) {
  Metrics m;
  m.mae = mae(pred, target);
  m.rmse = rmse(pred, target);
  m.n = pred.size();
  m.residuals.reserve(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) m.residuals.push_back(pred[i] - target[i]);
  return m;
}

// -- split -----------------------------------------------------------------------------

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed,
                                            std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

Split stratified_split(const Dataset& dataset, double test_fraction, double bin_width,
                       std::uint64_t seed) {
  if (dataset.empty()) throw ConfigError("stratified_split: empty dataset");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0))
    throw ConfigError("stratified_split: test fraction must lie in [0, 1)");
  if (!(bin_width > 0.0)) throw ConfigError("stratified_split: bin width must be positive");

  std::map<long long, std::vector<std::size_t>> bins;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    bins[static_cast<long long>(std::floor(dataset.records[i].age / bin_width))].push_back(i);

  std::vector<bool> is_test(dataset.size(), false);
  for (const auto& [bin, members] : bins) {
    const std::size_t size = members.size();
    auto k = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(size)));
    if (test_fraction > 0.0) k = std::max<std::size_t>(k, 1);
    k = std::min(k, size);
    const auto perm = seeded_permutation(size, seed, static_cast<std::uint64_t>(bin));
    for (std::size_t i = 0; i < k; ++i) is_test[members[perm[i]]] = true;
  }

  Split split;
  split.train.name = dataset.name;
  split.test.name = dataset.name;
  split.train.shape = split.test.shape = dataset.shape;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    (is_test[i] ? split.test : split.train).records.push_back(dataset.records[i]);
  return split;
}

// -- training ----------------------------------------------------------------------------

std::string to_string(LossKind loss) { return loss == LossKind::Mae ? "mae" : "mse"; }

LossKind parse_loss(const std::string& text) {
  if (text == "mae") return LossKind::Mae;
  if (text == "mse") return LossKind::Mse;
  throw ConfigError("loss must be mae or mse, got '" + text + "'");
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
}

std::string history_csv(const History& history) {
  std::ostringstream os;
  os.precision(9);
  os << "epoch,train_mae,val_mae,loss\n";
  for (const auto& e : history) {
    os << e.epoch << ',' << e.train_mae << ',';
    if (std::isnan(e.val_mae))
      os << "nan";
    else
      os << e.val_mae;
    os << ',' << e.loss << '\n';
  }
  return os.str();
}

void write_history_csv(const fs::path& path, const History& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write history " + path.string());
  out << history_csv(history);
  if (!out) throw IoError("write failed for " + path.string());
}

std::pair<double, Tensorf> loss_and_grad(const Tensorf& pred, std::span<const double> target,
                                         LossKind kind) {
  const auto n = static_cast<std::size_t>(pred.size());
  if (target.size() != n) throw ShapeError("loss: prediction/target count mismatch");
  Tensorf grad({pred.size()});
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = static_cast<double>(pred[static_cast<Index>(i)]) - target[i];
    if (kind == LossKind::Mae) {
      loss += std::abs(r);
      grad[static_cast<Index>(i)] = static_cast<float>((r > 0 ? 1.0 : r < 0 ? -1.0 : 0.0) * inv_n);
    } else {
      loss += r * r;
      grad[static_cast<Index>(i)] = static_cast<float>(2.0 * r * inv_n);
    }
  }
  return {loss * inv_n, std::move(grad)};
}

Tensorf make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  const auto [D, H, W] = ds.shape;
  const Index vol = D * H * W;
  Tensorf batch({static_cast<Index>(indices.size()), 1, D, H, W});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Tensorf& v = ds.records.at(indices[b]).volume;
    if (v.size() != vol) throw ShapeError("make_batch: volume size differs from dataset shape");
    std::copy_n(v.data(), vol, batch.data() + static_cast<Index>(b) * vol);
  }
  return batch;
}

namespace {

void require_input_shape(const Model& model, const Dataset& ds, const char* op) {
  if (ds.shape != model.config().input_shape)
    throw ShapeError(std::string(op) + ": dataset '" + ds.name + "' volumes are " +
                     shape_string({ds.shape[0], ds.shape[1], ds.shape[2]}) + ", model expects " +
                     shape_string({model.config().input_shape[0], model.config().input_shape[1],
                                   model.config().input_shape[2]}));
}

// Distinct dropout stream per optimizer step.
std::uint64_t step_seed(std::uint64_t seed, std::uint64_t step) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (step + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

constexpr std::uint64_t kShuffleStream = 0x5348554646ull;

}  // namespace

History train(Model& model, const Dataset& train_set, const TrainConfig& config,
              const Dataset* validation, const EpochCallback& on_epoch) {
  config.validate();
  if (train_set.empty()) throw ConfigError("train: empty training set");
  require_input_shape(model, train_set, "train");
  if (validation && !validation->empty()) require_input_shape(model, *validation, "train");

  if (config.init_head_bias) {
    double mean_age = 0.0;
    for (const auto& r : train_set.records) mean_age += r.age;
    model.mutable_params().dense_biases.back()[0] =
        static_cast<float>(mean_age / static_cast<double>(train_set.size()));
  }
  AdamState<float> adam(model.params(), AdamConfig{config.learning_rate});
  const std::size_t n = train_set.size();
  History history;
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    if (config.shuffle) order = seeded_permutation(n, config.seed, kShuffleStream + epoch);

    double abs_sum = 0.0, loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size, ++batch_index, ++step) {
      const std::size_t stop = std::min(n, start + config.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      std::vector<double> target;
      for (std::size_t i : idx) target.push_back(train_set.records[i].age);

      auto fwd = forward(model, make_batch(train_set, idx), true, step_seed(config.seed, step));
      auto [loss, dpred] = loss_and_grad(fwd.predictions, target, config.loss);
      if (!std::isfinite(loss))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                           std::to_string(batch_index + 1));
      for (std::size_t b = 0; b < idx.size(); ++b)
        abs_sum += std::abs(static_cast<double>(fwd.predictions[static_cast<Index>(b)]) - target[b]);
      loss_sum += loss * static_cast<double>(idx.size());

      auto grads = backward(model, fwd.cache, dpred);
      adam_step(model, grads.grads, adam);
    }

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_mae = abs_sum / static_cast<double>(n);
    rec.loss = loss_sum / static_cast<double>(n);
    rec.val_mae = validation && !validation->empty() ? evaluate(model, *validation).mae
                                                     : std::numeric_limits<double>::quiet_NaN();
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return history;
}

std::vector<double> predict(const Model& model, const Dataset& ds, std::size_t batch_size) {
  require_input_shape(model, ds, "predict");
  std::vector<double> out;
  out.reserve(ds.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + batch_size); ++i) idx.push_back(i);
    const auto fwd = forward(model, make_batch(ds, idx), false);
    for (Index b = 0; b < fwd.predictions.size(); ++b) out.push_back(fwd.predictions[b]);
  }
  return out;
}

Metrics evaluate(const Model& model, const Dataset& ds) {
  if (ds.empty()) throw ConfigError("evaluate: empty dataset '" + ds.name + "'");
  const auto pred = predict(model, ds);
  const auto ages = ds.ages();
  return compute_metrics(pred, ages);
}

CrossReport cross_evaluate(const Model& model, const std::string& source_name,
                           const Dataset& target) {
  return {source_name, target.name, evaluate(model, target)};
}

AblationReport ablate_sharing(const Dataset& train_set, const Dataset& test, ModelConfig config,
                              const TrainConfig& train_config) {
  AblationReport report;
  config.attention_mode = AttentionMode::Shared;
  Model shared = build<float>(config, train_config.seed);
  config.attention_mode = AttentionMode::PerLayer;
  Model untied = build<float>(config, train_config.seed);
  report.shared_history = train(shared, train_set, train_config, &test);
  report.untied_history = train(untied, train_set, train_config, &test);
  report.shared = evaluate(shared, test);
  report.untied = evaluate(untied, test);
  return report;
}

// -- reports --------------------------------------------------------------------------------

std::string metrics_kv(const Metrics& m,
                       const std::vector<std::pair<std::string, std::string>>& extra) {
  std::ostringstream os;
  for (const auto& [k, v] : extra) os << k << '=' << v << '\n';
  os << "mae=" << fmt(m.mae) << '\n' << "rmse=" << fmt(m.rmse) << '\n' << "n=" << m.n << '\n';
  return os.str();
}

std::string metrics_json(const Metrics& m,
                         const std::vector<std::pair<std::string, std::string>>& extra) {
  nlohmann::ordered_json j;
  for (const auto& [k, v] : extra) j[k] = v;
  j["mae"] = m.mae;
  j["rmse"] = m.rmse;
  j["n"] = m.n;
  j["residuals"] = m.residuals;
  return j.dump();
}

std::string cross_report_kv(const CrossReport& r) {
  return metrics_kv(r.metrics, {{"cross", "true"}, {"train_dataset", r.source}, {"eval_dataset", r.target}});
}

std::string cross_report_json(const CrossReport& r) {
  nlohmann::ordered_json j = nlohmann::ordered_json::parse(metrics_json(r.metrics));
  nlohmann::ordered_json out;
  out["cross"] = true;
  out["train_dataset"] = r.source;
  out["eval_dataset"] = r.target;
  for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = it.value();
  return out.dump();
}

}  // namespace volage
