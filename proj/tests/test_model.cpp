#include <gtest/gtest.h>

#include "support.hpp"
#include "volage/errors.hpp"
#include "volage/model.hpp"

using namespace volage;
using namespace volage::testing;

namespace {

// Closed-form counts straight from the layer lists.
Index conv_count(const std::vector<Index>& ch) {
  Index n = 0, in = 1;
  for (Index c : ch) n += in * c * 8 + c, in = c;
  return n;
}

Index dense_count(Index in, const std::vector<Index>& widths) {
  Index n = 0;
  for (Index w : widths) n += in * w + w, in = w;
  return n;
}

// Give every bias a nonzero value so their gradients are exercised.
template <typename Scalar>
void randomize_biases(BrainAgeModel<Scalar>& m, std::mt19937_64& rng) {
  auto& p = m.mutable_params();
  // Positive biases keep most relu units open so gradient checks are not vacuous.
  for (auto& b : p.conv_biases) b = random_tensor<Scalar>(b.shape(), rng, 0.05, 0.3);
  for (auto& b : p.dense_biases) b = random_tensor<Scalar>(b.shape(), rng, 0.05, 0.3);
  for (auto& a : p.attention) a.bias = random_tensor<Scalar>({1}, rng, -0.5, 0.5);
}

}  // namespace

TEST(ShapeTrace, PublishedChainPerAxis) {
  const ShapeTrace t = trace_shapes(ModelConfig{});
  const std::vector<Index> d{91, 92, 46, 47, 23, 24, 12, 13, 6, 7, 3, 4, 2, 3, 1};
  const std::vector<Index> h{109, 110, 55, 56, 28, 29, 14, 15, 7, 8, 4, 5, 2, 3, 1};
  ASSERT_EQ(t.entries.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(t.entries[i].extents[0], d[i]) << t.entries[i].label;
    EXPECT_EQ(t.entries[i].extents[1], h[i]) << t.entries[i].label;
    EXPECT_EQ(t.entries[i].extents[2], d[i]) << t.entries[i].label;
  }
  EXPECT_EQ(t.entries.back().channels, 1024);
  EXPECT_EQ(t.flatten_length, 1024);
}

TEST(ShapeTrace, DenseInputMismatchCarriesTrace) {
  ModelConfig c;
  c.dense_input = 2048;
  try {
    trace_shapes(c);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("pool7"), std::string::npos) << msg;
    EXPECT_NE(msg.find("1024"), std::string::npos) << msg;
  }
  EXPECT_THROW(build(c, 0), ShapeError);
}

TEST(ShapeTrace, CollapsedExtentRejected) {
  ModelConfig c;
  c.conv_padding = {0, 0, 0};
  c.input_shape = {20, 20, 20};
  EXPECT_THROW(trace_shapes(c), ShapeError);
}

TEST(ParamCount, PublishedNetwork) {
  const ModelConfig c;
  const Index conv = conv_count(c.conv_channels);
  const Index dense = dense_count(1024, c.dense_widths);
  EXPECT_EQ(conv, 4808028);
  EXPECT_EQ(dense, 599513);
  EXPECT_EQ(parameter_count(c), conv + dense + 687);
  EXPECT_EQ(parameter_count(c), 5408228);
  EXPECT_EQ(param_count(build(c, 0)), 5408228);
}

TEST(ParamCount, AttentionModes) {
  ModelConfig c;
  c.attention_mode = AttentionMode::None;
  EXPECT_EQ(parameter_count(c), 5407541);
  c.attention_mode = AttentionMode::PerLayer;
  EXPECT_EQ(parameter_count(c), 5408228 + 6 * 687);
  EXPECT_EQ(param_count(build(c, 0)), 5408228 + 6 * 687);
}

TEST(ParamCount, HandCountedToy) {
  ModelConfig c;
  c.conv_channels = {2};
  c.dense_widths = {1};
  c.input_shape = {4, 4, 4};
  c.attention_kernel = 3;
  // conv 1*2*8+2, attention 2*27+1, flatten 2*2*2*2 -> dense 16+1
  EXPECT_EQ(parameter_count(c), 18 + 55 + 17);
  EXPECT_EQ(param_count(build(c, 1)), 90);
}

TEST(Build, DeterministicInSeed) {
  const ModelConfig c = toy_config();
  EXPECT_EQ(build(c, 4).params(), build(c, 4).params());
  EXPECT_NE(build(c, 4).params(), build(c, 5).params());
}

TEST(Build, PerLayerSitesShareInitialValues) {
  const auto shared = build(toy_config(AttentionMode::Shared), 9);
  const auto untied = build(toy_config(AttentionMode::PerLayer), 9);
  ASSERT_EQ(untied.params().attention.size(), 2u);
  for (const auto& a : untied.params().attention) EXPECT_EQ(a, shared.params().attention.front());
  EXPECT_EQ(shared.params().conv_weights, untied.params().conv_weights);
  EXPECT_EQ(shared.params().dense_weights, untied.params().dense_weights);
}

TEST(Forward, ZeroWeightsComposeBiases) {
  auto m = build(toy_config(), 0);
  auto& p = m.mutable_params();
  p.for_each([](const std::string&, Tensorf& t) { t.set_zero(); });
  p.conv_biases[0] = Tensorf({2}, {0.4f, -1.0f});
  p.conv_biases[1] = Tensorf({3}, {0.2f, 0.6f, -0.3f});
  p.dense_biases[0] = Tensorf({4}, {1, 2, 3, 4});
  p.dense_biases[1] = Tensorf({1}, {7.5f});
  const auto r = forward(m, Tensorf({1, 1, 8, 8, 8}), false);
  EXPECT_EQ(r.predictions[0], 7.5f);
  // Zero attention kernel -> every stage output is relu(bias)/2.
  EXPECT_TRUE((r.cache.post_attention[0].array().segment(0, 64) == 0.2f).all());
  EXPECT_TRUE((r.cache.post_attention[0].array().segment(64, 64) == 0.0f).all());
  EXPECT_TRUE((r.cache.post_attention[1].array().segment(8, 8) == 0.3f).all());
}

TEST(Forward, EvaluationModeIsPure) {
  std::mt19937_64 rng(12);
  const auto m = build(toy_config(), 2);
  const Tensorf x = random_tensor<float>({3, 1, 8, 8, 8}, rng);
  EXPECT_EQ(forward(m, x, false, 1).predictions, forward(m, x, false, 99).predictions);
  EXPECT_EQ(forward(m, x, true, 1).predictions, forward(m, x, true, 1).predictions);
  EXPECT_NE(forward(m, x, true, 1).predictions, forward(m, x, true, 2).predictions);
}

TEST(Forward, MatchesStraightLineComposition) {
  std::mt19937_64 rng(13);
  auto m = build<double>(toy_config(), 3);
  randomize_biases(m, rng);
  const Tensord x = random_tensor<double>({2, 1, 8, 8, 8}, rng);
  const auto& p = m.params();
  const ModelConfig& c = m.config();

  Tensord h = x;
  for (std::size_t l = 0; l < 2; ++l) {
    h = reference_conv(h, p.conv_weights[l], p.conv_biases[l], c.conv_spec(l));
    h.array() = h.array().max(0.0);
    h = maxpool3d_forward(h).output;
    h = attention_forward(h, p.attention[0]).output;
  }
  Tensord z = h.reshaped({2, h.size() / 2});
  z = dense_forward(z, p.dense_weights[0], p.dense_biases[0]).output;
  z.array() = z.array().max(0.0);
  z = dense_forward(z, p.dense_weights[1], p.dense_biases[1]).output;

  const auto pred = forward(m, x, false).predictions;
  ASSERT_EQ(pred.shape(), (Shape{2}));
  for (Index n = 0; n < 2; ++n) EXPECT_NEAR(pred[n], z[n], 1e-12);
}

TEST(Forward, RejectsWrongInputShape) {
  const auto m = build(toy_config(), 0);
  EXPECT_THROW(forward(m, Tensorf({1, 1, 8, 8, 7}), false), ShapeError);
  EXPECT_THROW(forward(m, Tensorf({1, 2, 8, 8, 8}), false), ShapeError);
}

TEST(Backward, ZeroLossGradientGivesZeroGradients) {
  std::mt19937_64 rng(14);
  const auto m = build(toy_config(), 0);
  const auto fwd = forward(m, random_tensor<float>({2, 1, 8, 8, 8}, rng), true, 3);
  const auto bwd = backward(m, fwd.cache, Tensorf({2}));
  bwd.grads.for_each([](const std::string& name, const Tensorf& g) {
    EXPECT_EQ(g.array().abs().maxCoeff(), 0.0f) << name;
  });
}

TEST(Backward, MatchesFiniteDifferencesInDouble) {
  std::mt19937_64 rng(15);
  for (AttentionMode mode : {AttentionMode::Shared, AttentionMode::PerLayer, AttentionMode::None}) {
    auto m = build<double>(toy_config(mode), 5);
    randomize_biases(m, rng);
    Tensord x = random_tensor<double>({2, 1, 8, 8, 8}, rng);
    const Tensord dl = random_tensor<double>({2}, rng);
    const auto r = model_fd_check(m, x, dl, /*training=*/true, 1, 1e-6, 1e-6);
    EXPECT_LT(r.worst_param, 1e-4) << to_string(mode) << " " << r.worst_name;
    EXPECT_LT(r.worst_input, 1e-4) << to_string(mode);
    EXPECT_TRUE(r.dead.empty()) << to_string(mode) << " " << r.dead.front();
    EXPECT_FALSE(r.input_dead) << to_string(mode);
  }
}

TEST(Backward, WorkingPrecisionAgreesWithReference) {
  std::mt19937_64 rng(16);
  auto m = build<float>(toy_config(), 6);
  randomize_biases(m, rng);
  const Tensorf x = random_tensor<float>({2, 1, 8, 8, 8}, rng);
  const Tensorf dl({2}, {1.0f, -0.5f});
  const auto fwd = forward(m, x, true, 4);
  const auto g = backward(m, fwd.cache, dl).grads;

  // Finite differences of the same network evaluated in double.
  auto md = m.cast<double>();
  Tensord xd = x.cast<double>();
  std::vector<Tensord> gd;
  g.for_each([&](const std::string& name, const Tensorf& t) {
    EXPECT_GT(t.array().abs().maxCoeff(), 0.0f) << name << " has no gradient";
    gd.push_back(t.cast<double>());
  });
  auto loss = [&] {
    const auto p = forward(md, xd, true, 4).predictions;
    return p[0] - 0.5 * p[1];
  };
  std::size_t k = 0;
  md.mutable_params().for_each([&](const std::string& name, Tensord& t) {
    EXPECT_LT(max_fd_error(t, gd[k++], loss, 1e-6, 1e-3), 1e-3) << name;
  });
}

TEST(Backward, StaleCacheRejected) {
  auto m = build(toy_config(), 0);
  const auto fwd = forward(m, Tensorf({1, 1, 8, 8, 8}), false);
  m.mutable_params();
  EXPECT_THROW(backward(m, fwd.cache, Tensorf({1}, {1})), StaleCacheError);
  const auto other = build(toy_config(), 0);
  const auto fwd2 = forward(other, Tensorf({1, 1, 8, 8, 8}), false);
  EXPECT_THROW(backward(m, fwd2.cache, Tensorf({1}, {1})), StaleCacheError);
}

TEST(Backward, SharedThetaEqualsUntiedSum) {
  std::mt19937_64 rng(17);
  const auto shared = build<double>(toy_config(AttentionMode::Shared), 8);
  const auto untied = build<double>(toy_config(AttentionMode::PerLayer), 8);
  const Tensord x = random_tensor<double>({2, 1, 8, 8, 8}, rng);
  const Tensord dl({2}, {1.0, 2.0});
  const auto fs = forward(shared, x, true, 7);
  const auto fu = forward(untied, x, true, 7);
  EXPECT_EQ(fs.predictions, fu.predictions);
  const auto gs = backward(shared, fs.cache, dl).grads.attention.front();
  const auto gu = backward(untied, fu.cache, dl).grads.attention;
  const auto summed = accumulate_shared_grad(gu);
  for (Index i = 0; i < summed.kernel.size(); ++i)
    EXPECT_LT(rel_error(gs.kernel[i], summed.kernel[i], 1e-12), 1e-6);
  EXPECT_LT(rel_error(gs.bias[0], summed.bias[0], 1e-12), 1e-6);
}

TEST(ModelConfigTest, ValidationRejectsBadFields) {
  ModelConfig c = toy_config();
  c.dense_widths = {4, 2};
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_config();
  c.attention_kernel = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_config();
  c.dropout_conv = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_config();
  c.conv_channels.clear();
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(parse_attention_mode("per_layer"), AttentionMode::PerLayer);
  EXPECT_THROW(parse_attention_mode("tied"), ConfigError);
}
