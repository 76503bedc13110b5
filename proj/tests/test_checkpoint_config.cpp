#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"
#include "volage/checkpoint.hpp"
#include "volage/config.hpp"
#include "volage/errors.hpp"

using namespace volage;
using namespace volage::testing;

namespace {

Model trained_looking_toy(AttentionMode mode, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Model m = build(toy_config(mode), seed);
  m.mutable_params().for_each(
      [&](const std::string&, Tensorf& t) { t = random_tensor<float>(t.shape(), rng, -2, 2); });
  return m;
}

}  // namespace

// ---- checkpoint ----

TEST(Checkpoint, RoundTripsParamsConfigAndMeta) {
  for (AttentionMode mode : {AttentionMode::Shared, AttentionMode::PerLayer, AttentionMode::None}) {
    const Model m = trained_looking_toy(mode, 3);
    const nlohmann::json meta = {{"dataset", "cohortA"}, {"epochs", 30}};
    const auto bytes = serialize_checkpoint(m, meta);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "VOLAGE01");
    const Checkpoint ck = deserialize_checkpoint(bytes);
    EXPECT_EQ(ck.model.config(), m.config());
    EXPECT_EQ(ck.model.params(), m.params());
    EXPECT_EQ(ck.meta, meta);
    EXPECT_EQ(serialize_checkpoint(ck.model, ck.meta), bytes);
  }
}

TEST(Checkpoint, EveryTruncationIsCorrupt) {
  const auto bytes = serialize_checkpoint(trained_looking_toy(AttentionMode::Shared, 4), {});
  for (std::size_t n = 0; n < bytes.size(); n += (n < 64 ? 1 : 97)) {
    const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<long>(n));
    EXPECT_THROW(deserialize_checkpoint(cut), CorruptArtifactError) << n;
  }
  std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 1);
  EXPECT_THROW(deserialize_checkpoint(cut), CorruptArtifactError);
}

TEST(Checkpoint, BadMagicTrailingBytesAndBadDocument) {
  auto bytes = serialize_checkpoint(trained_looking_toy(AttentionMode::Shared, 5), {});
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad), CorruptArtifactError);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(deserialize_checkpoint(bad), CorruptArtifactError);
  bad = bytes;
  bad[12] = '#';  // first byte of the JSON document
  EXPECT_THROW(deserialize_checkpoint(bad), CorruptArtifactError);
}

TEST(Checkpoint, ExtentMismatchIsCorrupt) {
  auto bytes = serialize_checkpoint(trained_looking_toy(AttentionMode::Shared, 6), {});
  // First tensor header follows magic, length word and document.
  std::uint32_t doc = 0;
  std::memcpy(&doc, bytes.data() + 8, 4);
  const std::size_t first_extent = 12 + doc + 4;
  bytes[first_extent] ^= 0x01;
  EXPECT_THROW(deserialize_checkpoint(bytes), CorruptArtifactError);
}

TEST(Checkpoint, FileRoundTripAndMissingFile) {
  const Model m = trained_looking_toy(AttentionMode::Shared, 7);
  const fs::path p = fs::temp_directory_path() / ("volage_ck_" + std::to_string(::getpid()) + ".ckpt");
  save_checkpoint(p, m, {{"dataset", "x"}});
  const Checkpoint ck = load_checkpoint(p);
  EXPECT_EQ(ck.model.params(), m.params());
  EXPECT_EQ(ck.meta["dataset"], "x");
  fs::remove(p);
  EXPECT_THROW(load_checkpoint(p), IoError);
}

// ---- run config ----

TEST(RunConfigJson, DefaultsRoundTrip) {
  const RunConfig c;
  const RunConfig back = run_config_from_json(nlohmann::json::parse(to_json(c).dump()));
  EXPECT_EQ(back.model, c.model);
  EXPECT_EQ(back.train.epochs, 250u);
  EXPECT_EQ(back.train.batch_size, 4u);
  EXPECT_EQ(back.train.learning_rate, 1e-4);
  EXPECT_EQ(back.train.loss, LossKind::Mae);
  EXPECT_TRUE(back.normalize);
  EXPECT_EQ(back.gradcam_target, CamTarget::PostAttention);
  EXPECT_EQ(back.model.attention_kernel, 7);
  EXPECT_EQ(back.model.dropout_conv, 0.3);
}

TEST(RunConfigJson, OverridesApply) {
  const auto j = nlohmann::json::parse(R"({"conv_channels":[4,8,16,32],"dense_widths":[64,16,1],
      "input_shape":[32,32,32],"attention_mode":"per_layer","epochs":30,"seed":7,"loss":"mse",
      "gradcam_target":"pre"})");
  const RunConfig c = run_config_from_json(j);
  EXPECT_EQ(c.model.conv_channels, (std::vector<Index>{4, 8, 16, 32}));
  EXPECT_EQ(c.model.attention_mode, AttentionMode::PerLayer);
  EXPECT_EQ(c.train.epochs, 30u);
  EXPECT_EQ(c.train.seed, 7u);
  EXPECT_EQ(c.train.loss, LossKind::Mse);
  EXPECT_EQ(c.gradcam_target, CamTarget::PreAttention);
  EXPECT_EQ(trace_shapes(c.model).flatten_length, 32 * 2 * 2 * 2);
}

TEST(RunConfigJson, UnknownKeyNamed) {
  try {
    run_config_from_json(nlohmann::json::parse(R"({"epochs":3,"learnin_rate":0.1})"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learnin_rate"), std::string::npos) << e.what();
  }
  EXPECT_THROW(model_config_from_json(nlohmann::json::parse(R"({"epochs":3})")), ConfigError);
}

TEST(RunConfigJson, InvalidValuesRejected) {
  for (const char* text : {R"({"epochs":0})", R"({"batch_size":0})", R"({"learning_rate":-1})",
                           R"({"attention_kernel":6})", R"({"dropout_dense":1.0})",
                           R"({"test_fraction":1.0})", R"({"bin_width":0})", R"({"loss":"huber"})",
                           R"({"conv_kernel":[2,2]})", R"({"epochs":"many"})", R"([1,2])",
                           R"({"dense_widths":[8,2]})"}) {
    EXPECT_THROW(run_config_from_json(nlohmann::json::parse(text)), ConfigError) << text;
  }
}

TEST(RunConfigJson, FileErrors) {
  const fs::path p = fs::temp_directory_path() / ("volage_cfg_" + std::to_string(::getpid()) + ".json");
  std::ofstream(p) << "{ not json";
  EXPECT_THROW(load_run_config(p), ConfigError);
  fs::remove(p);
  EXPECT_THROW(load_run_config(p), IoError);
}
