#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "cotok/config.hpp"
#include "cotok/tensor.hpp"

using namespace cotok;

namespace {

ModelConfig three_stream_config() {
  ModelConfig c;
  c.streams = {{32, 224, 224, 2, 4}, {16, 128, 128, 1, 3}, {8, 64, 64, 1, 3}};
  c.tokens_per_feature = 8;
  c.channels = 768;
  c.heads = 12;
  c.text_max_len = 32;
  return c;
}

}  // namespace

TEST(Validate, ThreeStreamsFourFeaturesGiveSixtyFourRows) {
  const auto c = validate(three_stream_config());
  EXPECT_EQ(c.streams.size(), 3u);
  EXPECT_EQ(c.feature_count(), 4u);
  EXPECT_EQ(c.fused_length, 64u);
}

TEST(Validate, MinimalConfig) {
  ModelConfig c;
  c.streams = {{1, 2, 2, 1, 1}};
  c.tokens_per_feature = 1;
  c.text_max_len = 1;
  c.channels = 4;
  c.heads = 1;
  EXPECT_EQ(validate(c).fused_length, 2u);
}

TEST(Validate, RejectsZeroHeight) {
  ModelConfig c;
  c.streams = {{4, 0, 16, 1, 1}};
  EXPECT_THROW(validate(c), Error);
}

TEST(Validate, RejectsUnderflowingTaps) {
  ModelConfig c;
  c.streams = {{4, 8, 8, 1, 4}};  // 8 / 2^4 == 0
  try {
    validate(c);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("underflow"), std::string::npos) << e.what();
  }
}

TEST(Validate, RejectsSequenceCapAndBadHeads) {
  ModelConfig c;
  c.streams = {{2, 16, 16, 1, 1}};
  c.text_max_len = 10;
  c.tokens_per_feature = 4;
  c.max_sequence = 13;
  EXPECT_THROW(validate(c), Error);
  c.max_sequence = 14;
  EXPECT_NO_THROW(validate(c));
  c.heads = 3;  // 64 % 3 != 0
  EXPECT_THROW(validate(c), Error);
}

TEST(Validate, ReportsEveryProblem) {
  ModelConfig c;
  c.streams = {{0, 8, 8, 1, 1}, {2, 8, 8, 0, 1}};
  c.channels = 0;
  try {
    validate(c);
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("streams.0"), std::string::npos);
    EXPECT_NE(msg.find("streams.1"), std::string::npos);
    EXPECT_NE(msg.find("channels"), std::string::npos);
  }
}

TEST(Validate, TapsEvenlySpacedEndingAtLastBlock) {
  EXPECT_EQ(tap_blocks({1, 64, 64, 2, 4}), (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(tap_blocks({1, 64, 64, 2, 3}), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(tap_blocks({1, 64, 64, 1, 5}), (std::vector<std::size_t>{4}));
  EXPECT_EQ(tap_blocks({1, 64, 64, 3, 0}), (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Validate, FeatureGeometryHalvesPerBlock) {
  ModelConfig c;
  c.streams = {{8, 32, 32, 2, 2}};
  c = validate(c);
  ASSERT_EQ(c.feature_count(), 2u);
  EXPECT_EQ(c.features[0].geometry, (Geometry{8, 16, 16}));
  EXPECT_EQ(c.features[1].geometry, (Geometry{8, 8, 8}));
  EXPECT_EQ(c.features[1].scale, 1u);
}

TEST(Validate, FusedLengthPropertyOverRandomConfigs) {
  Rng rng(17);
  for (int trial = 0; trial < 300; ++trial) {
    ModelConfig c;
    const std::size_t k = 1 + rng.index(3);
    std::size_t s_total = 0;
    for (std::size_t i = 0; i < k; ++i) {
      StreamSpec s;
      s.frames = 1 + rng.index(8);
      s.height = 4 + rng.index(60);
      s.width = 4 + rng.index(60);
      s.scale_taps = 1 + rng.index(2);
      s.blocks = s.scale_taps + rng.index(2);
      const std::size_t shrink = std::size_t{1} << s.blocks;
      if (s.height < shrink) s.height = shrink;
      if (s.width < shrink) s.width = shrink;
      s_total += s.scale_taps;
      c.streams.push_back(s);
    }
    c.tokens_per_feature = 1 + rng.index(8);
    c.text_max_len = 1 + rng.index(32);
    c.fusion_mode = rng.index(2) ? FusionMode::iterative_cotok : FusionMode::static_tokenize;
    c = validate(c);
    EXPECT_EQ(c.feature_count(), s_total);
    EXPECT_EQ(c.fused_length, c.text_max_len + c.tokens_per_feature * s_total);
  }
}

TEST(Presets, AllValidateAtBothScales) {
  for (const auto& name : preset_names()) {
    EXPECT_NO_THROW(validate(preset(name, PresetScale::full))) << name;
    EXPECT_NO_THROW(validate(preset(name, PresetScale::desk))) << name;
  }
  EXPECT_THROW(preset("three_stream"), Error);
}

TEST(Presets, TwoStreamGeometryAtFullScale) {
  const auto c = preset("two_stream");
  ASSERT_EQ(c.streams.size(), 2u);
  EXPECT_EQ(c.streams[0].frames, 32u);
  EXPECT_EQ(c.streams[0].height, 224u);
  EXPECT_EQ(c.streams[0].width, 224u);
  EXPECT_EQ(c.streams[1].frames, 32u);
  EXPECT_EQ(c.streams[1].height, 128u);
  EXPECT_EQ(c.streams[1].width, 128u);
}

TEST(Presets, LadderStructure) {
  EXPECT_EQ(preset("single_stream").streams.size(), 1u);
  EXPECT_EQ(preset("plus_transformer").fusion_mode, FusionMode::dense_concat);
  EXPECT_EQ(preset("plus_tokenization").fusion_mode, FusionMode::static_tokenize);
  EXPECT_EQ(preset("plus_multiscale").feature_count(), 4u);
  const auto cotok = preset("plus_cotok");
  EXPECT_EQ(cotok.fusion_mode, FusionMode::iterative_cotok);
  EXPECT_EQ(cotok.tokens_per_feature, 8u);
  EXPECT_EQ(cotok.channels, 768u);
  EXPECT_EQ(cotok.feature_count(), 4u);
  EXPECT_EQ(cotok.fused_length, 64u);
  EXPECT_DOUBLE_EQ(cotok.learning_rate, 1e-3);
  EXPECT_EQ(cotok.batch_size, 256u);
  EXPECT_EQ(cotok.train_steps, 500000u);
}

TEST(Presets, DeskDefault) {
  const auto c = preset("desk_default");
  ASSERT_EQ(c.streams.size(), 2u);
  EXPECT_EQ(c.streams[0].frames, 8u);
  EXPECT_EQ(c.streams[0].height, 32u);
  EXPECT_EQ(c.streams[1].frames, 4u);
  EXPECT_EQ(c.streams[1].height, 64u);
  EXPECT_EQ(c.channels, 64u);
  EXPECT_EQ(c.tokens_per_feature, 4u);
  EXPECT_EQ(c.fusion_mode, FusionMode::iterative_cotok);
  EXPECT_EQ(c.softmax_axis, SoftmaxAxis::token_axis);
}

TEST(ConfigText, RoundTripsThroughSerialize) {
  auto c = preset("desk_default");
  c.seed = 99;
  c.softmax_axis = SoftmaxAxis::spatial_axis;
  c.learning_rate = 0.00123;
  c.share_fusion_weights = true;
  const auto back = validate(parse_config(serialize(c)));
  EXPECT_EQ(serialize(back), serialize(c));
  EXPECT_EQ(fingerprint(back), fingerprint(c));
  c.seed = 100;
  EXPECT_NE(fingerprint(back), fingerprint(c));
}

TEST(ConfigText, PresetLineCommentsAndOverrides) {
  const auto c = validate(parse_config(
      "# desk run\n"
      "preset = plus_cotok\n"
      "channels = 96   # wider\n"
      "streams.1.frames=16\n"));
  EXPECT_EQ(c.channels, 96u);
  EXPECT_EQ(c.streams[1].frames, 16u);
  EXPECT_EQ(c.streams[0].frames, 32u);
}

TEST(ConfigText, ErrorsNameTheLine) {
  try {
    parse_config("channels=8\nbogus=1\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_config("channels=-3"), Error);
  EXPECT_THROW(parse_config("learning_rate=fast"), Error);
  EXPECT_THROW(parse_config("streams.0.depth=3"), Error);
  EXPECT_THROW(parse_config("fusion_mode=magic"), Error);
}

TEST(ConfigText, LoadFromFile) {
  const auto path = std::filesystem::temp_directory_path() / "cotok_config_test.txt";
  {
    std::ofstream out(path);
    out << serialize(preset("toy"));
  }
  EXPECT_EQ(serialize(load_config(path.string())), serialize(preset("toy")));
  std::filesystem::remove(path);
  EXPECT_THROW(load_config(path.string()), Error);
}
