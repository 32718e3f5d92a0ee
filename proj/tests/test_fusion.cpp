#include <gtest/gtest.h>

#include "oracle.hpp"
#include "support.hpp"

using namespace cotok;
using namespace cotok::testing;

namespace {

void zero(ParamStore<double>& store, const std::string& name) {
  for (auto& v : store.at(name).data) v = 0.0;
}

/// Zeroes the attention and MLP output projections so the layer is the identity.
void make_identity(ParamStore<double>& store, const std::string& p) {
  for (const char* n : {".attn.wo", ".attn.bo", ".mlp.w2", ".mlp.b2"}) zero(store, p + n);
}

Tensor<double> rows_of(const Tensor<double>& t, std::size_t start, std::size_t count) {
  Tensor<double> out({count, t.cols()});
  std::copy(t.data.begin() + static_cast<long>(start * t.cols()),
            t.data.begin() + static_cast<long>((start + count) * t.cols()), out.data.begin());
  return out;
}

}  // namespace

TEST(EncodeText, ShapeAndDeterminism) {
  ModelConfig cfg = tiny_config();
  cfg.text_max_len = 32;
  cfg.channels = 768;
  cfg.heads = 12;
  cfg.vocab_size = 20;
  Rng rng(1);
  ParamStore<double> store;
  init_text_encoder(store, cfg, rng);
  const auto text = random_text(cfg, rng, 5);
  Tape<double> tape;
  tape.set_grad_enabled(false);
  ParamBinder<double> params(tape, store);
  const auto a = encode_text(text, cfg, params).value();
  EXPECT_EQ(a.shape, (Shape{32, 768}));
  EXPECT_EQ(encode_text(text, cfg, params).value().data, a.data);
}

TEST(EncodeText, AllPadRowsKeepEmbeddingAndPosition) {
  const auto cfg = tiny_config();
  Rng rng(2);
  ParamStore<double> store;
  init_text_encoder(store, cfg, rng);
  TextSequence text;
  text.ids.assign(cfg.text_max_len, kPad);
  text.pad_mask.assign(cfg.text_max_len, true);
  Tape<double> tape;
  ParamBinder<double> params(tape, store);
  const auto out = encode_text(text, cfg, params).value();
  const auto pos = sinusoidal_positions<double>(cfg.text_max_len, cfg.channels);
  for (std::size_t i = 0; i < cfg.text_max_len; ++i)
    for (std::size_t c = 0; c < cfg.channels; ++c)
      EXPECT_NEAR(out(i, c), store.at("embed")(kPad, c) + pos(i, c), 1e-12);
}

TEST(EncodeText, RejectsOutOfRangeIds) {
  const auto cfg = tiny_config();
  Rng rng(3);
  ParamStore<double> store;
  init_text_encoder(store, cfg, rng);
  auto text = random_text(cfg, rng);
  text.ids[0] = static_cast<int>(cfg.vocab_size);
  Tape<double> tape;
  ParamBinder<double> params(tape, store);
  EXPECT_THROW(encode_text(text, cfg, params), Error);
}

TEST(TransformerLayer, ZeroedOutputProjectionsGiveIdentity) {
  Rng rng(4);
  ParamStore<double> store;
  init_transformer_layer(store, "h", 8, rng);
  make_identity(store, "h");
  const auto x = random_tensor<double>({5, 8}, rng);
  Tape<double> tape;
  ParamBinder<double> params(tape, store);
  const auto y = transformer_layer(tape.constant(x), std::vector<bool>(5, false), 2, params, "h").value();
  EXPECT_EQ(y.data, x.data);
}

TEST(TransformerLayer, SinglePositionIsInputPlusMlp) {
  Rng rng(5);
  ParamStore<double> store;
  init_transformer_layer(store, "h", 4, rng);
  for (auto& v : store.at("h.attn.bv").data) v = rng.uniform(-1, 1);
  const auto x = random_tensor<double>({1, 4}, rng);
  Tape<double> tape;
  ParamBinder<double> params(tape, store);
  const auto y = transformer_layer(tape.constant(x), {false}, 2, params, "h").value();

  // one key: softmax weight 1, so attention returns v = ln1(x) wv + bv, projected by wo
  auto ln = [](const std::vector<double>& v, const Tensor<double>& g, const Tensor<double>& b) {
    double mean = 0, var = 0;
    for (double a : v) mean += a / static_cast<double>(v.size());
    for (double a : v) var += (a - mean) * (a - mean) / static_cast<double>(v.size());
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mean) / std::sqrt(var + 1e-5) * g.data[i] + b.data[i];
    return out;
  };
  auto affine = [](const std::vector<double>& v, const Tensor<double>& w, const Tensor<double>& b) {
    std::vector<double> out(w.cols());
    for (std::size_t j = 0; j < w.cols(); ++j) {
      out[j] = b.data[j];
      for (std::size_t i = 0; i < v.size(); ++i) out[j] += v[i] * w(i, j);
    }
    return out;
  };
  const auto& s = store;
  std::vector<double> h = x.data;
  const auto attn = affine(affine(ln(h, s.at("h.ln1.g"), s.at("h.ln1.b")), s.at("h.attn.wv"), s.at("h.attn.bv")),
                           s.at("h.attn.wo"), s.at("h.attn.bo"));
  for (std::size_t i = 0; i < 4; ++i) h[i] += attn[i];
  auto hidden = affine(ln(h, s.at("h.ln2.g"), s.at("h.ln2.b")), s.at("h.mlp.w1"), s.at("h.mlp.b1"));
  for (auto& v : hidden) v = std::max(v, 0.0);
  const auto mlp = affine(hidden, s.at("h.mlp.w2"), s.at("h.mlp.b2"));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.data[i], h[i] + mlp[i], 1e-10);
}

TEST(TransformerLayer, PermutationEquivariant) {
  Rng rng(6);
  ParamStore<double> store;
  init_transformer_layer(store, "h", 8, rng);
  const auto x = random_tensor<double>({4, 8}, rng);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  Tensor<double> px({4, 8});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 8; ++c) px(i, c) = x(perm[i], c);
  Tape<double> tape;
  ParamBinder<double> params(tape, store);
  const std::vector<bool> mask(4, false);
  const auto y = transformer_layer(tape.constant(x), mask, 2, params, "h").value();
  const auto py = transformer_layer(tape.constant(px), mask, 2, params, "h").value();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(py(i, c), y(perm[i], c), 1e-12);
}

TEST(TransformerLayer, RejectsBadHeadsAndEmptyInput) {
  Rng rng(7);
  ParamStore<double> store;
  init_transformer_layer(store, "h", 6, rng);
  Tape<double> tape;
  ParamBinder<double> params(tape, store);
  const auto x = tape.constant(random_tensor<double>({3, 6}, rng));
  EXPECT_THROW(transformer_layer(x, std::vector<bool>(3, false), 4, params, "h"), Error);
  EXPECT_THROW(transformer_layer(x, std::vector<bool>(2, false), 2, params, "h"), Error);
}

TEST(TransformerLayer, GradientsMatchFiniteDifferences) {
  Rng rng(8);
  ParamStore<double> store;
  init_transformer_layer(store, "h", 4, rng);
  store.insert("input", random_tensor<double>({3, 4}, rng));
  const auto w = random_tensor<double>({3, 4}, rng);
  const auto r = grad_check_params(
      store,
      [&](ParamBinder<double>& params) {
        return weighted_sum(transformer_layer(params("input"), {false, false, true}, 2, params, "h"), w);
      },
      has_gradient_signal);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

namespace {

struct FuseFixture {
  ModelConfig config;
  ParamStore<double> store;
  std::vector<VideoClip> clips;
  TextSequence text;

  explicit FuseFixture(ModelConfig c, std::uint64_t seed = 9) : config(std::move(c)) {
    Rng rng(seed);
    store = init_params<double>(config);
    clips = random_clips(config, rng);
    text = random_text(config, rng);
  }

  Encoded<double> run(Tape<double>& tape) {
    ParamBinder<double> params(tape, store);
    return encode(clips, text, config, params);
  }
};

}  // namespace

TEST(Fuse, SingleLayerHasNoResidual) {
  auto cfg = tiny_config();
  cfg.fusion_layers = 1;
  FuseFixture fx(validate(cfg));
  Tape<double> tape;
  const auto enc = fx.run(tape);
  ASSERT_EQ(enc.fusion.layer_inputs.size(), 1u);
  ParamBinder<double> params(tape, fx.store);
  const auto expected =
      transformer_layer(enc.fusion.layer_inputs[0], enc.fusion.pad_mask, cfg.heads, params, "fuse.layer0").value();
  EXPECT_EQ(enc.fusion.sequence.value().data, expected.data);
  EXPECT_EQ(enc.fusion.sequence.shape(), (Shape{cfg.fused_length, cfg.channels}));
}

TEST(Fuse, IdentityLayersAccumulateTheFirstInput) {
  auto cfg = tiny_config();
  cfg.fusion_layers = 3;
  FuseFixture fx(validate(cfg));
  for (std::size_t l = 0; l < 3; ++l) make_identity(fx.store, fusion_layer_prefix(fx.config, l));
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t i = 0; i < fx.config.feature_count(); ++i) {
      zero(fx.store, tokenizer_prefix(l, i) + ".phi_seq");
      for (const char* part : {".phi_feat", ".psi"})
        fx.store.at(tokenizer_prefix(l, i) + part) = fx.store.at(tokenizer_prefix(0, i) + part);
    }
  Tape<double> tape;
  const auto enc = fx.run(tape);
  // r_1 = [f_t, f_0] and r_l = [f_t, f_0] + r_{l-1}, so r_3 = 3 [f_t, f_0]
  const auto& first = enc.fusion.layer_inputs[0].value();
  const auto& out = enc.fusion.sequence.value();
  for (std::size_t k = 0; k < out.size(); ++k) EXPECT_NEAR(out.data[k], 3.0 * first.data[k], 1e-12);
}

TEST(Fuse, TextSpanReinjectedAndRowCountConstant) {
  FuseFixture fx(tiny_config());
  Tape<double> tape;
  const auto enc = fx.run(tape);
  const auto& cfg = fx.config;
  ASSERT_EQ(enc.fusion.layer_inputs.size(), cfg.fusion_layers);
  for (const auto& in : enc.fusion.layer_inputs) {
    EXPECT_EQ(in.shape(), (Shape{cfg.fused_length, cfg.channels}));
    EXPECT_EQ(rows_of(in.value(), 0, cfg.text_max_len).data, enc.text.value().data);
  }
  EXPECT_EQ(enc.fusion.sequence.rows(), cfg.fused_length);
}

TEST(Fuse, RetokenizationChangesAttention) {
  FuseFixture fx(tiny_config());
  Tape<double> tape;
  const auto enc = fx.run(tape);
  ASSERT_EQ(enc.fusion.attention.size(), 2u);
  for (std::size_t i = 0; i < fx.config.feature_count(); ++i) {
    const auto& a0 = enc.fusion.attention[0][i];
    const auto& a1 = enc.fusion.attention[1][i];
    EXPECT_EQ(a0.iteration, 0u);
    EXPECT_EQ(a1.iteration, 1u);
    EXPECT_GT(max_abs_diff(a0.weights.value(), a1.weights.value()), 0.0);
  }
}

TEST(Fuse, ModesDifferInStructure) {
  FuseFixture st(tiny_config(FusionMode::static_tokenize));
  Tape<double> t1;
  const auto e1 = st.run(t1);
  EXPECT_EQ(e1.fusion.attention.size(), 1u);
  EXPECT_EQ(e1.fusion.sequence.rows(), st.config.fused_length);

  auto dense_cfg = tiny_config(FusionMode::dense_concat);
  FuseFixture dn(dense_cfg);
  Tape<double> t2;
  const auto e2 = dn.run(t2);
  std::size_t cells = 0;
  for (const auto& f : dense_cfg.features) cells += f.geometry.cells();
  EXPECT_TRUE(e2.fusion.attention.empty());
  EXPECT_EQ(e2.fusion.sequence.rows(), dense_cfg.text_max_len + cells);
  EXPECT_EQ(tokenizer_iterations(dense_cfg), 0u);

  dense_cfg.max_sequence = dense_cfg.text_max_len + cells - 1;
  EXPECT_THROW(validate(dense_cfg), Error);
}

TEST(Fuse, SharedWeightsUseOneLayer) {
  auto cfg = tiny_config();
  cfg.fusion_layers = 3;
  cfg.share_fusion_weights = true;
  const auto store = init_params<double>(validate(cfg));
  EXPECT_TRUE(store.contains("fuse.layer0.mlp.w1"));
  EXPECT_FALSE(store.contains("fuse.layer1.mlp.w1"));
  EXPECT_TRUE(store.contains(tokenizer_prefix(2, 0) + ".psi"));
  FuseFixture fx(validate(cfg));
  Tape<double> tape;
  EXPECT_NO_THROW(fx.run(tape));
}

TEST(Fuse, OutputFiniteOverRandomDraws) {
  auto cfg = tiny_config();
  cfg.streams = {StreamSpec{2, 4, 4, 1, 1}};
  cfg.channels = 4;
  cfg = validate(cfg);
  Rng rng(10);
  for (int trial = 0; trial < 1000; ++trial) {
    cfg.seed = static_cast<std::uint64_t>(trial);
    cfg.fusion_mode = trial % 3 == 0 ? FusionMode::static_tokenize : FusionMode::iterative_cotok;
    cfg.softmax_axis = trial % 2 ? SoftmaxAxis::spatial_axis : SoftmaxAxis::token_axis;
    const auto store = init_params<float>(cfg);
    Tape<float> tape;
    tape.set_grad_enabled(false);
    ParamBinder<float> params(tape, store);
    auto clips = random_clips(cfg, rng);
    for (auto& v : clips[0].values.data) v *= 10.0f;
    const auto enc = encode(clips, random_text(cfg, rng, rng.index(cfg.text_max_len)), cfg, params);
    ASSERT_TRUE(all_finite<float>(enc.fusion.sequence.value().data)) << "trial " << trial;
  }
}

TEST(Fuse, TwoLayerGradientsMatchFiniteDifferences) {
  auto cfg = tiny_config();
  cfg.streams = {StreamSpec{2, 4, 4, 1, 1}};
  cfg.channels = 4;
  cfg.text_max_len = 3;
  cfg = validate(cfg);
  Rng rng(11);
  ParamStore<double> store;
  init_fusion(store, cfg, rng);
  store.insert("input.text", random_tensor<double>({cfg.text_max_len, cfg.channels}, rng));
  store.insert("input.video", random_tensor<double>({cfg.features[0].geometry.cells(), cfg.channels}, rng));
  const auto w = random_tensor<double>({cfg.fused_length, cfg.channels}, rng);
  const std::vector<bool> pad{false, false, true};
  const auto r = grad_check_params(
      store,
      [&](ParamBinder<double>& params) {
        std::vector<FeatureMap<double>> feats{{params("input.video"), cfg.features[0].geometry, 0, 0}};
        return weighted_sum(fuse(params("input.text"), pad, feats, cfg, params).sequence, w);
      },
      has_gradient_signal);
  EXPECT_GT(r.checked, 500u);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}
