#pragma once

// Text-conditioned learned tokenization of one video feature:
//
//   tokens = softmax(psi(phi(r) + f)) ^T  .  f
//
// phi maps the context sequence r {L_r, C} to a {T'H'W', C} field with two
// bias-free linear maps (feature dim C -> T'H'W', then sequence dim
// L_r -> C). psi is a convolution C -> N. The attention weights are
// normalised either across the N tokens at each cell (token_axis) or across
// the cells for each token (spatial_axis), then contracted with f over
// T'H'W' to give N tokens of width C.

#include <string>
#include <vector>

#include "cotok/autograd.hpp"
#include "cotok/backbone.hpp"
#include "cotok/config.hpp"
#include "cotok/params.hpp"

namespace cotok {

/// Attention weights of one tokenize call, stored {T'H'W', N}.
template <class T>
struct AttentionMaps {
  Var<T> weights;
  Geometry geometry;
  std::size_t iteration = 0;
  std::size_t stream_index = 0;
  std::size_t scale_index = 0;

  /// Row-major {N, T', H', W'} copy.
  Tensor<T> token_major() const {
    const auto& a = weights.value();
    const std::size_t cells = a.rows(), n = a.cols();
    Tensor<T> out({n, geometry.t, geometry.h, geometry.w});
    for (std::size_t p = 0; p < cells; ++p)
      for (std::size_t k = 0; k < n; ++k) out.data[k * cells + p] = a.data[p * n + k];
    return out;
  }
};

template <class T>
struct TokenSet {
  Var<T> values;  // {N*S, C}, N rows per feature in feature order
  std::vector<AttentionMaps<T>> maps;
};

inline std::string tokenizer_prefix(std::size_t iteration, std::size_t feature) {
  return "tok.l" + std::to_string(iteration) + ".f" + std::to_string(feature);
}

/// Context length seen by the tokenizer at a given fusion iteration.
inline std::size_t tokenizer_context_length(const ModelConfig& config, std::size_t iteration) {
  return iteration == 0 ? config.text_max_len : config.text_max_len + config.token_rows();
}

/// Number of distinct tokenizer parameter sets (one per re-tokenization).
inline std::size_t tokenizer_iterations(const ModelConfig& config) {
  switch (config.fusion_mode) {
    case FusionMode::dense_concat: return 0;
    case FusionMode::static_tokenize: return 1;
    case FusionMode::iterative_cotok: return config.fusion_layers;
  }
  return 0;
}

template <class T>
void init_tokenizer_set(ParamStore<T>& store, const ModelConfig& config, std::size_t iteration,
                        std::size_t feature, Rng& rng) {
  const std::size_t c = config.channels;
  const std::size_t cells = config.features.at(feature).geometry.cells();
  const std::size_t lr = tokenizer_context_length(config, iteration);
  const std::size_t kvol = config.psi_kernel * config.psi_kernel * config.psi_kernel;
  const std::string p = tokenizer_prefix(iteration, feature);
  store.add_glorot(p + ".phi_feat", {c, cells}, c, cells, rng);
  store.add_glorot(p + ".phi_seq", {c, lr}, lr, c, rng);
  store.add_glorot(p + ".psi", {kvol * c, config.tokens_per_feature}, kvol * c, config.tokens_per_feature, rng);
}

template <class T>
void init_tokenizer(ParamStore<T>& store, const ModelConfig& config, Rng& rng) {
  for (std::size_t l = 0; l < tokenizer_iterations(config); ++l)
    for (std::size_t i = 0; i < config.feature_count(); ++i) init_tokenizer_set(store, config, l, i, rng);
}

/// phi(r): {L_r, C} -> {T'H'W', C}.
template <class T>
Var<T> project_context(Var<T> r, ParamBinder<T>& params, const std::string& prefix) {
  Var<T> phi_feat = params(prefix + ".phi_feat");
  Var<T> phi_seq = params(prefix + ".phi_seq");
  if (r.rows() != phi_seq.cols())
    throw Error("project_context: context length " + std::to_string(r.rows()) + " != expected " +
                std::to_string(phi_seq.cols()) + " for " + prefix);
  if (r.cols() != phi_feat.rows())
    throw Error("project_context: context width " + std::to_string(r.cols()) + " != channels " +
                std::to_string(phi_feat.rows()));
  Var<T> per_position = matmul(r, phi_feat);       // {L_r, P}
  Var<T> mixed = matmul(phi_seq, per_position);    // {C, P}
  return transpose(mixed);                         // {P, C}
}

template <class T>
std::pair<Var<T>, AttentionMaps<T>> tokenize(Var<T> r, const FeatureMap<T>& feature, const ModelConfig& config,
                                             ParamBinder<T>& params, std::size_t iteration, std::size_t feature_index) {
  const std::string prefix = tokenizer_prefix(iteration, feature_index);
  const auto& expected = config.features.at(feature_index);
  if (feature.geometry != expected.geometry || feature.values.rows() != expected.geometry.cells() ||
      feature.values.cols() != config.channels)
    throw Error("tokenize: feature " + std::to_string(feature_index) + " has shape " +
                shape_str(feature.values.shape()) + ", expected {" + std::to_string(expected.geometry.cells()) +
                ", " + std::to_string(config.channels) + "}");

  Var<T> f = add(project_context(r, params, prefix), feature.values);
  Var<T> psi = params(prefix + ".psi");
  Var<T> logits;
  if (config.psi_kernel == 1) {
    logits = matmul(f, psi);
  } else {
    Var<T> zero_bias = params.tape().constant(Tensor<T>({config.tokens_per_feature}));
    logits = conv3d(f, feature.geometry, psi, zero_bias, Conv3dSpec{config.psi_kernel, 1, 1});
  }
  if (!all_finite<T>(logits.value().data))
    throw Error("tokenize: non-finite attention logits for " + prefix);

  Var<T> weights = config.softmax_axis == SoftmaxAxis::token_axis
                       ? softmax_rows(logits)
                       : transpose(softmax_rows(transpose(logits)));
  Var<T> tokens = matmul(transpose(weights), feature.values);  // {N, C}
  return {tokens, AttentionMaps<T>{weights, feature.geometry, iteration, feature.stream_index, feature.scale_index}};
}

template <class T>
TokenSet<T> tokenize_all(Var<T> r, const std::vector<FeatureMap<T>>& features, const ModelConfig& config,
                         ParamBinder<T>& params, std::size_t iteration) {
  if (features.size() != config.feature_count())
    throw Error("tokenize_all: expected " + std::to_string(config.feature_count()) + " features, got " +
                std::to_string(features.size()));
  TokenSet<T> out;
  std::vector<Var<T>> blocks;
  for (std::size_t i = 0; i < features.size(); ++i) {
    auto [tokens, maps] = tokenize(r, features[i], config, params, iteration, i);
    blocks.push_back(tokens);
    out.maps.push_back(maps);
  }
  out.values = concat_rows(blocks);
  return out;
}

}  // namespace cotok
