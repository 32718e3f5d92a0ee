#pragma once

// Text encoding and the fusion stack.
//
// iterative_cotok:  r_1 = H_1([f_t, f_0]),  r_l = H_l([f_t, f_{l-1}] + r_{l-1})
//                   where f_{l-1} re-tokenizes every video feature with
//                   context r_{l-1} (and f_0 uses context f_t).
// static_tokenize:  f_0 once, then plain stacked layers.
// dense_concat:     every feature cell enters the sequence, plain stacked layers.

#include <string>
#include <vector>

#include "cotok/autograd.hpp"
#include "cotok/backbone.hpp"
#include "cotok/config.hpp"
#include "cotok/cotokenizer.hpp"
#include "cotok/ingest.hpp"
#include "cotok/params.hpp"
#include "cotok/transformer.hpp"

namespace cotok {

inline std::string fusion_layer_prefix(const ModelConfig& config, std::size_t layer) {
  return "fuse.layer" + std::to_string(config.share_fusion_weights ? 0 : layer);
}

template <class T>
void init_text_encoder(ParamStore<T>& store, const ModelConfig& config, Rng& rng) {
  store.add_glorot("embed", {config.vocab_size, config.channels}, config.vocab_size, config.channels, rng);
  init_transformer_layer(store, "text.layer0", config.channels, rng);
}

template <class T>
void init_fusion(ParamStore<T>& store, const ModelConfig& config, Rng& rng) {
  const std::size_t distinct = config.share_fusion_weights ? std::min<std::size_t>(config.fusion_layers, 1)
                                                           : config.fusion_layers;
  for (std::size_t l = 0; l < distinct; ++l) init_transformer_layer(store, fusion_layer_prefix(config, l), config.channels, rng);
  init_tokenizer(store, config, rng);
}

/// Embedding + sinusoidal positions + one self-attention layer -> {L_text, C}.
template <class T>
Var<T> encode_text(const TextSequence& text, const ModelConfig& config, ParamBinder<T>& params) {
  if (text.length() != config.text_max_len)
    throw Error("encode_text: sequence length " + std::to_string(text.length()) + " != text_max_len " +
                std::to_string(config.text_max_len));
  for (int id : text.ids)
    if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size)
      throw Error("encode_text: id " + std::to_string(id) + " outside vocabulary of " + std::to_string(config.vocab_size));
  Var<T> x = embedding(params("embed"), text.ids);
  x = add_constant(x, sinusoidal_positions<T>(text.length(), config.channels));
  return transformer_layer(x, text.pad_mask, config.heads, params, "text.layer0");
}

template <class T>
struct FusionResult {
  Var<T> sequence;             // r_L, {fused_length, C}
  std::vector<bool> pad_mask;  // text padding rows of r_L
  /// Attention maps per tokenization iteration.
  std::vector<std::vector<AttentionMaps<T>>> attention;
  /// The concatenation [f_t, f_l] fed to each fusion layer.
  std::vector<Var<T>> layer_inputs;
};

template <class T>
FusionResult<T> fuse(Var<T> text_features, const std::vector<bool>& text_pad, const std::vector<FeatureMap<T>>& features,
                     const ModelConfig& config, ParamBinder<T>& params) {
  FusionResult<T> out;
  const std::size_t layers = config.fusion_layers;
  out.pad_mask = text_pad;

  if (config.fusion_mode == FusionMode::dense_concat) {
    std::vector<Var<T>> parts{text_features};
    for (const auto& f : features) parts.push_back(f.values);
    Var<T> seq = concat_rows(parts);
    if (seq.rows() > config.max_sequence)
      throw Error("fuse: dense sequence of " + std::to_string(seq.rows()) + " rows exceeds max_sequence");
    out.pad_mask.resize(seq.rows(), false);
    for (std::size_t l = 0; l < layers; ++l) {
      out.layer_inputs.push_back(seq);
      seq = transformer_layer(seq, out.pad_mask, config.heads, params, fusion_layer_prefix(config, l));
    }
    out.sequence = seq;
    return out;
  }

  if (layers == 0) throw Error("fuse: tokenized fusion needs at least one layer");
  out.pad_mask.resize(config.text_max_len + config.token_rows(), false);

  TokenSet<T> tokens = tokenize_all(text_features, features, config, params, 0);
  out.attention.push_back(tokens.maps);
  Var<T> input = concat_rows(std::vector<Var<T>>{text_features, tokens.values});
  out.layer_inputs.push_back(input);
  Var<T> r = transformer_layer(input, out.pad_mask, config.heads, params, fusion_layer_prefix(config, 0));

  for (std::size_t l = 1; l < layers; ++l) {
    if (config.fusion_mode == FusionMode::iterative_cotok) {
      tokens = tokenize_all(r, features, config, params, l);
      out.attention.push_back(tokens.maps);
      input = concat_rows(std::vector<Var<T>>{text_features, tokens.values});
      out.layer_inputs.push_back(input);
      r = transformer_layer(add(input, r), out.pad_mask, config.heads, params, fusion_layer_prefix(config, l));
    } else {
      out.layer_inputs.push_back(r);
      r = transformer_layer(r, out.pad_mask, config.heads, params, fusion_layer_prefix(config, l));
    }
  }
  out.sequence = r;
  return out;
}

}  // namespace cotok
