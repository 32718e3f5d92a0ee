#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cotok/autograd.hpp"
#include "cotok/config.hpp"
#include "cotok/ingest.hpp"
#include "cotok/params.hpp"
#include "cotok/transformer.hpp"

namespace cotok {

// Generation starts from PAD, which doubles as the start token and is never
// emitted.

template <class T>
void init_decoder(ParamStore<T>& store, const ModelConfig& config, Rng& rng) {
  for (std::size_t j = 0; j < config.decoder_layers; ++j)
    init_transformer_layer(store, "dec.layer" + std::to_string(j), config.channels, rng, true);
  init_layer_norm(store, "dec.ln_f", config.channels);
  store.add_glorot("dec.out.w", {config.channels, config.vocab_size}, config.channels, config.vocab_size, rng);
  store.add_constant("dec.out.b", {config.vocab_size}, T{0});
}

template <class T>
void init_fc_head(ParamStore<T>& store, const ModelConfig& config, Rng& rng) {
  store.add_glorot("fc.w", {config.channels, config.answer_vocab_size}, config.channels, config.answer_vocab_size, rng);
  store.add_constant("fc.b", {config.answer_vocab_size}, T{0});
}

/// Teacher-forced logits {len, V} for decoder inputs [PAD, y_0, ..., y_{len-2}].
template <class T>
Var<T> decoder_logits(Var<T> memory, const std::vector<bool>& memory_pad, const std::vector<int>& inputs,
                      const ModelConfig& config, ParamBinder<T>& params) {
  if (inputs.empty() || inputs.size() > config.text_max_len)
    throw Error("decoder: input length " + std::to_string(inputs.size()) + " outside [1, " +
                std::to_string(config.text_max_len) + "]");
  for (int id : inputs)
    if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size)
      throw Error("decoder: id " + std::to_string(id) + " outside vocabulary");
  Var<T> x = embedding(params("embed"), inputs);
  x = add_constant(x, sinusoidal_positions<T>(inputs.size(), config.channels));
  const std::vector<bool> no_pad(inputs.size(), false);
  for (std::size_t j = 0; j < config.decoder_layers; ++j)
    x = transformer_layer(x, no_pad, config.heads, params, "dec.layer" + std::to_string(j), true, &memory, &memory_pad);
  x = layer_norm_rows(x, params("dec.ln_f.g"), params("dec.ln_f.b"));
  return linear(x, params("dec.out.w"), params("dec.out.b"));
}

/// Logits for the token following `prefix` (generated ids, start token
/// excluded).
template <class T>
std::vector<T> decode_step(Var<T> memory, const std::vector<bool>& memory_pad, const std::vector<int>& prefix,
                           const ModelConfig& config, ParamBinder<T>& params) {
  if (prefix.size() >= config.text_max_len)
    throw Error("decode_step: prefix length " + std::to_string(prefix.size()) + " must be < text_max_len " +
                std::to_string(config.text_max_len));
  std::vector<int> inputs{kPad};
  inputs.insert(inputs.end(), prefix.begin(), prefix.end());
  Var<T> logits = decoder_logits(memory, memory_pad, inputs, config, params);
  const auto row = logits.value().row(inputs.size() - 1);
  return {row.begin(), row.end()};
}

template <class T>
std::vector<T> log_softmax(const std::vector<T>& logits) {
  T mx = -std::numeric_limits<T>::infinity();
  for (T v : logits) mx = std::max(mx, v);
  if (!std::isfinite(mx)) throw Error("log_softmax: no finite logit");
  T sum{0};
  for (T v : logits) sum += std::exp(v - mx);
  const T lse = mx + std::log(sum);
  std::vector<T> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

struct DecodeResult {
  std::vector<int> ids;  // emitted tokens, EOS excluded
  std::string text;
  double score = 0.0;    // summed log-probability, EOS included when emitted
};

/// Logits over the vocabulary for the next token after a prefix.
using StepFunction = std::function<std::vector<double>(const std::vector<int>&)>;

namespace detail {

struct Hypothesis {
  std::vector<int> ids;
  double score = 0.0;
  bool finished = false;
};

/// Higher score first; ties by lower last token, then lexicographic prefix.
inline bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  const int la = a.ids.empty() ? -1 : a.ids.back();
  const int lb = b.ids.empty() ? -1 : b.ids.back();
  if (la != lb) return la < lb;
  return a.ids < b.ids;
}

/// Log-probabilities with disallowed ids removed. PAD is never allowed; EOS
/// is always allowed so every hypothesis can terminate.
inline std::vector<double> masked_log_probs(std::vector<double> logits, const std::optional<std::set<int>>& allowed) {
  const double ninf = -std::numeric_limits<double>::infinity();
  logits.at(kPad) = ninf;
  if (allowed) {
    for (std::size_t i = 0; i < logits.size(); ++i)
      if (static_cast<int>(i) != kEos && !allowed->count(static_cast<int>(i))) logits[i] = ninf;
  }
  return log_softmax(logits);
}

}  // namespace detail

/// Length-capped greedy decoding (argmax, lowest id on ties).
inline DecodeResult greedy_decode(const StepFunction& step, std::size_t max_len,
                                  const std::optional<std::set<int>>& allowed = std::nullopt) {
  DecodeResult out;
  while (out.ids.size() < max_len) {
    const auto lp = detail::masked_log_probs(step(out.ids), allowed);
    const auto best = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    out.score += lp[static_cast<std::size_t>(best)];
    if (best == kEos) break;
    out.ids.push_back(best);
  }
  return out;
}

/// Length-capped beam search. Finished hypotheses leave the beam; the search
/// stops once no live hypothesis can beat the best finished one. The greedy
/// hypothesis is kept as a candidate, so the result never scores below greedy.
inline DecodeResult beam_search(const StepFunction& step, std::size_t beam, std::size_t max_len,
                                const std::optional<std::set<int>>& allowed = std::nullopt) {
  if (beam == 0) throw Error("beam_search: beam must be >= 1");
  if (allowed && allowed->empty()) throw Error("beam_search: empty vocabulary mask");
  if (beam == 1) return greedy_decode(step, max_len, allowed);

  std::vector<detail::Hypothesis> live{{}};
  std::vector<detail::Hypothesis> done;
  while (!live.empty()) {
    std::vector<detail::Hypothesis> candidates;
    for (const auto& h : live) {
      const auto lp = detail::masked_log_probs(step(h.ids), allowed);
      for (std::size_t tok = 0; tok < lp.size(); ++tok) {
        if (!std::isfinite(lp[tok])) continue;
        detail::Hypothesis c{h.ids, h.score + lp[tok], false};
        c.ids.push_back(static_cast<int>(tok));
        candidates.push_back(std::move(c));
      }
    }
    std::sort(candidates.begin(), candidates.end(), detail::better);
    live.clear();
    for (auto& c : candidates) {
      if (live.size() >= beam) break;
      if (c.ids.back() == kEos) {
        c.ids.pop_back();
        c.finished = true;
        done.push_back(std::move(c));
      } else if (c.ids.size() >= max_len) {
        c.finished = true;
        done.push_back(std::move(c));
      } else {
        live.push_back(std::move(c));
      }
    }
    if (!done.empty()) {
      const double best_done = std::max_element(done.begin(), done.end(), [](const auto& a, const auto& b) {
                                 return a.score < b.score;
                               })->score;
      // scores only decrease as hypotheses grow
      std::erase_if(live, [&](const auto& h) { return h.score <= best_done; });
    }
  }

  DecodeResult greedy = greedy_decode(step, max_len, allowed);
  done.push_back({greedy.ids, greedy.score, true});
  std::sort(done.begin(), done.end(), [](const auto& a, const auto& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.ids < b.ids;
  });
  DecodeResult out;
  out.ids = done.front().ids;
  out.score = done.front().score;
  return out;
}

/// Allowed token ids for masked generation: every in-vocabulary word of the
/// target answers.
inline std::set<int> answer_token_mask(const std::vector<std::string>& answers, const Vocab& vocab) {
  std::set<int> allowed;
  for (const auto& a : answers)
    for (const auto& w : split_words(a))
      if (vocab.contains(w)) allowed.insert(vocab.id(w));
  return allowed;
}

/// Mean of the text rows of r_L, then a linear layer to answer logits.
template <class T>
Var<T> fc_logits(Var<T> fused, const ModelConfig& config, ParamBinder<T>& params) {
  Var<T> w = params("fc.w");
  if (w.cols() != config.answer_vocab_size || w.rows() != config.channels)
    throw Error("classify_fc: head shape " + shape_str(w.shape()) + " does not match config");
  Var<T> pooled = mean_rows(slice_rows(fused, 0, config.text_max_len));
  return linear(pooled, w, params("fc.b"));
}

template <class T>
std::vector<T> classify_fc(Var<T> fused, const ModelConfig& config, ParamBinder<T>& params) {
  const auto logits = fc_logits(fused, config, params).value().data;
  auto lp = log_softmax(logits);
  for (auto& v : lp) v = std::exp(v);
  return lp;
}

}  // namespace cotok
