#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cotok/backbone.hpp"
#include "cotok/config.hpp"
#include "cotok/decoder.hpp"
#include "cotok/fusion.hpp"
#include "cotok/ingest.hpp"
#include "cotok/params.hpp"

namespace cotok {

/// Every trainable tensor of the full model, initialised from config.seed.
template <class T>
ParamStore<T> init_params(const ModelConfig& config) {
  Rng rng(config.seed);
  ParamStore<T> store;
  init_backbone(store, config, rng);
  init_text_encoder(store, config, rng);
  init_fusion(store, config, rng);
  init_decoder(store, config, rng);
  init_fc_head(store, config, rng);
  return store;
}

/// A QA record with its video sampled for every stream and its text ids.
struct PreparedExample {
  std::string id;
  std::string task;  // synthetic task name, or "default"
  std::vector<VideoClip> clips;
  TextSequence question;
  std::vector<int> target;  // first answer as word ids followed by EOS
  int answer_class = -1;    // index into the answer list, -1 if absent
  std::vector<std::string> answers;
};

/// Answer classes for the fixed-vocabulary head: most frequent first, ties
/// alphabetical, at most `limit` entries.
inline std::vector<std::string> build_answer_list(const std::vector<QAExample>& examples, std::size_t limit) {
  std::map<std::string, std::size_t> freq;
  for (const auto& ex : examples) ++freq[ex.answers.front()];
  std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> out;
  for (const auto& [a, _] : items) {
    if (out.size() >= limit) break;
    out.push_back(a);
  }
  return out;
}

/// Word vocabulary over every question and answer.
inline Vocab build_vocab(const std::vector<QAExample>& examples, std::size_t max_size) {
  std::vector<std::string> texts;
  for (const auto& ex : examples) {
    texts.push_back(ex.question);
    texts.insert(texts.end(), ex.answers.begin(), ex.answers.end());
  }
  return Vocab::build(texts, max_size);
}

inline PreparedExample prepare_example(const QAExample& ex, const ModelConfig& config, const Vocab& vocab,
                                       const std::vector<std::string>& answer_list,
                                       const std::filesystem::path& base_dir = {}) {
  PreparedExample p;
  p.id = ex.id;
  p.task = task_of(ex);
  p.answers = ex.answers;
  const RawVideo video = load_video(ex.video, base_dir);
  for (const auto& s : config.streams) p.clips.push_back(make_clip(video, s));
  p.question = tokenize_text(ex.question, vocab, config.text_max_len);
  const auto answer = tokenize_text(ex.answers.front(), vocab, config.text_max_len);
  for (std::size_t i = 0; i < answer.length() && !answer.pad_mask[i]; ++i) p.target.push_back(answer.ids[i]);
  if (p.target.empty()) p.target.push_back(kEos);
  const auto it = std::find(answer_list.begin(), answer_list.end(), ex.answers.front());
  if (it != answer_list.end()) p.answer_class = static_cast<int>(it - answer_list.begin());
  return p;
}

template <class T>
struct Encoded {
  std::vector<FeatureMap<T>> features;
  Var<T> text;
  FusionResult<T> fusion;
};

/// Backbone, text encoder and fusion for one example.
template <class T>
Encoded<T> encode(const std::vector<VideoClip>& clips, const TextSequence& question, const ModelConfig& config,
                  ParamBinder<T>& params) {
  Encoded<T> e;
  e.features = collect_features(clips, config, params);
  e.text = encode_text(question, config, params);
  e.fusion = fuse(e.text, question.pad_mask, e.features, config, params);
  return e;
}

/// Everything needed to run a trained model.
struct ModelBundle {
  ModelConfig config;
  ParamStore<float> params;
  Vocab vocab;
  std::vector<std::string> answers;

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    {
      std::ofstream out(dir / "config.txt");
      out << serialize(config);
    }
    save_checkpoint((dir / "model.ckpt").string(), params);
    vocab.save((dir / "vocab.txt").string());
    std::ofstream out(dir / "answers.txt");
    for (const auto& a : answers) out << a << "\n";
  }

  static ModelBundle load(const std::filesystem::path& dir) {
    ModelBundle b;
    b.config = load_config((dir / "config.txt").string());
    b.params = load_checkpoint<float>((dir / "model.ckpt").string());
    b.vocab = Vocab::load((dir / "vocab.txt").string());
    b.answers = read_lines((dir / "answers.txt").string());
    return b;
  }

  static std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) out.push_back(line);
    }
    return out;
  }
};

enum class DecodeMode { open, masked, fc };

inline DecodeMode parse_decode_mode(std::string_view s) {
  if (s == "open") return DecodeMode::open;
  if (s == "masked") return DecodeMode::masked;
  if (s == "fc") return DecodeMode::fc;
  throw Error("unknown decode mode '" + std::string(s) + "' (open, masked, fc)");
}

/// Answers one prepared example in the requested setting. `answer_set` is the
/// target vocabulary for masked decoding and the class list for fc.
template <class T>
DecodeResult answer(const PreparedExample& ex, const ModelConfig& config, const ParamStore<T>& store,
                    const Vocab& vocab, DecodeMode mode, std::size_t beam,
                    const std::vector<std::string>& answer_set) {
  Tape<T> tape;
  tape.set_grad_enabled(false);
  ParamBinder<T> params(tape, store);
  const auto enc = encode(ex.clips, ex.question, config, params);
  DecodeResult out;
  if (mode == DecodeMode::fc) {
    const auto probs = classify_fc(enc.fusion.sequence, config, params);
    const std::size_t usable = std::min(probs.size(), answer_set.size());
    if (usable == 0) throw Error("fc decoding needs a non-empty answer list");
    const auto best = static_cast<std::size_t>(std::max_element(probs.begin(), probs.begin() + static_cast<long>(usable)) - probs.begin());
    out.text = answer_set[best];
    out.score = std::log(static_cast<double>(probs[best]));
    return out;
  }
  std::optional<std::set<int>> allowed;
  if (mode == DecodeMode::masked) {
    allowed = answer_token_mask(answer_set, vocab);
    if (allowed->empty()) throw Error("masked decoding: no answer word is in the model vocabulary");
  }
  const Var<T> memory = enc.fusion.sequence;
  const auto& memory_pad = enc.fusion.pad_mask;
  StepFunction step = [&](const std::vector<int>& prefix) {
    const auto logits = decode_step(memory, memory_pad, prefix, config, params);
    return std::vector<double>(logits.begin(), logits.end());
  };
  out = beam_search(step, beam, config.text_max_len - 1, allowed);
  out.text = detokenize(out.ids, vocab);
  return out;
}

}  // namespace cotok
