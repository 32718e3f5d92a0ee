#pragma once

#include <functional>
#include <vector>

#include "cotok.hpp"

namespace cotok::testing {

using Build = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Max relative error between the analytic gradient of sum(w * build(inputs))
/// and central differences, over every coordinate of every input.
inline GradCheckResult op_grad_check(const std::vector<Tensor<double>>& inputs, const Build& build,
                                     std::uint64_t seed = 1, double eps = 1e-6) {
  Tensor<double> weights;
  std::vector<double> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
    const Var<double> out = build(tape, leaves);
    Rng rng(seed);
    weights = random_tensor<double>(out.shape(), rng);
    tape.backward(weighted_sum(out, weights));
    for (const auto& l : leaves) {
      const auto g = tape.grad(l);
      analytic.insert(analytic.end(), g.begin(), g.end());
    }
  }
  std::vector<double> point;
  for (const auto& t : inputs) point.insert(point.end(), t.data.begin(), t.data.end());
  auto f = [&](const std::vector<double>& x) {
    Tape<double> tape;
    tape.set_grad_enabled(false);
    std::vector<Var<double>> leaves;
    std::size_t offset = 0;
    for (const auto& t : inputs) {
      Tensor<double> v(t.shape, std::vector<double>(x.begin() + static_cast<long>(offset),
                                                    x.begin() + static_cast<long>(offset + t.size())));
      offset += t.size();
      leaves.push_back(tape.leaf(std::move(v)));
    }
    return weighted_sum(build(tape, leaves), weights).value().data[0];
  };
  return grad_check(f, analytic, point, eps);
}

/// Parameters worth finite-differencing. A key bias adds the same amount to
/// every score in a query row, so its exact gradient is zero and a relative
/// error would only compare rounding noise.
inline bool has_gradient_signal(const std::string& name) {
  const auto n = name.size();
  return !(n >= 3 && name.compare(n - 3, 3, ".bk") == 0);
}

/// Small two-stream configuration used across the fusion and decoder tests.
inline ModelConfig tiny_config(FusionMode mode = FusionMode::iterative_cotok, std::uint64_t seed = 3) {
  ModelConfig c;
  c.streams = {StreamSpec{2, 4, 4, 1, 1}, StreamSpec{1, 8, 8, 2, 2}};
  c.tokens_per_feature = 2;
  c.channels = 8;
  c.heads = 2;
  c.fusion_layers = 2;
  c.text_max_len = 4;
  c.vocab_size = 12;
  c.answer_vocab_size = 5;
  c.backbone_channels = 3;
  c.seed = seed;
  c.fusion_mode = mode;
  return validate(c);
}

inline std::vector<VideoClip> random_clips(const ModelConfig& config, Rng& rng) {
  std::vector<VideoClip> clips;
  for (const auto& s : config.streams) {
    VideoClip clip;
    clip.geometry = Geometry{s.frames, s.height, s.width};
    clip.values = random_tensor<float>({clip.geometry.cells(), 3}, rng);
    clip.source_frame_count = s.frames;
    clips.push_back(std::move(clip));
  }
  return clips;
}

inline TextSequence random_text(const ModelConfig& config, Rng& rng, std::size_t pad_tail = 1) {
  TextSequence t;
  for (std::size_t i = 0; i < config.text_max_len; ++i) {
    const bool pad = i + pad_tail >= config.text_max_len && i > 0;
    t.ids.push_back(pad ? kPad : 3 + static_cast<int>(rng.index(config.vocab_size - 3)));
    t.pad_mask.push_back(pad);
  }
  return t;
}

/// Synthetic examples prepared against a vocabulary built from them. The
/// config's vocabulary sizes are adjusted to fit.
struct PreparedSet {
  ModelConfig config;
  Vocab vocab;
  std::vector<std::string> answers;
  std::vector<PreparedExample> examples;
};

inline PreparedSet synth_prepared(ModelConfig config, SynthTask task, long n, std::uint64_t seed) {
  PreparedSet s;
  const auto raw = synth_dataset(task, n, seed);
  s.vocab = build_vocab(raw, 1000);
  s.answers = build_answer_list(raw, 1000);
  config.vocab_size = s.vocab.size();
  config.answer_vocab_size = s.answers.size();
  s.config = validate(config);
  for (const auto& ex : raw) s.examples.push_back(prepare_example(ex, s.config, s.vocab, s.answers));
  return s;
}

}  // namespace cotok::testing
