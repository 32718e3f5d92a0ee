#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cotok/autograd.hpp"
#include "cotok/tensor.hpp"

namespace cotok {

/// One video pathway. The backbone for this stream has `blocks` stride-2
/// stages; `scale_taps` of them emit a feature map.
struct StreamSpec {
  std::size_t frames = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t scale_taps = 1;
  std::size_t blocks = 0;  // 0 means "same as scale_taps"

  std::size_t block_count() const { return blocks == 0 ? scale_taps : blocks; }
  bool operator==(const StreamSpec&) const = default;
};

enum class FusionMode { dense_concat, static_tokenize, iterative_cotok };
enum class SoftmaxAxis { token_axis, spatial_axis };

inline std::string_view to_string(FusionMode m) {
  switch (m) {
    case FusionMode::dense_concat: return "dense_concat";
    case FusionMode::static_tokenize: return "static_tokenize";
    case FusionMode::iterative_cotok: return "iterative_cotok";
  }
  return "?";
}

inline std::string_view to_string(SoftmaxAxis a) {
  return a == SoftmaxAxis::token_axis ? "token_axis" : "spatial_axis";
}

/// Identity and extent of one emitted backbone feature.
struct FeatureInfo {
  std::size_t stream = 0;
  std::size_t scale = 0;
  std::size_t block = 0;  // backbone block after which the tap sits
  Geometry geometry;
};

struct ModelConfig {
  std::vector<StreamSpec> streams;
  std::size_t tokens_per_feature = 4;  // N
  std::size_t channels = 64;           // C
  std::size_t fusion_layers = 2;       // L_layers
  std::size_t text_max_len = 16;       // L_text
  std::size_t vocab_size = 1000;
  std::size_t answer_vocab_size = 100;
  std::uint64_t seed = 0;
  FusionMode fusion_mode = FusionMode::iterative_cotok;
  SoftmaxAxis softmax_axis = SoftmaxAxis::token_axis;

  std::size_t heads = 4;
  std::size_t backbone_channels = 16;
  std::size_t decoder_layers = 1;
  std::size_t psi_kernel = 1;
  bool share_fusion_weights = false;
  std::size_t max_sequence = 1024;

  double learning_rate = 3e-4;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::size_t batch_size = 8;
  std::size_t train_steps = 2000;
  std::size_t beam = 4;

  // Filled in by validate().
  std::vector<FeatureInfo> features;
  std::size_t fused_length = 0;

  std::size_t feature_count() const { return features.size(); }
  std::size_t token_rows() const { return tokens_per_feature * features.size(); }
};

/// Block indices (0-based) that carry a tap: evenly spaced, the last one at
/// the final block.
inline std::vector<std::size_t> tap_blocks(const StreamSpec& s) {
  const std::size_t blocks = s.block_count();
  const std::size_t taps = s.scale_taps;
  std::vector<std::size_t> out;
  if (taps == 0 || blocks < taps) return out;
  const std::size_t spacing = blocks / taps;
  for (std::size_t j = 0; j < taps; ++j) out.push_back(blocks - 1 - (taps - 1 - j) * spacing);
  return out;
}

/// Spatial stride 2 per block, temporal extent preserved.
inline Geometry block_output(const Geometry& in) {
  return Conv3dSpec{3, 1, 2}.output(in);
}

/// Checks geometry and derives per-feature shapes and the fused length.
/// Throws Error listing every problem found.
inline ModelConfig validate(ModelConfig config) {
  std::vector<std::string> problems;
  auto need = [&](bool ok, std::string msg) {
    if (!ok) problems.push_back(std::move(msg));
  };

  need(!config.streams.empty(), "at least one stream is required");
  need(config.tokens_per_feature >= 1, "tokens_per_feature must be >= 1");
  need(config.channels >= 1, "channels must be >= 1");
  need(config.text_max_len >= 1, "text_max_len must be >= 1");
  need(config.vocab_size >= 4, "vocab_size must be >= 4 (PAD, EOS, UNK plus one word)");
  need(config.answer_vocab_size >= 1, "answer_vocab_size must be >= 1");
  need(config.heads >= 1 && config.channels % std::max<std::size_t>(config.heads, 1) == 0,
       "heads (" + std::to_string(config.heads) + ") must divide channels (" +
           std::to_string(config.channels) + ")");
  need(config.backbone_channels >= 1, "backbone_channels must be >= 1");
  need(config.decoder_layers >= 1, "decoder_layers must be >= 1");
  need(config.psi_kernel == 1 || config.psi_kernel == 3, "psi_kernel must be 1 or 3");
  need(config.fusion_mode == FusionMode::dense_concat || config.fusion_layers >= 1,
       "tokenized fusion modes need fusion_layers >= 1");
  need(config.batch_size >= 1, "batch_size must be >= 1");
  need(config.beam >= 1, "beam must be >= 1");
  need(config.learning_rate >= 0.0 && config.weight_decay >= 0.0, "learning_rate and weight_decay must be >= 0");

  config.features.clear();
  for (std::size_t k = 0; k < config.streams.size(); ++k) {
    const StreamSpec& s = config.streams[k];
    const std::string tag = "streams." + std::to_string(k);
    if (s.frames == 0 || s.height == 0 || s.width == 0) {
      problems.push_back(tag + ": frames, height and width must be >= 1");
      continue;
    }
    if (s.scale_taps == 0) {
      problems.push_back(tag + ": scale_taps must be >= 1");
      continue;
    }
    if (s.block_count() < s.scale_taps) {
      problems.push_back(tag + ": blocks (" + std::to_string(s.block_count()) + ") fewer than scale_taps (" +
                         std::to_string(s.scale_taps) + ")");
      continue;
    }
    const std::size_t shrink = std::size_t{1} << std::min<std::size_t>(s.block_count(), 62);
    if (s.height / shrink == 0 || s.width / shrink == 0) {
      problems.push_back(tag + ": " + std::to_string(s.block_count()) + " downsampling blocks underflow a " +
                         std::to_string(s.height) + "x" + std::to_string(s.width) + " frame to zero size");
      continue;
    }
    const auto taps = tap_blocks(s);
    Geometry g{s.frames, s.height, s.width};
    std::size_t scale = 0;
    for (std::size_t b = 0; b < s.block_count(); ++b) {
      g = block_output(g);
      if (scale < taps.size() && taps[scale] == b) {
        config.features.push_back({k, scale, b, g});
        ++scale;
      }
    }
  }

  if (problems.empty()) {
    if (config.fusion_mode == FusionMode::dense_concat) {
      std::size_t cells = 0;
      for (const auto& f : config.features) cells += f.geometry.cells();
      config.fused_length = config.text_max_len + cells;
    } else {
      config.fused_length = config.text_max_len + config.token_rows();
    }
    need(config.fused_length <= config.max_sequence,
         "fused sequence length " + std::to_string(config.fused_length) + " exceeds max_sequence " +
             std::to_string(config.max_sequence));
  }

  if (!problems.empty()) {
    std::string msg = "invalid config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw Error(msg);
  }
  return config;
}

// ---------------------------------------------------------------------------
// Presets

enum class PresetScale { full, desk };

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {
      "single_stream",     "two_stream",      "plus_transformer", "plus_tokenization",
      "plus_multiscale",   "plus_cotok",      "desk_default",     "toy",
      "toy_single_frame"};
  return names;
}

namespace detail {

inline ModelConfig full_scale_base() {
  ModelConfig c;
  c.tokens_per_feature = 8;
  c.channels = 768;
  c.text_max_len = 32;
  c.vocab_size = 32000;
  c.answer_vocab_size = 4000;
  c.heads = 12;
  c.fusion_layers = 3;
  c.backbone_channels = 128;
  c.decoder_layers = 1;
  c.max_sequence = std::size_t{1} << 20;  // FLOP accounting only
  c.learning_rate = 1e-3;
  c.batch_size = 256;
  c.train_steps = 500000;
  return c;
}

inline ModelConfig desk_scale_base() {
  ModelConfig c;
  c.tokens_per_feature = 4;
  c.channels = 64;
  c.text_max_len = 16;
  c.vocab_size = 1000;
  c.answer_vocab_size = 100;
  c.heads = 4;
  c.fusion_layers = 3;
  c.backbone_channels = 64;
  c.max_sequence = std::size_t{1} << 16;
  return c;
}

}  // namespace detail

/// Ablation-ladder rungs plus the desk-scale training presets. The ladder
/// streams are 32x224x224 and 32x128x128 at full scale; the desk scale keeps
/// the same proportions at a quarter of the frames and resolution. The ladder
/// backbone is wide enough to dominate the cost, and the single-stream rung
/// runs a trunk twice as wide.
inline ModelConfig preset(std::string_view name, PresetScale scale = PresetScale::full) {
  ModelConfig c;
  if (name == "desk_default") {
    c = detail::desk_scale_base();
    c.fusion_layers = 2;
    c.backbone_channels = 16;
    c.max_sequence = 1024;
    c.streams = {{8, 32, 32, 2, 2}, {4, 64, 64, 2, 2}};
    return validate(c);
  }
  if (name == "toy" || name == "toy_single_frame") {
    c.tokens_per_feature = 4;
    c.channels = 32;
    c.text_max_len = 8;
    c.vocab_size = 64;
    c.answer_vocab_size = 16;
    c.heads = 4;
    c.fusion_layers = 2;
    c.backbone_channels = 16;
    c.max_sequence = 256;
    c.learning_rate = 1e-3;
    c.batch_size = 8;
    c.train_steps = 1500;
    const std::size_t fast_frames = name == "toy" ? 8 : 1;
    const std::size_t slow_frames = name == "toy" ? 2 : 1;
    c.streams = {{fast_frames, 16, 16, 2, 2}, {slow_frames, 32, 32, 2, 2}};
    return validate(c);
  }

  const bool full = scale == PresetScale::full;
  c = full ? detail::full_scale_base() : detail::desk_scale_base();
  const std::size_t frames = full ? 32 : 8;
  const std::size_t big = full ? 224 : 56;
  const std::size_t small = full ? 128 : 32;
  const std::size_t blocks = full ? 5 : 3;
  const StreamSpec big_stream{frames, big, big, 1, blocks};
  const StreamSpec small_stream{frames, small, small, 1, blocks};
  auto multiscale = [](StreamSpec s) {
    s.scale_taps = 2;
    return s;
  };

  if (name == "single_stream") {
    c.streams = {big_stream};
    c.backbone_channels *= 2;
    c.fusion_mode = FusionMode::dense_concat;
  } else if (name == "two_stream") {
    c.streams = {big_stream, small_stream};
    c.fusion_mode = FusionMode::dense_concat;
    c.fusion_layers = 0;
  } else if (name == "plus_transformer") {
    c.streams = {big_stream, small_stream};
    c.fusion_mode = FusionMode::dense_concat;
  } else if (name == "plus_tokenization") {
    c.streams = {big_stream, small_stream};
    c.fusion_mode = FusionMode::static_tokenize;
  } else if (name == "plus_multiscale") {
    c.streams = {multiscale(big_stream), multiscale(small_stream)};
    c.fusion_mode = FusionMode::static_tokenize;
  } else if (name == "plus_cotok") {
    c.streams = {multiscale(big_stream), multiscale(small_stream)};
    c.fusion_mode = FusionMode::iterative_cotok;
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw Error("unknown preset '" + std::string(name) + "' (known: " + known + ")");
  }
  return validate(c);
}

// ---------------------------------------------------------------------------
// Flat key=value config files, e.g. "streams.0.frames = 8".

inline std::string serialize(const ModelConfig& c) {
  std::ostringstream out;
  out.precision(17);
  for (std::size_t k = 0; k < c.streams.size(); ++k) {
    const auto& s = c.streams[k];
    const std::string p = "streams." + std::to_string(k) + ".";
    out << p << "frames=" << s.frames << "\n"
        << p << "height=" << s.height << "\n"
        << p << "width=" << s.width << "\n"
        << p << "scale_taps=" << s.scale_taps << "\n"
        << p << "blocks=" << s.block_count() << "\n";
  }
  out << "tokens_per_feature=" << c.tokens_per_feature << "\n"
      << "channels=" << c.channels << "\n"
      << "fusion_layers=" << c.fusion_layers << "\n"
      << "text_max_len=" << c.text_max_len << "\n"
      << "vocab_size=" << c.vocab_size << "\n"
      << "answer_vocab_size=" << c.answer_vocab_size << "\n"
      << "seed=" << c.seed << "\n"
      << "fusion_mode=" << to_string(c.fusion_mode) << "\n"
      << "softmax_axis=" << to_string(c.softmax_axis) << "\n"
      << "heads=" << c.heads << "\n"
      << "backbone_channels=" << c.backbone_channels << "\n"
      << "decoder_layers=" << c.decoder_layers << "\n"
      << "psi_kernel=" << c.psi_kernel << "\n"
      << "share_fusion_weights=" << (c.share_fusion_weights ? "true" : "false") << "\n"
      << "max_sequence=" << c.max_sequence << "\n"
      << "learning_rate=" << c.learning_rate << "\n"
      << "weight_decay=" << c.weight_decay << "\n"
      << "clip_norm=" << c.clip_norm << "\n"
      << "batch_size=" << c.batch_size << "\n"
      << "train_steps=" << c.train_steps << "\n"
      << "beam=" << c.beam << "\n";
  return out.str();
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw Error("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw Error("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

}  // namespace detail

/// Applies key=value overrides on top of `base`. A `preset=<name>` line
/// (first, if present) replaces the base.
inline ModelConfig parse_config(std::string_view text, ModelConfig base = {}) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  ModelConfig c = std::move(base);
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string val = detail::trim(std::string_view(t).substr(eq + 1));

    if (key == "preset") {
      c = preset(val);
    } else if (key.rfind("streams.", 0) == 0) {
      const auto dot = key.find('.', 8);
      if (dot == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": bad stream key '" + key + "'");
      const std::size_t idx = detail::parse_count(key, key.substr(8, dot - 8));
      if (idx > 64) throw Error("config key '" + key + "': stream index too large");
      if (c.streams.size() <= idx) c.streams.resize(idx + 1);
      auto& s = c.streams[idx];
      const std::string field = key.substr(dot + 1);
      const std::size_t n = detail::parse_count(key, val);
      if (field == "frames") s.frames = n;
      else if (field == "height") s.height = n;
      else if (field == "width") s.width = n;
      else if (field == "scale_taps") s.scale_taps = n;
      else if (field == "blocks") s.blocks = n;
      else throw Error("config line " + std::to_string(lineno) + ": unknown stream field '" + field + "'");
    } else if (key == "tokens_per_feature") c.tokens_per_feature = detail::parse_count(key, val);
    else if (key == "channels") c.channels = detail::parse_count(key, val);
    else if (key == "fusion_layers") c.fusion_layers = detail::parse_count(key, val);
    else if (key == "text_max_len") c.text_max_len = detail::parse_count(key, val);
    else if (key == "vocab_size") c.vocab_size = detail::parse_count(key, val);
    else if (key == "answer_vocab_size") c.answer_vocab_size = detail::parse_count(key, val);
    else if (key == "seed") c.seed = detail::parse_count(key, val);
    else if (key == "heads") c.heads = detail::parse_count(key, val);
    else if (key == "backbone_channels") c.backbone_channels = detail::parse_count(key, val);
    else if (key == "decoder_layers") c.decoder_layers = detail::parse_count(key, val);
    else if (key == "psi_kernel") c.psi_kernel = detail::parse_count(key, val);
    else if (key == "max_sequence") c.max_sequence = detail::parse_count(key, val);
    else if (key == "batch_size") c.batch_size = detail::parse_count(key, val);
    else if (key == "train_steps") c.train_steps = detail::parse_count(key, val);
    else if (key == "beam") c.beam = detail::parse_count(key, val);
    else if (key == "learning_rate") c.learning_rate = detail::parse_real(key, val);
    else if (key == "weight_decay") c.weight_decay = detail::parse_real(key, val);
    else if (key == "clip_norm") c.clip_norm = detail::parse_real(key, val);
    else if (key == "share_fusion_weights") {
      if (val != "true" && val != "false") throw Error("config key '" + key + "': expected true or false");
      c.share_fusion_weights = val == "true";
    } else if (key == "fusion_mode") {
      if (val == "dense_concat") c.fusion_mode = FusionMode::dense_concat;
      else if (val == "static_tokenize") c.fusion_mode = FusionMode::static_tokenize;
      else if (val == "iterative_cotok") c.fusion_mode = FusionMode::iterative_cotok;
      else throw Error("config key 'fusion_mode': unknown value '" + val + "'");
    } else if (key == "softmax_axis") {
      if (val == "token_axis") c.softmax_axis = SoftmaxAxis::token_axis;
      else if (val == "spatial_axis") c.softmax_axis = SoftmaxAxis::spatial_axis;
      else throw Error("config key 'softmax_axis': unknown value '" + val + "'");
    } else {
      throw Error("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  return c;
}

inline ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return validate(parse_config(ss.str()));
}

/// 64-bit FNV-1a over the serialized config.
inline std::uint64_t fingerprint(const ModelConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : serialize(c)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace cotok
