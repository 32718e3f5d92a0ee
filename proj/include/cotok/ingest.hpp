#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cotok/autograd.hpp"
#include "cotok/config.hpp"
#include "cotok/tensor.hpp"

namespace cotok {

// ---------------------------------------------------------------------------
// Frames and clips

/// One RGB frame of 8-bit pixels, row-major H x W x 3.
struct Frame {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> rgb;

  Frame() = default;
  Frame(std::size_t h, std::size_t w) : height(h), width(w), rgb(h * w * 3, 0) {}

  std::uint8_t* pixel(std::size_t y, std::size_t x) { return rgb.data() + (y * width + x) * 3; }
  const std::uint8_t* pixel(std::size_t y, std::size_t x) const { return rgb.data() + (y * width + x) * 3; }
};

using RawVideo = std::vector<Frame>;

/// Preprocessed frames for one stream: values {T*H*W, 3} in [-1, 1].
struct VideoClip {
  Geometry geometry;
  Tensor<float> values;
  std::size_t source_frame_count = 0;
};

/// Evenly spaced frame indices; the middle frame when a single frame is
/// requested. Repeats occur when target exceeds the source length.
inline std::vector<std::size_t> sample_frames(std::size_t source_frames, std::size_t target) {
  if (source_frames == 0) throw Error("sample_frames: empty video");
  if (target == 0) throw Error("sample_frames: target frame count must be >= 1");
  std::vector<std::size_t> out(target);
  if (target == 1) {
    out[0] = static_cast<std::size_t>(std::llround(static_cast<double>(source_frames - 1) / 2.0));
    return out;
  }
  for (std::size_t j = 0; j < target; ++j) {
    const double pos = static_cast<double>(j) * static_cast<double>(source_frames - 1) /
                       static_cast<double>(target - 1);
    out[j] = static_cast<std::size_t>(std::llround(pos));
  }
  return out;
}

/// Bilinear resize (half-pixel centres, edge clamped) to height x width, then
/// v -> v / 127.5 - 1. Output is {height*width, 3}.
inline Tensor<float> preprocess(const Frame& frame, std::size_t height, std::size_t width) {
  if (frame.height == 0 || frame.width == 0 || frame.rgb.size() != frame.height * frame.width * 3)
    throw Error("preprocess: degenerate source image " + std::to_string(frame.height) + "x" +
                std::to_string(frame.width));
  if (height == 0 || width == 0) throw Error("preprocess: target size must be positive");
  Tensor<float> out({height * width, 3});
  const double sy = static_cast<double>(frame.height) / static_cast<double>(height);
  const double sx = static_cast<double>(frame.width) / static_cast<double>(width);
  auto clampd = [](double v, double hi) { return std::clamp(v, 0.0, hi); };
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = clampd((static_cast<double>(y) + 0.5) * sy - 0.5, static_cast<double>(frame.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, frame.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = clampd((static_cast<double>(x) + 0.5) * sx - 0.5, static_cast<double>(frame.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, frame.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (1 - wy) * ((1 - wx) * frame.pixel(y0, x0)[c] + wx * frame.pixel(y0, x1)[c]) +
                         wy * ((1 - wx) * frame.pixel(y1, x0)[c] + wx * frame.pixel(y1, x1)[c]);
        out.data[(y * width + x) * 3 + c] = static_cast<float>(std::clamp(v / 127.5 - 1.0, -1.0, 1.0));
      }
    }
  }
  return out;
}

/// Samples and preprocesses a raw video for one stream.
inline VideoClip make_clip(const RawVideo& video, const StreamSpec& spec) {
  const auto idx = sample_frames(video.size(), spec.frames);
  VideoClip clip;
  clip.geometry = {spec.frames, spec.height, spec.width};
  clip.source_frame_count = video.size();
  clip.values = Tensor<float>({clip.geometry.cells(), 3});
  const std::size_t per_frame = spec.height * spec.width * 3;
  for (std::size_t j = 0; j < idx.size(); ++j) {
    const auto f = preprocess(video[idx[j]], spec.height, spec.width);
    std::copy(f.data.begin(), f.data.end(), clip.values.data.begin() + static_cast<long>(j * per_frame));
  }
  return clip;
}

// ---------------------------------------------------------------------------
// Text

inline constexpr int kPad = 0;
inline constexpr int kEos = 1;
inline constexpr int kUnk = 2;

/// Lowercases, drops punctuation, splits on whitespace.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

class Vocab {
 public:
  Vocab() : words_{"<pad>", "<eos>", "<unk>"} { reindex(); }

  /// Words sorted alphabetically after the three reserved ids; at most
  /// max_size entries in total.
  static Vocab build(const std::vector<std::string>& texts, std::size_t max_size) {
    std::set<std::string> uniq;
    for (const auto& t : texts)
      for (auto& w : split_words(t)) uniq.insert(std::move(w));
    Vocab v;
    for (const auto& w : uniq) {
      if (v.words_.size() >= max_size) break;
      v.words_.push_back(w);
    }
    v.reindex();
    return v;
  }

  static Vocab from_words(const std::vector<std::string>& words) {
    Vocab v;
    for (const auto& w : words) v.words_.push_back(w);
    v.reindex();
    return v;
  }

  int id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& word) const { return index_.count(word) > 0; }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write vocab '" + path + "'");
    for (const auto& w : words_) out << w << "\n";
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open vocab '" + path + "'");
    Vocab v;
    v.words_.clear();
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      v.words_.push_back(line);
    }
    if (v.words_.size() < 3 || v.words_[0] != "<pad>" || v.words_[1] != "<eos>" || v.words_[2] != "<unk>")
      throw Error("vocab '" + path + "' must start with <pad>, <eos>, <unk>");
    v.reindex();
    return v;
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], static_cast<int>(i));
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

struct TextSequence {
  std::vector<int> ids;
  std::vector<bool> pad_mask;  // true at padding positions

  std::size_t length() const { return ids.size(); }
};

/// Word ids followed by EOS, padded with PAD to max_len. Long inputs keep
/// their first max_len - 1 words so EOS always fits. Empty text gives an
/// all-PAD sequence.
inline TextSequence tokenize_text(std::string_view text, const Vocab& vocab, std::size_t max_len) {
  TextSequence seq;
  seq.ids.assign(max_len, kPad);
  seq.pad_mask.assign(max_len, true);
  const auto words = split_words(text);
  if (words.empty() || max_len == 0) return seq;
  const std::size_t n = std::min(words.size(), max_len - 1);
  for (std::size_t i = 0; i < n; ++i) {
    seq.ids[i] = vocab.id(words[i]);
    seq.pad_mask[i] = false;
  }
  seq.ids[n] = kEos;
  seq.pad_mask[n] = false;
  return seq;
}

/// Words up to the first EOS or PAD, space separated.
inline std::string detokenize(const std::vector<int>& ids, const Vocab& vocab) {
  std::string out;
  for (int id : ids) {
    if (id == kEos || id == kPad) break;
    if (!out.empty()) out += ' ';
    out += vocab.word(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// QA files: id \t question \t answer1|answer2|... \t video

struct QAExample {
  std::string id;
  std::string video;  // path or "synth:<task>:<seed>:<index>"
  std::string question;
  std::vector<std::string> answers;
};

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

/// Synthetic task name of an example, or "default".
inline std::string task_of(const QAExample& ex) {
  if (ex.video.rfind("synth:", 0) == 0) {
    const auto parts = split(ex.video, ':');
    if (parts.size() >= 2) return parts[1];
  }
  return "default";
}

inline std::vector<QAExample> read_qa_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open QA file '" + path + "'");
  std::vector<QAExample> out;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split(line, '\t');
    if (fields.size() != 4)
      throw Error(path + ":" + std::to_string(lineno) + ": expected 4 tab-separated fields, got " +
                  std::to_string(fields.size()));
    QAExample ex{fields[0], fields[3], fields[1], split(fields[2], '|')};
    if (ex.id.empty()) throw Error(path + ":" + std::to_string(lineno) + ": empty id");
    if (ex.answers.empty() || ex.answers.size() > 5 ||
        std::any_of(ex.answers.begin(), ex.answers.end(), [](const auto& a) { return a.empty(); }))
      throw Error(path + ":" + std::to_string(lineno) + ": need 1 to 5 non-empty answers");
    if (!seen.insert(ex.id).second)
      throw Error(path + ":" + std::to_string(lineno) + ": duplicate id '" + ex.id + "'");
    out.push_back(std::move(ex));
  }
  return out;
}

inline void write_qa_file(const std::string& path, const std::vector<QAExample>& examples) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write QA file '" + path + "'");
  for (const auto& ex : examples) {
    out << ex.id << '\t' << ex.question << '\t';
    for (std::size_t i = 0; i < ex.answers.size(); ++i) out << (i ? "|" : "") << ex.answers[i];
    out << '\t' << ex.video << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic tasks

enum class SynthTask { frame_color, temporal_order, repeat_count };

inline std::string_view to_string(SynthTask t) {
  switch (t) {
    case SynthTask::frame_color: return "frame_color";
    case SynthTask::temporal_order: return "temporal_order";
    case SynthTask::repeat_count: return "repeat_count";
  }
  return "?";
}

inline SynthTask parse_task(std::string_view s) {
  if (s == "frame_color") return SynthTask::frame_color;
  if (s == "temporal_order") return SynthTask::temporal_order;
  if (s == "repeat_count") return SynthTask::repeat_count;
  throw Error("unknown synthetic task '" + std::string(s) + "' (frame_color, temporal_order, repeat_count)");
}

struct SynthColor {
  std::string_view name;
  std::uint8_t r, g, b;
};

inline constexpr std::array<SynthColor, 4> kSynthColors = {{
    {"red", 230, 30, 30},
    {"green", 30, 200, 40},
    {"blue", 40, 60, 235},
    {"yellow", 235, 220, 40},
}};

inline constexpr std::size_t kSynthFrames = 16;
inline constexpr std::size_t kSynthSize = 32;

struct SynthSample {
  QAExample example;
  RawVideo video;
  std::size_t first_color = 0;   // temporal_order: index of the earlier color
  std::size_t second_color = 0;  // temporal_order: index of the later color
  std::size_t count = 0;         // repeat_count: number of appearances
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, SynthTask task, std::uint64_t index) {
  // splitmix64 over the combined key
  std::uint64_t z = seed * 0x9e3779b97f4a7c15ULL + (static_cast<std::uint64_t>(task) + 1) * 0xbf58476d1ce4e5b9ULL +
                    index * 0x94d049bb133111ebULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline RawVideo blank_video(Rng& rng) {
  RawVideo v(kSynthFrames, Frame(kSynthSize, kSynthSize));
  for (auto& f : v)
    for (auto& p : f.rgb) p = static_cast<std::uint8_t>(30 + rng.index(21));
  return v;
}

struct Square {
  std::size_t y, x, size;
};

inline Square random_square(Rng& rng) {
  const std::size_t size = 8 + rng.index(7);
  return {rng.index(kSynthSize - size + 1), rng.index(kSynthSize - size + 1), size};
}

inline void draw(Frame& f, const Square& s, const SynthColor& c) {
  for (std::size_t y = s.y; y < s.y + s.size; ++y)
    for (std::size_t x = s.x; x < s.x + s.size; ++x) {
      auto* p = f.pixel(y, x);
      p[0] = c.r;
      p[1] = c.g;
      p[2] = c.b;
    }
}

}  // namespace detail

/// Renders example `index` of a synthetic task. Everything is a pure function
/// of (task, seed, index).
///
/// frame_color: one static square; any frame answers the question.
/// temporal_order: color A occupies frames 0-5, frames 6-9 are empty, color B
///   occupies frames 10-15. The middle frame is always empty and the first
///   frame only shows the color named in the question.
/// repeat_count: the square is visible in m of four two-frame slots.
inline SynthSample synth_example(SynthTask task, std::uint64_t seed, std::uint64_t index) {
  Rng rng(detail::mix_seed(seed, task, index));
  SynthSample s;
  s.video = detail::blank_video(rng);
  QAExample& ex = s.example;
  ex.id = std::string(to_string(task)) + "-" + std::to_string(seed) + "-" + std::to_string(index);
  ex.video = "synth:" + std::string(to_string(task)) + ":" + std::to_string(seed) + ":" + std::to_string(index);
  const std::size_t ncolors = kSynthColors.size();

  switch (task) {
    case SynthTask::frame_color: {
      const std::size_t c = rng.index(ncolors);
      const auto sq = detail::random_square(rng);
      for (auto& f : s.video) detail::draw(f, sq, kSynthColors[c]);
      ex.question = "what color is the shape";
      ex.answers = {std::string(kSynthColors[c].name)};
      s.first_color = c;
      break;
    }
    case SynthTask::temporal_order: {
      // unordered pair, then a fair coin for the order
      std::size_t a = rng.index(ncolors);
      std::size_t b = rng.index(ncolors - 1);
      if (b >= a) ++b;
      if (a > b) std::swap(a, b);
      if (rng.index(2) == 1) std::swap(a, b);
      const auto sq_a = detail::random_square(rng);
      const auto sq_b = detail::random_square(rng);
      for (std::size_t t = 0; t < 6; ++t) detail::draw(s.video[t], sq_a, kSynthColors[a]);
      for (std::size_t t = 10; t < kSynthFrames; ++t) detail::draw(s.video[t], sq_b, kSynthColors[b]);
      ex.question = "what color appears after " + std::string(kSynthColors[a].name);
      ex.answers = {std::string(kSynthColors[b].name)};
      s.first_color = a;
      s.second_color = b;
      break;
    }
    case SynthTask::repeat_count: {
      const std::size_t m = 1 + rng.index(4);
      std::array<std::size_t, 4> slots = {0, 1, 2, 3};
      rng.shuffle(slots.begin(), slots.end());
      const std::size_t c = rng.index(ncolors);
      const auto sq = detail::random_square(rng);
      for (std::size_t k = 0; k < m; ++k) {
        const std::size_t start = slots[k] * 4;
        detail::draw(s.video[start], sq, kSynthColors[c]);
        detail::draw(s.video[start + 1], sq, kSynthColors[c]);
      }
      ex.question = "how many times does the shape appear";
      ex.answers = {std::to_string(m)};
      s.count = m;
      break;
    }
  }
  return s;
}

inline std::vector<QAExample> synth_dataset(SynthTask task, long n, std::uint64_t seed,
                                            std::uint64_t first_index = 0) {
  if (n <= 0) throw Error("synth_dataset: n must be >= 1");
  std::vector<QAExample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) out.push_back(synth_example(task, seed, first_index + static_cast<std::uint64_t>(i)).example);
  return out;
}

// ---------------------------------------------------------------------------
// Video files

/// Raw tensor file: header "T H W 3", then T*H*W*3 whitespace-separated pixel
/// values in [0, 255].
inline RawVideo read_raw_tensor_video(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open video '" + path + "'");
  std::size_t t = 0, h = 0, w = 0, c = 0;
  if (!(in >> t >> h >> w >> c) || c != 3 || t == 0 || h == 0 || w == 0)
    throw Error(path + ": header must be 'T H W 3' with positive sizes");
  RawVideo video(t, Frame(h, w));
  for (auto& f : video)
    for (auto& p : f.rgb) {
      double v;
      if (!(in >> v)) throw Error(path + ": truncated pixel data");
      p = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  return video;
}

inline void write_raw_tensor_video(const std::string& path, const RawVideo& video) {
  if (video.empty()) throw Error("write_raw_tensor_video: empty video");
  std::ofstream out(path);
  if (!out) throw Error("cannot write video '" + path + "'");
  out << video.size() << ' ' << video[0].height << ' ' << video[0].width << " 3\n";
  for (const auto& f : video) {
    for (std::size_t i = 0; i < f.rgb.size(); ++i) out << static_cast<int>(f.rgb[i]) << (i + 1 == f.rgb.size() ? '\n' : ' ');
  }
}

/// Binary PPM (P6) or PGM (P5), 8-bit.
inline Frame read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open image '" + path + "'");
  std::string magic;
  in >> magic;
  if (magic != "P6" && magic != "P5") throw Error(path + ": only binary P5/P6 images are supported");
  auto next_int = [&]() {
    while (true) {
      in >> std::ws;
      if (in.peek() == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      long v = -1;
      in >> v;
      return v;
    }
  };
  const long w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0 || maxval != 255) throw Error(path + ": bad header (need 8-bit image)");
  in.get();
  Frame f(static_cast<std::size_t>(h), static_cast<std::size_t>(w));
  const std::size_t px = f.height * f.width;
  if (magic == "P6") {
    in.read(reinterpret_cast<char*>(f.rgb.data()), static_cast<std::streamsize>(px * 3));
  } else {
    std::vector<std::uint8_t> gray(px);
    in.read(reinterpret_cast<char*>(gray.data()), static_cast<std::streamsize>(px));
    for (std::size_t i = 0; i < px; ++i) f.rgb[i * 3] = f.rgb[i * 3 + 1] = f.rgb[i * 3 + 2] = gray[i];
  }
  if (!in) throw Error(path + ": truncated image data");
  return f;
}

inline void write_pgm(const std::string& path, std::size_t height, std::size_t width,
                      const std::vector<std::uint8_t>& gray) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write image '" + path + "'");
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
}

/// Resolves a QA video field: a synthetic descriptor, a directory of
/// numbered .ppm/.pgm frames, or a raw tensor file. Relative paths are taken
/// against base_dir.
inline RawVideo load_video(const std::string& ref, const std::filesystem::path& base_dir = {}) {
  if (ref.rfind("synth:", 0) == 0) {
    const auto parts = split(ref, ':');
    if (parts.size() != 4) throw Error("bad synthetic descriptor '" + ref + "' (synth:<task>:<seed>:<index>)");
    try {
      return synth_example(parse_task(parts[1]), std::stoull(parts[2]), std::stoull(parts[3])).video;
    } catch (const std::invalid_argument&) {
      throw Error("bad synthetic descriptor '" + ref + "'");
    }
  }
  std::filesystem::path p(ref);
  if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
  if (std::filesystem::is_directory(p)) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(p)) {
      const auto ext = e.path().extension().string();
      if (ext == ".ppm" || ext == ".pgm") files.push_back(e.path());
    }
    if (files.empty()) throw Error("video directory '" + p.string() + "' has no .ppm/.pgm frames");
    std::sort(files.begin(), files.end());
    RawVideo video;
    for (const auto& f : files) video.push_back(read_pnm(f.string()));
    return video;
  }
  if (!std::filesystem::exists(p)) throw Error("video '" + p.string() + "' not found");
  return read_raw_tensor_video(p.string());
}

}  // namespace cotok
