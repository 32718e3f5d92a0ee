#pragma once

// Attention-map export: one text file per (iteration, feature) with an
// "N T H W" header followed by the maps in token-major order, plus one PGM
// per token and frame scaled to the map's own maximum.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <string>
#include <vector>

#include "cotok/cotokenizer.hpp"
#include "cotok/ingest.hpp"

namespace cotok {

inline std::string attention_basename(std::size_t iteration, std::size_t stream, std::size_t scale) {
  return "iter" + std::to_string(iteration) + "_s" + std::to_string(stream) + "_k" + std::to_string(scale);
}

template <class T>
void write_attention_text(const std::string& path, const AttentionMaps<T>& maps) {
  const auto tm = maps.token_major();
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  out << tm.shape[0] << ' ' << tm.shape[1] << ' ' << tm.shape[2] << ' ' << tm.shape[3] << "\n";
  out << std::setprecision(9);
  const std::size_t row = tm.shape[3];
  for (std::size_t i = 0; i < tm.data.size(); ++i) out << tm.data[i] << ((i + 1) % row == 0 ? '\n' : ' ');
}

/// Writes text and images for every map into `dir`; returns the files written.
template <class T>
std::vector<std::filesystem::path> export_attention(const std::filesystem::path& dir,
                                                    const std::vector<std::vector<AttentionMaps<T>>>& iterations,
                                                    bool images = true) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  for (const auto& maps : iterations)
    for (const auto& m : maps) {
      const std::string base = attention_basename(m.iteration, m.stream_index, m.scale_index);
      const auto txt = dir / (base + ".txt");
      write_attention_text(txt.string(), m);
      written.push_back(txt);
      if (!images) continue;
      const auto tm = m.token_major();
      const std::size_t n = tm.shape[0], t = tm.shape[1], h = tm.shape[2], w = tm.shape[3];
      for (std::size_t k = 0; k < n; ++k) {
        const auto begin = tm.data.begin() + static_cast<long>(k * t * h * w);
        const T peak = *std::max_element(begin, begin + static_cast<long>(t * h * w));
        for (std::size_t f = 0; f < t; ++f) {
          std::vector<std::uint8_t> gray(h * w);
          for (std::size_t p = 0; p < h * w; ++p) {
            const double v = peak > 0 ? static_cast<double>(tm.data[((k * t) + f) * h * w + p] / peak) : 0.0;
            gray[p] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
          }
          const auto img = dir / (base + "_tok" + std::to_string(k) + "_f" + std::to_string(f) + ".pgm");
          write_pgm(img.string(), h, w, gray);
          written.push_back(img);
        }
      }
    }
  return written;
}

}  // namespace cotok
