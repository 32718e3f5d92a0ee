#pragma once

// Analytic floating-point operation counts. A multiply-accumulate counts as
// two operations; softmax, normalisation and activations are not counted.

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cotok/config.hpp"
#include "cotok/cotokenizer.hpp"

namespace cotok {

using FlopCount = std::uint64_t;

namespace detail {

inline FlopCount checked_mul(FlopCount a, FlopCount b) {
  FlopCount out;
  if (__builtin_mul_overflow(a, b, &out)) throw Error("flop count overflows 64 bits");
  return out;
}

inline FlopCount checked_add(FlopCount a, FlopCount b) {
  FlopCount out;
  if (__builtin_add_overflow(a, b, &out)) throw Error("flop count overflows 64 bits");
  return out;
}

}  // namespace detail

/// 2 * m * k * n
inline FlopCount count_matmul(FlopCount m, FlopCount k, FlopCount n) {
  return detail::checked_mul(detail::checked_mul(detail::checked_mul(2, m), k), n);
}

/// Self-attention (Q, K, V, O projections plus scores and weighted sum) and
/// the 4x MLP for a sequence of length m.
inline FlopCount transformer_layer_flops(FlopCount m, FlopCount c) {
  FlopCount f = detail::checked_mul(4, count_matmul(m, c, c));
  f = detail::checked_add(f, detail::checked_mul(2, count_matmul(m, c, m)));
  f = detail::checked_add(f, count_matmul(m, c, 4 * c));
  return detail::checked_add(f, count_matmul(m, 4 * c, c));
}

/// Cross-attention of `queries` rows over `keys` memory rows.
inline FlopCount cross_attention_flops(FlopCount queries, FlopCount keys, FlopCount c) {
  FlopCount f = detail::checked_mul(2, count_matmul(queries, c, c));
  f = detail::checked_add(f, detail::checked_mul(2, count_matmul(keys, c, c)));
  return detail::checked_add(f, detail::checked_mul(2, count_matmul(queries, c, keys)));
}

struct FlopReport {
  std::vector<std::pair<std::string, FlopCount>> per_module;
  FlopCount total = 0;
  FlopCount params = 0;
  std::uint64_t fingerprint = 0;

  FlopCount module(const std::string& name) const {
    for (const auto& [n, v] : per_module)
      if (n == name) return v;
    throw Error("FlopReport: no module '" + name + "'");
  }
};

/// Parameter count of init_params(config), computed from shapes alone.
inline FlopCount count_params(const ModelConfig& c) {
  using detail::checked_add;
  using detail::checked_mul;
  const FlopCount ch = c.channels, bc = c.backbone_channels;
  FlopCount n = 0;
  for (const auto& s : c.streams) {
    for (std::size_t b = 0; b < s.block_count(); ++b) n = checked_add(n, 27 * (b == 0 ? 3 : bc) * bc + bc);
    n = checked_add(n, checked_mul(s.scale_taps, bc * ch + ch));
  }
  const FlopCount self_layer = 2 * ch + 4 * (ch * ch + ch) + 2 * ch + ch * 4 * ch + 4 * ch + 4 * ch * ch + ch;
  const FlopCount cross_layer = self_layer + 2 * ch + 4 * (ch * ch + ch);
  n = checked_add(n, checked_mul(c.vocab_size, ch));
  n = checked_add(n, self_layer);
  const FlopCount fusion_sets = c.share_fusion_weights ? std::min<std::size_t>(c.fusion_layers, 1) : c.fusion_layers;
  n = checked_add(n, checked_mul(fusion_sets, self_layer));
  const FlopCount kvol = c.psi_kernel * c.psi_kernel * c.psi_kernel;
  for (std::size_t l = 0; l < tokenizer_iterations(c); ++l)
    for (const auto& f : c.features) {
      n = checked_add(n, checked_mul(ch, f.geometry.cells()));
      n = checked_add(n, checked_mul(ch, tokenizer_context_length(c, l)));
      n = checked_add(n, checked_mul(kvol * ch, c.tokens_per_feature));
    }
  n = checked_add(n, checked_mul(c.decoder_layers, cross_layer));
  n = checked_add(n, 2 * ch + checked_mul(ch, c.vocab_size) + c.vocab_size);
  n = checked_add(n, checked_mul(ch, c.answer_vocab_size) + c.answer_vocab_size);
  return n;
}

/// Per-module cost of one forward pass with a full-length decode.
inline FlopReport estimate(const ModelConfig& config) {
  using detail::checked_add;
  using detail::checked_mul;
  const ModelConfig c = validate(config);
  const FlopCount ch = c.channels, bc = c.backbone_channels;

  FlopCount backbone = 0;
  for (std::size_t k = 0; k < c.streams.size(); ++k) {
    const auto& s = c.streams[k];
    Geometry g{s.frames, s.height, s.width};
    for (std::size_t b = 0; b < s.block_count(); ++b) {
      g = block_output(g);
      backbone = checked_add(backbone, count_matmul(g.cells(), 27 * (b == 0 ? 3 : bc), bc));
    }
  }
  for (const auto& f : c.features) backbone = checked_add(backbone, count_matmul(f.geometry.cells(), bc, ch));

  const FlopCount text = transformer_layer_flops(c.text_max_len, ch);

  FlopCount tokenizer = 0;
  const FlopCount kvol = c.psi_kernel * c.psi_kernel * c.psi_kernel;
  for (std::size_t l = 0; l < tokenizer_iterations(c); ++l) {
    const FlopCount lr = tokenizer_context_length(c, l);
    for (const auto& f : c.features) {
      const FlopCount cells = f.geometry.cells();
      tokenizer = checked_add(tokenizer, count_matmul(lr, ch, cells));
      tokenizer = checked_add(tokenizer, count_matmul(ch, lr, cells));
      tokenizer = checked_add(tokenizer, count_matmul(cells, kvol * ch, c.tokens_per_feature));
      tokenizer = checked_add(tokenizer, count_matmul(c.tokens_per_feature, cells, ch));
    }
  }

  const FlopCount fusion = checked_mul(c.fusion_layers, transformer_layer_flops(c.fused_length, ch));

  const FlopCount dec_len = c.text_max_len;
  FlopCount decoder = checked_mul(c.decoder_layers, checked_add(transformer_layer_flops(dec_len, ch),
                                                                cross_attention_flops(dec_len, c.fused_length, ch)));
  decoder = checked_add(decoder, count_matmul(dec_len, ch, c.vocab_size));

  const FlopCount fc = count_matmul(1, ch, c.answer_vocab_size);

  FlopReport r;
  r.per_module = {{"backbone", backbone}, {"text_encoder", text}, {"tokenizer", tokenizer},
                  {"fusion", fusion},     {"decoder", decoder},   {"fc_head", fc}};
  for (const auto& [_, v] : r.per_module) r.total = checked_add(r.total, v);
  r.params = count_params(c);
  r.fingerprint = fingerprint(c);
  return r;
}

struct ComparisonRow {
  std::string name;
  FlopReport report;
  double ratio = 1.0;  // total relative to the first config given
};

/// Rows sorted by total (stable), ratios against the first input config.
inline std::vector<ComparisonRow> compare(const std::vector<std::pair<std::string, ModelConfig>>& configs) {
  if (configs.size() < 2) throw Error("compare: need at least two configs");
  std::vector<ComparisonRow> rows;
  for (const auto& [name, cfg] : configs) rows.push_back({name, estimate(cfg), 1.0});
  const double base = static_cast<double>(rows.front().report.total);
  for (auto& row : rows) row.ratio = base > 0 ? static_cast<double>(row.report.total) / base : 0.0;
  std::stable_sort(rows.begin(), rows.end(),
                   [](const auto& a, const auto& b) { return a.report.total < b.report.total; });
  return rows;
}

inline std::string format_report(const FlopReport& r) {
  std::ostringstream out;
  out << std::left << std::setw(14) << "module" << std::right << std::setw(22) << "flops" << std::setw(12) << "gflops"
      << "\n";
  auto line = [&](const std::string& name, FlopCount v) {
    out << std::left << std::setw(14) << name << std::right << std::setw(22) << v << std::setw(12) << std::fixed
        << std::setprecision(3) << static_cast<double>(v) / 1e9 << "\n";
  };
  for (const auto& [n, v] : r.per_module) line(n, v);
  line("total", r.total);
  out << "params " << r.params << "\n";
  out << "config " << std::hex << std::setw(16) << std::setfill('0') << r.fingerprint << std::dec << std::setfill(' ')
      << "\n";
  out << "(multiply-accumulate = 2 flops; softmax, normalisation and activations not counted)\n";
  return out.str();
}

inline std::string report_csv(const FlopReport& r) {
  std::ostringstream out;
  out << "module,flops\n";
  for (const auto& [n, v] : r.per_module) out << n << ',' << v << "\n";
  out << "total," << r.total << "\n";
  out << "params," << r.params << "\n";
  return out.str();
}

inline std::string format_comparison(const std::vector<ComparisonRow>& rows) {
  std::ostringstream out;
  out << std::left << std::setw(20) << "config" << std::right << std::setw(22) << "flops" << std::setw(12) << "gflops"
      << std::setw(10) << "ratio" << "\n";
  for (const auto& row : rows)
    out << std::left << std::setw(20) << row.name << std::right << std::setw(22) << row.report.total << std::setw(12)
        << std::fixed << std::setprecision(3) << static_cast<double>(row.report.total) / 1e9 << std::setw(10)
        << std::setprecision(3) << row.ratio << "\n";
  return out.str();
}

}  // namespace cotok
