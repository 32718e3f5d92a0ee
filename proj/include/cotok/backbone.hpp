#pragma once

#include <string>
#include <vector>

#include "cotok/autograd.hpp"
#include "cotok/config.hpp"
#include "cotok/ingest.hpp"
#include "cotok/params.hpp"

namespace cotok {

/// One emitted multi-scale video feature, {T'*H'*W', C}.
template <class T>
struct FeatureMap {
  Var<T> values;
  Geometry geometry;
  std::size_t stream_index = 0;
  std::size_t scale_index = 0;
};

inline std::string backbone_prefix(std::size_t stream) { return "backbone.s" + std::to_string(stream); }

/// Stacked 3x3x3 conv blocks (ReLU, spatial stride 2). Each tap gets a
/// pointwise projection to the model width.
template <class T>
void init_backbone(ParamStore<T>& store, const ModelConfig& config, Rng& rng) {
  const std::size_t width = config.backbone_channels;
  for (std::size_t k = 0; k < config.streams.size(); ++k) {
    const auto& s = config.streams[k];
    const std::string p = backbone_prefix(k);
    for (std::size_t b = 0; b < s.block_count(); ++b) {
      const std::size_t cin = b == 0 ? 3 : width;
      const std::string bp = p + ".block" + std::to_string(b);
      store.add_glorot(bp + ".w", {27 * cin, width}, 27 * cin, 27 * width, rng);
      store.add_constant(bp + ".b", {width}, T{0});
    }
    for (std::size_t j = 0; j < s.scale_taps; ++j) {
      const std::string tp = p + ".tap" + std::to_string(j);
      store.add_glorot(tp + ".w", {width, config.channels}, width, config.channels, rng);
      store.add_constant(tp + ".b", {config.channels}, T{0});
    }
  }
}

template <class T>
std::vector<FeatureMap<T>> encode_stream(Var<T> clip, const Geometry& clip_geometry, std::size_t stream,
                                         const ModelConfig& config, ParamBinder<T>& params) {
  const auto& spec = config.streams.at(stream);
  if (clip_geometry != Geometry{spec.frames, spec.height, spec.width} || clip.rows() != clip_geometry.cells() ||
      clip.cols() != 3)
    throw Error("encode_stream: clip " + shape_str(clip.shape()) + " does not match stream " +
                std::to_string(stream) + " geometry " + std::to_string(spec.frames) + "x" +
                std::to_string(spec.height) + "x" + std::to_string(spec.width) + "x3");
  const auto taps = tap_blocks(spec);
  const std::string p = backbone_prefix(stream);
  std::vector<FeatureMap<T>> out;
  Var<T> x = clip;
  Geometry g = clip_geometry;
  const Conv3dSpec block_conv{3, 1, 2};
  for (std::size_t b = 0; b < spec.block_count(); ++b) {
    const std::string bp = p + ".block" + std::to_string(b);
    x = relu(conv3d(x, g, params(bp + ".w"), params(bp + ".b"), block_conv));
    g = block_conv.output(g);
    const std::size_t j = out.size();
    if (j < taps.size() && taps[j] == b) {
      const std::string tp = p + ".tap" + std::to_string(j);
      Var<T> f = add_bias(matmul(x, params(tp + ".w")), params(tp + ".b"));
      out.push_back({f, g, stream, j});
    }
  }
  return out;
}

/// Runs every stream and returns the S features in (stream, scale) order.
template <class T>
std::vector<FeatureMap<T>> collect_features(const std::vector<VideoClip>& clips, const ModelConfig& config,
                                            ParamBinder<T>& params) {
  if (clips.size() != config.streams.size())
    throw Error("collect_features: expected " + std::to_string(config.streams.size()) + " stream clips, got " +
                std::to_string(clips.size()));
  std::vector<FeatureMap<T>> features;
  for (std::size_t k = 0; k < clips.size(); ++k) {
    Var<T> x = params.tape().constant(clips[k].values.template cast<T>());
    for (auto& f : encode_stream(x, clips[k].geometry, k, config, params)) features.push_back(f);
  }
  return features;
}

}  // namespace cotok
