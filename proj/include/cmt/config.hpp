// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmt/error.hpp"

namespace cmt {

struct ConvLayer {
  std::size_t kernel = 4;
  std::size_t stride = 2;
  std::size_t out_channels = 32;

  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

inline std::vector<std::string> default_emotion_labels() {
  return {"anger", "contempt", "disgust", "fear", "happiness", "sadness", "surprise", "neutral"};
}

/// Model geometry and hyperparameters. Defaults are the desk-scale preset.
struct ModelConfig {
  // visual stream
  std::size_t image_height = 16;
  std::size_t image_width = 16;
  std::size_t image_channels = 1;
  std::size_t patch = 4;
  std::size_t d_visual = 32;
  std::size_t blocks_visual = 2;

  // acoustic stream
  std::size_t audio_length = 256;
  double sample_rate = 4096.0;
  std::vector<ConvLayer> conv = {{4, 2, 16}, {4, 2, 32}, {4, 2, 32}};
  std::size_t d_audio = 32;
  std::size_t blocks_audio = 2;

  // text stream
  std::size_t vocab_size = 64;
  std::size_t max_text_length = 8;
  std::size_t d_text = 32;
  std::size_t blocks_text = 2;

  // shared
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  double dropout = 0.1;
  double ln_eps = 1e-5;

  // fusion / classifier
  std::size_t fusion_heads = 4;
  bool fusion_residual = true;
  bool modality_type_embeddings = true;
  /// visual, acoustic, textual; a disabled stream contributes a zero embedding.
  std::array<bool, 3> modalities = {true, true, true};
  std::vector<std::string> labels = default_emotion_labels();

  std::size_t num_classes() const noexcept { return labels.size(); }
  std::size_t patch_count() const noexcept { return (image_height / patch) * (image_width / patch); }
  std::size_t patch_dim() const noexcept { return patch * patch * image_channels; }

  /// Frames produced by the conv stack for `length` input samples (0 if too short).
  std::size_t audio_frames(std::size_t length) const noexcept {
    std::size_t len = length;
    for (const auto& l : conv) {
      if (len < l.kernel) return 0;
      len = (len - l.kernel) / l.stride + 1;
    }
    return len;
  }

  /// Smallest waveform length that yields at least one frame.
  std::size_t min_audio_length() const noexcept {
    std::size_t need = 1;
    for (auto it = conv.rbegin(); it != conv.rend(); ++it) need = (need - 1) * it->stride + it->kernel;
    return need;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (patch == 0 || image_height % patch || image_width % patch)
      fail("image " + std::to_string(image_height) + "x" + std::to_string(image_width) +
           " is not divisible by patch size " + std::to_string(patch));
    if (image_channels == 0) fail("image_channels must be positive");
    for (auto [w, name] : {std::pair{d_visual, "d_visual"}, {d_audio, "d_audio"}, {d_text, "d_text"}, {d_model, "d_model"}})
      if (w == 0 || w % heads) fail(std::string(name) + "=" + std::to_string(w) + " is not divisible by heads=" + std::to_string(heads));
    if (heads == 0) fail("heads must be positive");
    if (fusion_heads == 0 || d_model % fusion_heads)
      fail("d_model=" + std::to_string(d_model) + " is not divisible by fusion_heads=" + std::to_string(fusion_heads));
    if (conv.empty()) fail("conv stack must have at least one layer");
    for (const auto& l : conv)
      if (l.kernel == 0 || l.stride == 0 || l.out_channels == 0) fail("conv layers need positive kernel/stride/channels");
    if (conv.back().out_channels != d_audio)
      fail("last conv layer must output d_audio=" + std::to_string(d_audio) + " channels");
    if (audio_frames(audio_length) == 0)
      fail("audio_length " + std::to_string(audio_length) + " is shorter than the conv receptive field " +
           std::to_string(min_audio_length()));
    if (vocab_size < 4) fail("vocab_size must leave room for reserved tokens");
    if (max_text_length == 0) fail("max_text_length must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
    if (!(ln_eps > 0.0)) fail("ln_eps must be positive");
    if (mlp_ratio == 0) fail("mlp_ratio must be positive");
    if (labels.size() < 2) fail("need at least two emotion categories");
    if (std::set<std::string>(labels.begin(), labels.end()).size() != labels.size()) fail("emotion labels must be unique");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ConvLayer& l) {
  j = {{"kernel", l.kernel}, {"stride", l.stride}, {"out_channels", l.out_channels}};
}
inline void from_json(const nlohmann::json& j, ConvLayer& l) {
  l.kernel = j.at("kernel").get<std::size_t>();
  l.stride = j.at("stride").get<std::size_t>();
  l.out_channels = j.at("out_channels").get<std::size_t>();
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"image_height", c.image_height}, {"image_width", c.image_width}, {"image_channels", c.image_channels},
       {"patch", c.patch}, {"d_visual", c.d_visual}, {"blocks_visual", c.blocks_visual},
       {"audio_length", c.audio_length}, {"sample_rate", c.sample_rate}, {"conv", c.conv},
       {"d_audio", c.d_audio}, {"blocks_audio", c.blocks_audio}, {"vocab_size", c.vocab_size},
       {"max_text_length", c.max_text_length}, {"d_text", c.d_text}, {"blocks_text", c.blocks_text},
       {"d_model", c.d_model}, {"heads", c.heads}, {"mlp_ratio", c.mlp_ratio}, {"dropout", c.dropout},
       {"ln_eps", c.ln_eps}, {"fusion_heads", c.fusion_heads}, {"fusion_residual", c.fusion_residual},
       {"modality_type_embeddings", c.modality_type_embeddings}, {"modalities", c.modalities},
       {"labels", c.labels}};
}

/// Missing keys keep their defaults, so partial config files are accepted.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  auto opt = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  opt("image_height", c.image_height);
  opt("image_width", c.image_width);
  opt("image_channels", c.image_channels);
  opt("patch", c.patch);
  opt("d_visual", c.d_visual);
  opt("blocks_visual", c.blocks_visual);
  opt("audio_length", c.audio_length);
  opt("sample_rate", c.sample_rate);
  opt("conv", c.conv);
  opt("d_audio", c.d_audio);
  opt("blocks_audio", c.blocks_audio);
  opt("vocab_size", c.vocab_size);
  opt("max_text_length", c.max_text_length);
  opt("d_text", c.d_text);
  opt("blocks_text", c.blocks_text);
  opt("d_model", c.d_model);
  opt("heads", c.heads);
  opt("mlp_ratio", c.mlp_ratio);
  opt("dropout", c.dropout);
  opt("ln_eps", c.ln_eps);
  opt("fusion_heads", c.fusion_heads);
  opt("fusion_residual", c.fusion_residual);
  opt("modality_type_embeddings", c.modality_type_embeddings);
  opt("modalities", c.modalities);
  opt("labels", c.labels);
}

/// FNV-1a 64 over the canonical JSON form, as 16 hex digits.
inline std::string config_hash(const ModelConfig& c) {
  const std::string s = nlohmann::json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Configuration small enough for exhaustive finite-difference checks.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.image_height = c.image_width = 4;
  c.patch = 2;
  c.d_visual = c.d_audio = c.d_text = c.d_model = 4;
  c.heads = c.fusion_heads = 2;
  c.blocks_visual = c.blocks_audio = c.blocks_text = 1;
  c.audio_length = 32;
  c.conv = {{4, 2, 3}, {2, 2, 4}};
  c.vocab_size = 8;
  c.max_text_length = 4;
  c.mlp_ratio = 2;
  c.labels = {"anger", "happiness", "neutral"};
  return c;
}

}  // namespace cmt
