// SPDX-License-Identifier: Apache-2.0
//
// Modality-specific streams. Each maps one raw input to a [1 x D]
// embedding row on the caller's tape:
//
//   visual   patchify -> patch embedding + positions -> blocks -> mean-pool -> proj
//   acoustic strided conv stack (GELU) -> positions -> blocks -> mean-pool -> proj
//   textual  token embedding + positions -> blocks -> CLS row -> proj
#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "cmt/config.hpp"
#include "cmt/layers.hpp"

namespace cmt {

enum class Modality : std::uint8_t { visual = 0, acoustic = 1, textual = 2 };

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::visual: return "visual";
    case Modality::acoustic: return "acoustic";
    case Modality::textual: return "textual";
  }
  return "unknown";
}

inline Modality parse_modality(const std::string& s) {
  for (auto m : {Modality::visual, Modality::acoustic, Modality::textual})
    if (s == modality_name(m)) return m;
  throw ConfigError("unknown modality '" + s + "' (visual, acoustic, textual)");
}

struct VisualFrame {
  Tensor pixels;  ///< H x W x channels, values in [0, 1]

  std::size_t height() const { return pixels.dim(0); }
  std::size_t width() const { return pixels.dim(1); }
  std::size_t channels() const { return pixels.dim(2); }
};

struct AudioWaveform {
  Tensor samples;  ///< [T], amplitude in [-1, 1]
  double sample_rate = 4096.0;
};

/// Reserved token ids.
inline constexpr std::uint32_t kClsToken = 0;
inline constexpr std::uint32_t kPadToken = 1;
inline constexpr std::uint32_t kUnkToken = 2;
inline constexpr std::uint32_t kFirstWordToken = 3;

struct TokenSequence {
  std::vector<std::uint32_t> ids;  ///< ids[0] == kClsToken
};

struct ModalityEmbedding {
  Tensor vector;  ///< [D]
  Modality modality = Modality::visual;
};

/// Whitespace tokenizer over a fixed toy vocabulary. Word i (for
/// i >= kFirstWordToken) is spelled "w<i>".
class Vocabulary {
 public:
  explicit Vocabulary(std::size_t size) : size_(size) {
    if (size <= kFirstWordToken) throw ConfigError("vocabulary too small for reserved tokens");
    for (std::size_t i = kFirstWordToken; i < size; ++i) index_.emplace(word(i), static_cast<std::uint32_t>(i));
  }

  std::size_t size() const noexcept { return size_; }

  static std::string word(std::size_t id) {
    switch (id) {
      case kClsToken: return "[CLS]";
      case kPadToken: return "[PAD]";
      case kUnkToken: return "[UNK]";
      default: return "w" + std::to_string(id);
    }
  }

  /// CLS + words, truncated to max_length tokens in total.
  TokenSequence tokenize(const std::string& text, std::size_t max_length) const {
    TokenSequence seq{{kClsToken}};
    std::istringstream in(text);
    std::string w;
    while (seq.ids.size() < max_length && in >> w) {
      auto it = index_.find(w);
      seq.ids.push_back(it == index_.end() ? kUnkToken : it->second);
    }
    return seq;
  }

  std::string detokenize(const TokenSequence& seq) const {
    std::string out;
    for (std::size_t i = 1; i < seq.ids.size(); ++i) out += (i > 1 ? " " : "") + word(seq.ids[i]);
    return out;
  }

 private:
  std::size_t size_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

// --- visual ----------------------------------------------------------------

/// Splits a frame into non-overlapping P x P patches, ordered row-major over
/// the patch grid; each patch is flattened over (row, col, channel).
inline Tensor patchify(const VisualFrame& frame, std::size_t P) {
  const Tensor& px = frame.pixels;
  if (px.ndim() != 3) throw DimensionError("visual frame must be H x W x C, got " + shape_str(px.shape()));
  const std::size_t H = px.dim(0), W = px.dim(1), C = px.dim(2);
  if (P == 0 || H % P != 0 || W % P != 0)
    throw DimensionError("frame " + std::to_string(H) + "x" + std::to_string(W) + " is not divisible into " +
                         std::to_string(P) + "x" + std::to_string(P) + " patches (H=" + std::to_string(H) +
                         ", W=" + std::to_string(W) + ", P=" + std::to_string(P) + ")");
  const std::size_t gw = W / P;
  const std::size_t N = (H / P) * gw;
  const std::size_t len = P * P * C;
  Tensor out({N, len});
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t r0 = (n / gw) * P, c0 = (n % gw) * P;
    std::size_t o = n * len;
    for (std::size_t r = 0; r < P; ++r)
      for (std::size_t c = 0; c < P; ++c)
        for (std::size_t ch = 0; ch < C; ++ch) out[o++] = px[((r0 + r) * W + (c0 + c)) * C + ch];
  }
  return out;
}

/// z0 = patches * E + E_pos.
inline Var embed_patches(Var patches, Var E, Var E_pos) {
  Var z = matmul(patches, E);
  if (z.value().shape() != E_pos.value().shape())
    throw DimensionError("embed_patches: positional table " + shape_str(E_pos.value().shape()) +
                         " does not match embedded patches " + shape_str(z.value().shape()));
  return add(z, E_pos);
}

inline BlockOptions block_options(const ModelConfig& c) { return {c.heads, c.dropout, c.ln_eps}; }

/// Runs `count` encoder blocks named prefix.block<i>.
inline Var run_blocks(ParamBinder& p, Var z, const std::string& prefix, std::size_t count, const BlockOptions& opt,
                      Rng& rng, bool training, std::vector<AttentionTrace>* traces = nullptr) {
  for (std::size_t i = 0; i < count; ++i) {
    AttentionTrace* tr = nullptr;
    if (traces) tr = &traces->emplace_back();
    z = encoder_block(p, z, prefix + ".block" + std::to_string(i), opt, rng, training, tr);
  }
  return z;
}

/// Pre-pooling visual hidden states [N x d_visual].
inline Var visual_tokens(ParamBinder& p, const ModelConfig& c, const VisualFrame& frame, Rng& rng, bool training,
                         std::vector<AttentionTrace>* traces = nullptr) {
  if (frame.pixels.ndim() != 3 || frame.height() != c.image_height || frame.width() != c.image_width ||
      frame.channels() != c.image_channels)
    throw InputError("visual frame " + shape_str(frame.pixels.shape()) + " does not match configured " +
                     std::to_string(c.image_height) + "x" + std::to_string(c.image_width) + "x" +
                     std::to_string(c.image_channels));
  Var patches = p.tape().constant(patchify(frame, c.patch));
  Var z = embed_patches(patches, p("visual.patch_embed"), p("visual.pos"));
  return run_blocks(p, z, "visual", c.blocks_visual, block_options(c), rng, training, traces);
}

inline Var encode_visual(ParamBinder& p, const ModelConfig& c, const VisualFrame& frame, Rng& rng, bool training) {
  return linear(p, mean_rows(visual_tokens(p, c, frame, rng, training)), "visual.proj");
}

// --- acoustic --------------------------------------------------------------

/// Strided 1-D convolution stack over a [T x 1] signal, GELU after each
/// layer. Layer l has weight audio.conv<l>.w [(kernel*in) x out].
inline Var conv_encode_audio(ParamBinder& p, const std::vector<ConvLayer>& layers, Var signal) {
  Var x = signal;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    if (x.value().dim(0) < L.kernel)
      throw DimensionError("input too short for conv layer " + std::to_string(l) + ": " +
                           std::to_string(x.value().dim(0)) + " frames, kernel " + std::to_string(L.kernel));
    x = gelu(linear(p, im2col1d(x, L.kernel, L.stride), "audio.conv" + std::to_string(l)));
  }
  return x;
}

inline Var audio_signal(ParamBinder& p, const ModelConfig& c, const AudioWaveform& wave) {
  const Tensor& s = wave.samples;
  if (s.ndim() != 1) throw InputError("waveform must be 1-D, got " + shape_str(s.shape()));
  if (!(wave.sample_rate > 0.0)) throw InputError("waveform sample_rate must be positive");
  if (s.size() < c.min_audio_length())
    throw DimensionError("waveform too short: " + std::to_string(s.size()) + " samples, minimum " +
                         std::to_string(c.min_audio_length()));
  if (c.audio_frames(s.size()) > c.audio_frames(c.audio_length))
    throw InputError("waveform of " + std::to_string(s.size()) + " samples exceeds configured length " +
                     std::to_string(c.audio_length));
  return p.tape().constant(s.reshaped({s.size(), 1}));
}

/// Adds learned frame positions then applies the acoustic blocks.
inline Var contextualize_audio(ParamBinder& p, const ModelConfig& c, Var frames, Rng& rng, bool training,
                               std::vector<AttentionTrace>* traces = nullptr) {
  Var pos = head_rows(p("audio.pos"), frames.value().dim(0));
  return run_blocks(p, add(frames, pos), "audio", c.blocks_audio, block_options(c), rng, training, traces);
}

inline Var encode_audio(ParamBinder& p, const ModelConfig& c, const AudioWaveform& wave, Rng& rng, bool training) {
  Var frames = conv_encode_audio(p, c.conv, audio_signal(p, c, wave));
  return linear(p, mean_rows(contextualize_audio(p, c, frames, rng, training)), "audio.proj");
}

/// Frames replaced by the learned mask vector; at least one is always chosen.
inline std::vector<std::size_t> draw_frame_mask(std::size_t frames, double mask_rate, Rng& rng) {
  std::vector<std::size_t> masked;
  while (masked.empty())
    for (std::size_t f = 0; f < frames; ++f)
      if (rng.bernoulli(mask_rate)) masked.push_back(f);
  return masked;
}

/// Masked-frame reconstruction objective: masked frames are replaced by
/// audio.mask before contextualization; the loss is the MSE between the
/// outputs at masked positions and the original latent frames.
inline Var masked_frame_pretrain_loss(ParamBinder& p, const ModelConfig& c, Var frames, double mask_rate, Rng& rng,
                                      bool training = true) {
  const std::size_t F = frames.value().dim(0);
  if (F < 2) throw ConfigError("masked-frame pretraining needs at least 2 frames, got " + std::to_string(F));
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw ConfigError("mask_rate must be in (0, 1)");
  auto masked = draw_frame_mask(F, mask_rate, rng);
  Var corrupted = replace_rows(frames, masked, p("audio.mask"));
  Var out = contextualize_audio(p, c, corrupted, rng, training);
  const Tensor& orig = frames.value();
  const std::size_t d = orig.dim(1);
  Tensor target({masked.size(), d});
  for (std::size_t i = 0; i < masked.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) target[i * d + j] = orig[masked[i] * d + j];
  return mse(gather_rows(out, masked), target);
}

// --- textual ---------------------------------------------------------------

inline void validate_tokens(const ModelConfig& c, const TokenSequence& t) {
  if (t.ids.empty() || t.ids[0] != kClsToken) throw InputError("token sequence must start with the CLS token");
  if (t.ids.size() > c.max_text_length)
    throw InputError("token sequence of length " + std::to_string(t.ids.size()) + " exceeds max " +
                     std::to_string(c.max_text_length));
  for (auto id : t.ids)
    if (id >= c.vocab_size)
      throw InputError("token id " + std::to_string(id) + " is outside the vocabulary of " +
                       std::to_string(c.vocab_size));
}

/// Hidden states [n x d_text] for all positions.
inline Var text_tokens(ParamBinder& p, const ModelConfig& c, const TokenSequence& tokens, Rng& rng, bool training,
                       std::vector<AttentionTrace>* traces = nullptr) {
  validate_tokens(c, tokens);
  std::vector<std::size_t> ids(tokens.ids.begin(), tokens.ids.end());
  Var x = add(gather_rows(p("text.token_embed"), ids), head_rows(p("text.pos"), ids.size()));
  return run_blocks(p, x, "text", c.blocks_text, block_options(c), rng, training, traces);
}

inline Var encode_text(ParamBinder& p, const ModelConfig& c, const TokenSequence& tokens, Rng& rng, bool training) {
  return linear(p, head_rows(text_tokens(p, c, tokens, rng, training), 1), "text.proj");
}

// --- parameter initialization ---------------------------------------------

inline void init_visual_params(ParameterSet& ps, const ModelConfig& c, Rng& rng) {
  ps["visual.patch_embed"] = init_matrix(c.patch_dim(), c.d_visual, rng);
  ps["visual.pos"] = init_matrix(c.patch_count(), c.d_visual, rng);
  for (std::size_t i = 0; i < c.blocks_visual; ++i)
    init_encoder_block(ps, "visual.block" + std::to_string(i), c.d_visual, c.mlp_ratio, rng);
  init_linear(ps, "visual.proj", c.d_visual, c.d_model, rng);
}

inline void init_audio_params(ParameterSet& ps, const ModelConfig& c, Rng& rng) {
  std::size_t in = 1;
  for (std::size_t l = 0; l < c.conv.size(); ++l) {
    init_linear(ps, "audio.conv" + std::to_string(l), c.conv[l].kernel * in, c.conv[l].out_channels, rng);
    in = c.conv[l].out_channels;
  }
  ps["audio.pos"] = init_matrix(c.audio_frames(c.audio_length), c.d_audio, rng);
  ps["audio.mask"] = init_uniform({c.d_audio}, 1, c.d_audio, rng);
  for (std::size_t i = 0; i < c.blocks_audio; ++i)
    init_encoder_block(ps, "audio.block" + std::to_string(i), c.d_audio, c.mlp_ratio, rng);
  init_linear(ps, "audio.proj", c.d_audio, c.d_model, rng);
}

inline void init_text_params(ParameterSet& ps, const ModelConfig& c, Rng& rng) {
  ps["text.token_embed"] = init_matrix(c.vocab_size, c.d_text, rng);
  ps["text.pos"] = init_matrix(c.max_text_length, c.d_text, rng);
  for (std::size_t i = 0; i < c.blocks_text; ++i)
    init_encoder_block(ps, "text.block" + std::to_string(i), c.d_text, c.mlp_ratio, rng);
  init_linear(ps, "text.proj", c.d_text, c.d_model, rng);
}

}  // namespace cmt
