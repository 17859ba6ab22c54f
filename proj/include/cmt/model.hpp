// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>

#include "cmt/fusion.hpp"
#include "cmt/sample.hpp"

namespace cmt {

/// Configuration plus every trainable tensor of the network.
struct CmtModel {
  ModelConfig config;
  ParameterSet params;
};

inline CmtModel init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  CmtModel m{config, {}};
  Rng root(seed);
  Rng rv = root.split({1}), ra = root.split({2}), rt = root.split({3}), rf = root.split({4});
  init_visual_params(m.params, config, rv);
  init_audio_params(m.params, config, ra);
  init_text_params(m.params, config, rt);
  init_fusion_params(m.params, config, rf);
  return m;
}

/// Optional intermediate values of a forward pass.
struct ForwardTrace {
  std::array<Tensor, 3> embeddings;  ///< v, a, t rows fed to fusion
  AttentionTrace fusion_attention;
  Tensor fused;    ///< z_cmt, 3 x D
  Tensor refined;  ///< refined tokens, 3 x D
  Tensor pooled;   ///< z_final, [1 x D]
};

/// Embedding row [1 x D] for one modality; zeros when the stream is disabled.
inline Var modality_row(ParamBinder& p, const ModelConfig& c, const MultimodalSample& s, Modality m, Rng& rng,
                        bool training) {
  if (!c.modalities[static_cast<std::size_t>(m)]) return p.tape().constant(Tensor({1, c.d_model}, 0.0));
  switch (m) {
    case Modality::visual: return encode_visual(p, c, s.visual, rng, training);
    case Modality::acoustic: return encode_audio(p, c, s.audio, rng, training);
    case Modality::textual: return encode_text(p, c, s.text, rng, training);
  }
  throw InputError("unknown modality");
}

/// Full network to logits [1 x C]. Every stream draws dropout noise from
/// its own child of `rng`, so results do not depend on evaluation order.
inline Var forward_logits(ParamBinder& p, const ModelConfig& c, const MultimodalSample& s, const Rng& rng,
                          bool training, ForwardTrace* trace = nullptr) {
  Rng rv = rng.split({1}), ra = rng.split({2}), rt = rng.split({3}), rf = rng.split({4});
  Var v = modality_row(p, c, s, Modality::visual, rv, training);
  Var a = modality_row(p, c, s, Modality::acoustic, ra, training);
  Var t = modality_row(p, c, s, Modality::textual, rt, training);
  Var fused = fuse(p, c, v, a, t, rf, training, trace ? &trace->fusion_attention : nullptr);
  Var refined = refine(p, c, fused, rf, training);
  Var pooled = mean_rows(refined);
  if (trace) {
    trace->embeddings = {v.value(), a.value(), t.value()};
    trace->fused = fused.value();
    trace->refined = refined.value();
    trace->pooled = pooled.value();
  }
  return classifier_logits(pooled, p("classifier.w"), p("classifier.b"));
}

/// Cross-entropy of one sample on the caller's tape.
inline Var sample_loss(ParamBinder& p, const ModelConfig& c, const MultimodalSample& s, const Rng& rng, bool training) {
  if (s.label >= c.num_classes())
    throw InputError("sample " + std::to_string(s.id) + " label " + std::to_string(s.label) + " out of range for " +
                     std::to_string(c.num_classes()) + " classes");
  return cross_entropy_logits(forward_logits(p, c, s, rng, training), s.label);
}

inline EmotionDistribution forward(const MultimodalSample& s, const CmtModel& m, const Rng& rng, bool training = false,
                                   ForwardTrace* trace = nullptr) {
  Tape tape(false);
  ParamBinder p(tape, m.params);
  return distribution_from_logits(forward_logits(p, m.config, s, rng, training, trace).value());
}

// --- value-level stage entry points (used by the serving stages) ----------

inline ModalityEmbedding embed_row(Var row, Modality m) {
  return {row.value().reshaped({row.value().size()}), m};
}

inline ModalityEmbedding encode_visual(const VisualFrame& f, const CmtModel& m, const Rng& rng, bool training = false) {
  Tape tape(false);
  ParamBinder p(tape, m.params);
  Rng r = rng.split({1});
  return embed_row(encode_visual(p, m.config, f, r, training), Modality::visual);
}

inline ModalityEmbedding encode_audio(const AudioWaveform& w, const CmtModel& m, const Rng& rng, bool training = false) {
  Tape tape(false);
  ParamBinder p(tape, m.params);
  Rng r = rng.split({2});
  return embed_row(encode_audio(p, m.config, w, r, training), Modality::acoustic);
}

inline ModalityEmbedding encode_text(const TokenSequence& t, const CmtModel& m, const Rng& rng, bool training = false) {
  Tape tape(false);
  ParamBinder p(tape, m.params);
  Rng r = rng.split({3});
  return embed_row(encode_text(p, m.config, t, r, training), Modality::textual);
}

/// Stage entry point matching forward(): disabled streams are zeroed here too.
inline ModalityEmbedding encode_modality(const MultimodalSample& s, Modality which, const CmtModel& m, const Rng& rng) {
  const auto& c = m.config;
  if (!c.modalities[static_cast<std::size_t>(which)]) return {Tensor({c.d_model}, 0.0), which};
  switch (which) {
    case Modality::visual: return encode_visual(s.visual, m, rng);
    case Modality::acoustic: return encode_audio(s.audio, m, rng);
    case Modality::textual: return encode_text(s.text, m, rng);
  }
  throw InputError("unknown modality");
}

inline void check_embedding(const ModalityEmbedding& e, Modality expected, const ModelConfig& c) {
  if (e.modality != expected)
    throw InputError(std::string("expected a ") + modality_name(expected) + " embedding, got " +
                     modality_name(e.modality));
  if (e.vector.size() != c.d_model)
    throw InputError(std::string(modality_name(expected)) + " embedding has length " + std::to_string(e.vector.size()) +
                     ", expected " + std::to_string(c.d_model));
}

/// Fusion-only step: z_cmt from three tagged embeddings.
inline FusedRepresentation fuse(const ModalityEmbedding& v, const ModalityEmbedding& a, const ModalityEmbedding& t,
                                const CmtModel& m, const Rng& rng, bool training = false) {
  check_embedding(v, Modality::visual, m.config);
  check_embedding(a, Modality::acoustic, m.config);
  check_embedding(t, Modality::textual, m.config);
  Tape tape(false);
  ParamBinder p(tape, m.params);
  const std::size_t D = m.config.d_model;
  Rng rf = rng.split({4});
  Var z = fuse(p, m.config, tape.constant(v.vector.reshaped({1, D})), tape.constant(a.vector.reshaped({1, D})),
               tape.constant(t.vector.reshaped({1, D})), rf, training);
  return {z.value(), Tensor{}};
}

/// refine + pool on a 3 x D token matrix.
inline FusedRepresentation refine(const Tensor& tokens, const CmtModel& m, const Rng& rng, bool training = false) {
  Tape tape(false);
  ParamBinder p(tape, m.params);
  Rng rf = rng.split({4});
  Var r = refine(p, m.config, tape.constant(tokens), rf, training);
  Var pooled = mean_rows(r);
  return {r.value(), pooled.value().reshaped({m.config.d_model})};
}

/// Fusion stage: fuse -> refine -> classify, sharing forward()'s noise stream.
inline EmotionDistribution fuse_and_classify(const ModalityEmbedding& v, const ModalityEmbedding& a,
                                             const ModalityEmbedding& t, const CmtModel& m, const Rng& rng) {
  check_embedding(v, Modality::visual, m.config);
  check_embedding(a, Modality::acoustic, m.config);
  check_embedding(t, Modality::textual, m.config);
  Tape tape(false);
  ParamBinder p(tape, m.params);
  const ModelConfig& c = m.config;
  const std::size_t D = c.d_model;
  Rng rf = rng.split({4});
  Var fused = fuse(p, c, tape.constant(v.vector.reshaped({1, D})), tape.constant(a.vector.reshaped({1, D})),
                   tape.constant(t.vector.reshaped({1, D})), rf, false);
  Var pooled = mean_rows(refine(p, c, fused, rf, false));
  return distribution_from_logits(classifier_logits(pooled, p("classifier.w"), p("classifier.b")).value());
}

}  // namespace cmt
