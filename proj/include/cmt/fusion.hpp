// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "cmt/encoders.hpp"

namespace cmt {

/// Ordered, unique category names.
class EmotionLabelSet {
 public:
  explicit EmotionLabelSet(std::vector<std::string> names = default_emotion_labels()) : names_(std::move(names)) {
    for (std::size_t i = 0; i < names_.size(); ++i)
      for (std::size_t j = 0; j < i; ++j)
        if (names_[i] == names_[j]) throw ConfigError("duplicate emotion label '" + names_[i] + "'");
  }

  std::size_t size() const noexcept { return names_.size(); }
  const std::string& name(std::size_t i) const {
    if (i >= names_.size()) throw InputError("emotion category " + std::to_string(i) + " is out of range");
    return names_[i];
  }
  const std::vector<std::string>& names() const noexcept { return names_; }

  std::size_t index_of(const std::string& n) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == n) return i;
    throw InputError("unknown emotion category '" + n + "'");
  }

 private:
  std::vector<std::string> names_;
};

struct FusedRepresentation {
  Tensor tokens;  ///< 3 x D in (visual, acoustic, textual) order
  Tensor pooled;  ///< [D], mean of the token rows; empty before refine
};

struct EmotionDistribution {
  Tensor logits;  ///< [C]
  Tensor probs;   ///< [C]
  std::size_t argmax = 0;
};

/// Index of the largest value; ties go to the lowest index.
inline std::size_t argmax_lowest(const Tensor& t) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < t.size(); ++i)
    if (t[i] > t[best]) best = i;
  return best;
}

inline void init_fusion_params(ParameterSet& ps, const ModelConfig& c, Rng& rng) {
  ps["fusion.type_embed"] = init_matrix(3, c.d_model, rng);
  init_attention(ps, "fusion.attn", c.d_model, rng);
  init_layer_norm(ps, "fusion.ln", c.d_model);
  init_encoder_block(ps, "fusion.refine", c.d_model, c.mlp_ratio, rng);
  ps["classifier.w"] = init_matrix(c.num_classes(), c.d_model, rng);
  ps["classifier.b"] = Tensor({c.num_classes()}, 0.0);
}

/// Joint multi-head attention over the stacked modality tokens:
/// Q, K, V all project the same 3 x D stack; optional residual + LN.
inline Var fuse_tokens(ParamBinder& p, const ModelConfig& c, Var tokens, Rng& rng, bool training,
                       AttentionTrace* trace = nullptr) {
  const Tensor& t = tokens.value();
  if (t.ndim() != 2 || t.dim(0) != 3 || t.dim(1) != c.d_model)
    throw InputError("fusion expects 3 x " + std::to_string(c.d_model) + " tokens, got " + shape_str(t.shape()));
  Var x = c.modality_type_embeddings ? add(tokens, p("fusion.type_embed")) : tokens;
  Var a = multi_head_attention(p, x, "fusion.attn", c.fusion_heads, c.dropout, rng, training, trace);
  if (!c.fusion_residual) return a;
  return layer_norm(p, add(a, x), "fusion.ln", c.ln_eps);
}

/// Checks tags and widths, then stacks the embeddings as (v, a, t) rows.
inline Var stack_modalities(Var v, Var a, Var t, const ModelConfig& c) {
  const Var rows[] = {v, a, t};
  for (std::size_t i = 0; i < 3; ++i)
    if (rows[i].value().size() != c.d_model)
      throw InputError(std::string(modality_name(static_cast<Modality>(i))) + " embedding has length " +
                       std::to_string(rows[i].value().size()) + ", expected " + std::to_string(c.d_model));
  return stack_rows({v, a, t});
}

inline Var fuse(ParamBinder& p, const ModelConfig& c, Var v, Var a, Var t, Rng& rng, bool training,
                AttentionTrace* trace = nullptr) {
  return fuse_tokens(p, c, stack_modalities(v, a, t, c), rng, training, trace);
}

/// One encoder block over the fused tokens; returns the refined 3 x D tokens.
inline Var refine(ParamBinder& p, const ModelConfig& c, Var fused, Rng& rng, bool training,
                  AttentionTrace* trace = nullptr) {
  return encoder_block(p, fused, "fusion.refine", {c.fusion_heads, c.dropout, c.ln_eps}, rng, training, trace);
}

/// logits = W_c z + b_c as a [1 x C] row; W_c is stored [C x D].
inline Var classifier_logits(Var z, Var W, Var b) {
  const Tensor& Wv = W.value();
  if (Wv.ndim() != 2 || Wv.dim(1) != z.value().size() || b.value().size() != Wv.dim(0))
    throw DimensionError("classify: W_c " + shape_str(Wv.shape()) + ", b_c " + shape_str(b.value().shape()) +
                         " incompatible with z " + shape_str(z.value().shape()));
  Var row = z.value().ndim() == 1 ? reshape(z, {1, z.value().size()}) : z;
  return add_row(matmul(row, transpose(W)), b);
}

inline EmotionDistribution distribution_from_logits(const Tensor& logits_row) {
  EmotionDistribution d;
  d.logits = logits_row.reshaped({logits_row.size()});
  d.probs = softmax_rows_raw(d.logits);
  d.argmax = argmax_lowest(d.logits);
  return d;
}

/// Value-level classifier: softmax(W_c z + b_c).
inline EmotionDistribution classify(const Tensor& z_final, const Tensor& W_c, const Tensor& b_c) {
  Tape tape(false);
  return distribution_from_logits(
      classifier_logits(tape.constant(z_final), tape.constant(W_c), tape.constant(b_c)).value());
}

/// -log p[label], from the logits through log-sum-exp.
inline double cross_entropy(const EmotionDistribution& pred, std::size_t label) {
  if (label >= pred.logits.size())
    throw InputError("label " + std::to_string(label) + " out of range for " + std::to_string(pred.logits.size()) +
                     " classes");
  return log_sum_exp(pred.logits.data()) - pred.logits[label];
}

}  // namespace cmt
