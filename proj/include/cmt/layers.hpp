// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cmt/autodiff.hpp"
#include "cmt/params.hpp"

namespace cmt {

/// Intermediate values of one attention call, captured for inspection.
struct AttentionTrace {
  std::vector<Tensor> weights;  ///< per head, N x N, row-stochastic
  std::vector<Tensor> values;   ///< per head, N x d_head (V projection)
  std::vector<Tensor> outputs;  ///< per head, weights * values
};

/// x * W + b with W stored [in x out].
inline Var linear(ParamBinder& p, Var x, const std::string& prefix) {
  return add_row(matmul(x, p(prefix + ".w")), p(prefix + ".b"));
}

inline void init_linear(ParameterSet& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
  ps[prefix + ".w"] = init_matrix(in, out, rng);
  ps[prefix + ".b"] = Tensor({out}, 0.0);
}

inline void init_layer_norm(ParameterSet& ps, const std::string& prefix, std::size_t d) {
  ps[prefix + ".gamma"] = Tensor({d}, 1.0);
  ps[prefix + ".beta"] = Tensor({d}, 0.0);
}

inline Var layer_norm(ParamBinder& p, Var x, const std::string& prefix, double eps) {
  return layer_norm(x, p(prefix + ".gamma"), p(prefix + ".beta"), eps);
}

inline void init_attention(ParameterSet& ps, const std::string& prefix, std::size_t d, Rng& rng) {
  for (const char* proj : {".q", ".k", ".v", ".o"}) init_linear(ps, prefix + proj, d, d, rng);
}

/// Multi-head scaled dot-product self-attention over the rows of x.
///
/// Head h owns columns [h*dh, (h+1)*dh) of the packed Q/K/V projections.
/// Head outputs are concatenated and passed through the output projection.
inline Var multi_head_attention(ParamBinder& p, Var x, const std::string& prefix, std::size_t heads, double dropout_rate,
                                Rng& rng, bool training, AttentionTrace* trace = nullptr) {
  const std::size_t d = x.value().cols();
  if (heads == 0 || d % heads != 0)
    throw ConfigError("attention '" + prefix + "': " + std::to_string(heads) + " heads do not divide width " +
                      std::to_string(d));
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = linear(p, x, prefix + ".q");
  Var k = linear(p, x, prefix + ".k");
  Var v = linear(p, x, prefix + ".v");
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = slice_cols(q, h * dh, dh);
    Var kh = slice_cols(k, h * dh, dh);
    Var vh = slice_cols(v, h * dh, dh);
    Var weights = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
    Var out = matmul(dropout(weights, dropout_rate, training, rng), vh);
    if (trace) {
      trace->weights.push_back(weights.value());
      trace->values.push_back(vh.value());
      trace->outputs.push_back(out.value());
    }
    outs.push_back(out);
  }
  return linear(p, concat_cols(outs), prefix + ".o");
}

inline void init_encoder_block(ParameterSet& ps, const std::string& prefix, std::size_t d, std::size_t mlp_ratio,
                               Rng& rng) {
  init_layer_norm(ps, prefix + ".ln1", d);
  init_attention(ps, prefix + ".attn", d, rng);
  init_layer_norm(ps, prefix + ".ln2", d);
  init_linear(ps, prefix + ".mlp1", d, d * mlp_ratio, rng);
  init_linear(ps, prefix + ".mlp2", d * mlp_ratio, d, rng);
}

struct BlockOptions {
  std::size_t heads = 4;
  double dropout = 0.0;
  double ln_eps = 1e-5;
};

/// Pre-norm residual transformer block:
///   u   = MSA(LN1(z)) + z
///   out = MLP(LN2(u)) + u,   MLP(x) = W2 GELU(W1 x + b1) + b2
/// Dropout (training only) hits the attention weights and the MLP output.
inline Var encoder_block(ParamBinder& p, Var z, const std::string& prefix, const BlockOptions& opt, Rng& rng,
                         bool training, AttentionTrace* trace = nullptr) {
  Var a = multi_head_attention(p, layer_norm(p, z, prefix + ".ln1", opt.ln_eps), prefix + ".attn", opt.heads,
                               opt.dropout, rng, training, trace);
  Var u = add(a, z);
  Var hidden = gelu(linear(p, layer_norm(p, u, prefix + ".ln2", opt.ln_eps), prefix + ".mlp1"));
  Var m = dropout(linear(p, hidden, prefix + ".mlp2"), opt.dropout, training, rng);
  return add(m, u);
}

}  // namespace cmt
