// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "cmt/grad_check.hpp"
#include "cmt/model.hpp"
#include "cmt/trainer.hpp"

using namespace cmt;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

VisualFrame random_frame(const ModelConfig& c, Rng& rng) {
  Tensor px({c.image_height, c.image_width, c.image_channels});
  for (auto& v : px.data()) v = rng.uniform();
  return {px};
}

AudioWaveform random_wave(const ModelConfig& c, Rng& rng) {
  Tensor w({c.audio_length});
  for (auto& v : w.data()) v = rng.uniform(-1, 1);
  return {w, c.sample_rate};
}

TokenSequence random_tokens(const ModelConfig& c, Rng& rng) {
  TokenSequence t{{kClsToken}};
  while (t.ids.size() < c.max_text_length) t.ids.push_back(static_cast<std::uint32_t>(kFirstWordToken + rng.below(c.vocab_size - kFirstWordToken)));
  return t;
}

void zero_prefix(ParameterSet& ps, const std::string& prefix) {
  for (auto& [name, t] : ps)
    if (name.rfind(prefix, 0) == 0 && name.find(".ln") == std::string::npos)
      std::fill(t.data().begin(), t.data().end(), 0.0);
}

// Plain-loop helpers for the hand-composed oracle.
Tensor mm(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (std::size_t l = 0; l < a.cols(); ++l) s += a[i * a.cols() + l] * b[l * b.cols() + j];
      c[i * b.cols() + j] = s;
    }
  return c;
}
Tensor plus_row(Tensor a, const Tensor& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i % b.size()];
  return a;
}
Tensor ln(const Tensor& x, const Tensor& g, const Tensor& b, double eps) {
  Tensor y = x;
  const std::size_t d = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < d; ++j) mean += x[r * d + j];
    mean /= d;
    for (std::size_t j = 0; j < d; ++j) var += (x[r * d + j] - mean) * (x[r * d + j] - mean);
    var /= d;
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = (x[r * d + j] - mean) / std::sqrt(var + eps) * g[j] + b[j];
  }
  return y;
}

Tensor eval_block(const ParameterSet& ps, const Tensor& z, const std::string& prefix, std::size_t heads,
                  AttentionTrace* trace = nullptr) {
  Tape tape(false);
  ParamBinder p(tape, ps);
  Rng rng(0);
  return encoder_block(p, tape.constant(z), prefix, {heads, 0.0, 1e-5}, rng, false, trace).value();
}

}  // namespace

// --- patchify / embed ---------------------------------------------------------

TEST(Patchify, WholeImageAndCount) {
  Rng rng(1);
  Tensor px({4, 4, 1});
  for (auto& v : px.data()) v = rng.uniform();
  Tensor one = patchify({px}, 4);
  EXPECT_EQ(one.shape(), (Shape{1, 16}));
  EXPECT_EQ(one.data(), px.data());
  EXPECT_EQ(patchify({Tensor({16, 16, 1})}, 4).dim(0), 16u);
}

TEST(Patchify, CoordinateEncodingOracle) {
  const std::size_t H = 8, W = 12, C = 2, P = 4;
  Tensor px({H, W, C});
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      for (std::size_t ch = 0; ch < C; ++ch) px[(r * W + c) * C + ch] = 1000.0 * r + 10.0 * c + ch;
  Tensor p = patchify({px}, P);
  ASSERT_EQ(p.shape(), (Shape{6, P * P * C}));
  for (std::size_t n = 0; n < 6; ++n)
    for (std::size_t k = 0; k < P * P * C; ++k) {
      const std::size_t pr = n / (W / P), pc = n % (W / P);
      const std::size_t r = pr * P + k / (P * C), c = pc * P + (k / C) % P, ch = k % C;
      ASSERT_EQ(p[n * P * P * C + k], 1000.0 * r + 10.0 * c + ch);
    }
}

TEST(Patchify, IndivisibleFrameNamesDimensions) {
  try {
    patchify({Tensor({6, 8, 1})}, 4);
    FAIL();
  } catch (const DimensionError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("H=6"), std::string::npos);
    EXPECT_NE(m.find("W=8"), std::string::npos);
    EXPECT_NE(m.find("P=4"), std::string::npos);
  }
}

TEST(EmbedPatches, IdentityZeroAndComposition) {
  Rng rng(2);
  Tape t(false);
  Tensor patches = random_tensor({3, 4}, rng);
  Tensor eye({4, 4}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
  EXPECT_EQ(embed_patches(t.constant(patches), t.constant(eye), t.constant(Tensor({3, 4}, 0.0))).value(), patches);
  Tensor pos = random_tensor({3, 5}, rng);
  Tensor E = random_tensor({4, 5}, rng);
  EXPECT_EQ(embed_patches(t.constant(Tensor({3, 4}, 0.0)), t.constant(E), t.constant(pos)).value(), pos);
  Tensor ref = mm(patches, E);
  for (std::size_t i = 0; i < ref.size(); ++i) ref[i] += pos[i];
  EXPECT_EQ(embed_patches(t.constant(patches), t.constant(E), t.constant(pos)).value(), ref);
  EXPECT_THROW(embed_patches(t.constant(patches), t.constant(E), t.constant(Tensor({2, 5}))), DimensionError);
}

// --- encoder block ------------------------------------------------------------

TEST(EncoderBlock, ZeroWeightsAreIdentity) {
  Rng rng(3);
  ParameterSet ps;
  init_encoder_block(ps, "b", 8, 2, rng);
  zero_prefix(ps, "b");
  Tensor z = random_tensor({5, 8}, rng);
  EXPECT_EQ(eval_block(ps, z, "b", 2), z);
}

TEST(EncoderBlock, HeadCountMustDivideWidth) {
  Rng rng(4);
  ParameterSet ps;
  init_encoder_block(ps, "b", 6, 2, rng);
  EXPECT_THROW(eval_block(ps, random_tensor({2, 6}, rng), "b", 4), ConfigError);
}

TEST(EncoderBlock, SingleTokenMatchesHandComposedOracle) {
  Rng rng(5);
  const std::size_t d = 8;
  ParameterSet ps;
  init_encoder_block(ps, "b", d, 2, rng);
  for (auto& [n, t] : ps)
    if (n.find(".ln") != std::string::npos) t = random_tensor(t.shape(), rng);
  for (const char* bias : {"b.attn.v.b", "b.attn.o.b", "b.mlp1.b", "b.mlp2.b"}) ps[bias] = random_tensor({ps[bias].size()}, rng);
  Tensor z = random_tensor({1, d}, rng);
  AttentionTrace trace;
  Tensor out = eval_block(ps, z, "b", 2, &trace);
  for (const auto& w : trace.weights) EXPECT_EQ(w, Tensor::matrix({{1.0}}));
  // With one token every head's attention is exactly 1, so MSA = (LN1(z) Wv + bv) Wo + bo.
  Tensor h = ln(z, ps["b.ln1.gamma"], ps["b.ln1.beta"], 1e-5);
  Tensor u = plus_row(mm(plus_row(mm(h, ps["b.attn.v.w"]), ps["b.attn.v.b"]), ps["b.attn.o.w"]), ps["b.attn.o.b"]);
  for (std::size_t i = 0; i < d; ++i) u[i] += z[i];
  Tensor m = plus_row(mm(ln(u, ps["b.ln2.gamma"], ps["b.ln2.beta"], 1e-5), ps["b.mlp1.w"]), ps["b.mlp1.b"]);
  for (auto& v : m.data()) v = 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
  Tensor ref = plus_row(mm(m, ps["b.mlp2.w"]), ps["b.mlp2.b"]);
  for (std::size_t i = 0; i < d; ++i) ref[i] += u[i];
  EXPECT_LE(max_abs_diff(out, ref), 1e-12);
}

TEST(EncoderBlock, AttentionIsRowStochasticConvexCombination) {
  Rng rng(6);
  ParameterSet ps;
  init_encoder_block(ps, "b", 16, 2, rng);
  for (int trial = 0; trial < 20; ++trial) {
    AttentionTrace trace;
    eval_block(ps, random_tensor({7, 16}, rng, 3.0), "b", 4, &trace);
    ASSERT_EQ(trace.weights.size(), 4u);
    for (std::size_t h = 0; h < 4; ++h) {
      const Tensor& w = trace.weights[h];
      const Tensor& v = trace.values[h];
      const Tensor& o = trace.outputs[h];
      for (std::size_t i = 0; i < 7; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 7; ++j) {
          ASSERT_GE(w.at(i, j), 0.0);
          s += w.at(i, j);
        }
        ASSERT_NEAR(s, 1.0, 1e-12);
        for (std::size_t c = 0; c < v.cols(); ++c) {
          double lo = 1e300, hi = -1e300;
          for (std::size_t j = 0; j < 7; ++j) {
            lo = std::min(lo, v.at(j, c));
            hi = std::max(hi, v.at(j, c));
          }
          ASSERT_GE(o.at(i, c), lo - 1e-12);
          ASSERT_LE(o.at(i, c), hi + 1e-12);
        }
      }
    }
  }
}

TEST(EncoderBlock, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  ParameterSet ps;
  init_encoder_block(ps, "b", 4, 2, rng);
  ps["z"] = random_tensor({3, 4}, rng);
  ps["target"] = random_tensor({3, 4}, rng);
  auto rep = grad_check(
      [](Tape& t, ParamBinder& p) {
        Rng r(0);
        Var out = encoder_block(p, p("z"), "b", {2, 0.0, 1e-5}, r, false);
        (void)t;
        return sum(mul(out, p("target")));
      },
      ps);
  EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
}

// --- visual ---------------------------------------------------------------------

TEST(EncodeVisual, DeterministicAndDistinct) {
  ModelConfig c;
  CmtModel m = init_model(c, 11);
  Rng rng(8);
  VisualFrame f = random_frame(c, rng);
  auto a = encode_visual(f, m, Rng(1));
  auto b = encode_visual(f, m, Rng(1));
  EXPECT_EQ(a.vector, b.vector);
  EXPECT_EQ(a.modality, Modality::visual);
  EXPECT_EQ(a.vector.shape(), (Shape{c.d_model}));
  auto zeros = encode_visual({Tensor({16, 16, 1}, 0.0)}, m, Rng(1));
  auto ones = encode_visual({Tensor({16, 16, 1}, 1.0)}, m, Rng(1));
  EXPECT_GT(max_abs_diff(zeros.vector, ones.vector), 1e-6);
}

TEST(EncodeVisual, PermutationEquivariantWithoutPositions) {
  ModelConfig c;
  c.dropout = 0.0;
  CmtModel m = init_model(c, 12);
  std::fill(m.params["visual.pos"].data().begin(), m.params["visual.pos"].data().end(), 0.0);
  Rng rng(9);
  VisualFrame f = random_frame(c, rng);
  // Swap two patches of the frame: grid cells 0 and 5.
  VisualFrame g = f;
  const std::size_t P = c.patch, W = c.image_width;
  auto cell_origin = [&](std::size_t n) { return std::pair{(n / (W / P)) * P, (n % (W / P)) * P}; };
  auto [r0, c0] = cell_origin(0);
  auto [r1, c1] = cell_origin(5);
  for (std::size_t r = 0; r < P; ++r)
    for (std::size_t cc = 0; cc < P; ++cc) std::swap(g.pixels[(r0 + r) * W + c0 + cc], g.pixels[(r1 + r) * W + c1 + cc]);

  Tape t(false);
  ParamBinder p(t, m.params);
  Rng r(0);
  Tensor hf = visual_tokens(p, c, f, r, false).value();
  Tensor hg = visual_tokens(p, c, g, r, false).value();
  const std::size_t d = c.d_visual;
  for (std::size_t n = 0; n < hf.rows(); ++n) {
    const std::size_t src = n == 0 ? 5 : n == 5 ? 0 : n;
    for (std::size_t j = 0; j < d; ++j) ASSERT_NEAR(hg.at(n, j), hf.at(src, j), 1e-12);
  }
  EXPECT_LE(max_abs_diff(encode_visual(f, m, Rng(0)).vector, encode_visual(g, m, Rng(0)).vector), 1e-12);
}

TEST(EncodeVisual, RejectsMismatchedFrame) {
  CmtModel m = init_model(ModelConfig{}, 1);
  EXPECT_THROW(encode_visual({Tensor({8, 8, 1})}, m, Rng(0)), InputError);
}

// --- acoustic -------------------------------------------------------------------

TEST(ConvEncode, MovingAverageAndPointwise) {
  Tape t(false);
  ParameterSet ps{{"audio.conv0.w", Tensor::matrix({{0.5}, {0.5}})}, {"audio.conv0.b", Tensor({1}, 0.0)}};
  ParamBinder p(t, ps);
  Var sig = t.constant(Tensor({4, 1}, std::vector<double>{1, 3, 5, 7}));
  Var pre = linear(p, im2col1d(sig, 2, 2), "audio.conv0");
  EXPECT_EQ(pre.value().data(), (std::vector<double>{2, 6}));
  Var out = conv_encode_audio(p, {{2, 2, 1}}, sig);
  EXPECT_EQ(out.value().data(), (std::vector<double>{gelu_scalar(2), gelu_scalar(6)}));

  ParameterSet id{{"audio.conv0.w", Tensor::matrix({{1.0}})}, {"audio.conv0.b", Tensor({1}, 0.0)}};
  ParamBinder pi(t, id);
  Var y = conv_encode_audio(pi, {{1, 1, 1}}, sig);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y.value()[i], gelu_scalar(sig.value()[i]));
}

TEST(ConvEncode, FrameCountAndSlidingWindowOracle) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ConvLayer> layers;
    const std::size_t n = 1 + rng.below(3);
    for (std::size_t l = 0; l < n; ++l) layers.push_back({1 + rng.below(4), 1 + rng.below(3), 1 + rng.below(4)});
    const std::size_t T = 40 + rng.below(40);
    ParameterSet ps;
    std::size_t in = 1;
    for (std::size_t l = 0; l < n; ++l) {
      ps["audio.conv" + std::to_string(l) + ".w"] = random_tensor({layers[l].kernel * in, layers[l].out_channels}, rng);
      ps["audio.conv" + std::to_string(l) + ".b"] = random_tensor({layers[l].out_channels}, rng);
      in = layers[l].out_channels;
    }
    Tensor sig = random_tensor({T, 1}, rng);
    Tape t(false);
    ParamBinder p(t, ps);
    Tensor out = conv_encode_audio(p, layers, t.constant(sig)).value();

    // Oracle: direct sliding window per layer.
    Tensor x = sig;
    std::size_t frames = T;
    for (std::size_t l = 0; l < n; ++l) {
      const auto& L = layers[l];
      const Tensor& w = ps["audio.conv" + std::to_string(l) + ".w"];
      const Tensor& b = ps["audio.conv" + std::to_string(l) + ".b"];
      const std::size_t cin = x.cols();
      const std::size_t F = (frames - L.kernel) / L.stride + 1;
      Tensor y({F, L.out_channels});
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t o = 0; o < L.out_channels; ++o) {
          double s = 0;
          for (std::size_t k = 0; k < L.kernel; ++k)
            for (std::size_t ch = 0; ch < cin; ++ch)
              s += x[(f * L.stride + k) * cin + ch] * w[(k * cin + ch) * L.out_channels + o];
          y[f * L.out_channels + o] = gelu_scalar(s + b[o]);
        }
      x = y;
      frames = F;
    }
    ModelConfig c;
    c.conv = layers;
    ASSERT_EQ(out.dim(0), c.audio_frames(T));
    ASSERT_LE(max_abs_diff(out, x), 1e-12);
  }
}

TEST(ConvEncode, TooShortReportsMinimum) {
  ModelConfig c;
  CmtModel m = init_model(c, 1);
  try {
    encode_audio({Tensor({10}), c.sample_rate}, m, Rng(0));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find(std::to_string(c.min_audio_length())), std::string::npos);
  }
}

TEST(ContextualizeAudio, ZeroWeightsAddPositionsOnly) {
  ModelConfig c;
  CmtModel m = init_model(c, 2);
  zero_prefix(m.params, "audio.block");
  Rng rng(11);
  Tensor frames = random_tensor({5, c.d_audio}, rng);
  Tape t(false);
  ParamBinder p(t, m.params);
  Rng r(0);
  Tensor out = contextualize_audio(p, c, t.constant(frames), r, false).value();
  const Tensor& pos = m.params["audio.pos"];
  for (std::size_t i = 0; i < frames.size(); ++i) ASSERT_EQ(out[i], frames[i] + pos[i]);
}

TEST(MaskedFramePretrain, ErrorsAndZeroLossForPerfectPredictor) {
  ModelConfig c = tiny_config();
  CmtModel m = init_model(c, 3);
  Tape t(false);
  ParamBinder p(t, m.params);
  Rng r(0);
  EXPECT_THROW(masked_frame_pretrain_loss(p, c, t.constant(Tensor({1, c.d_audio})), 0.5, r), ConfigError);

  // Zero blocks and positions: output at a masked row is the mask vector itself.
  // Two identical frames equal to the mask vector make the reconstruction perfect.
  zero_prefix(m.params, "audio.block");
  std::fill(m.params["audio.pos"].data().begin(), m.params["audio.pos"].data().end(), 0.0);
  const Tensor& mask = m.params["audio.mask"];
  Tensor frames({2, c.d_audio});
  for (std::size_t j = 0; j < c.d_audio; ++j) frames[j] = frames[c.d_audio + j] = mask[j];
  Tape t2(false);
  ParamBinder p2(t2, m.params);
  Rng r2(1);
  EXPECT_EQ(masked_frame_pretrain_loss(p2, c, t2.constant(frames), 0.5, r2, false).value()[0], 0.0);
}

TEST(MaskedFramePretrain, AtLeastOneFrameMasked) {
  Rng rng(12);
  for (int i = 0; i < 200; ++i) EXPECT_FALSE(draw_frame_mask(2, 0.01, rng).empty());
}

TEST(MaskedFramePretrain, LossDecreasesUnderTraining) {
  ModelConfig c;
  c.dropout = 0.0;
  CmtModel m = init_model(c, 4);
  Rng rng(13);
  const Tensor frames = random_tensor({8, c.d_audio}, rng);
  OptimizerState opt;
  opt.learning_rate = 3e-3;
  opt.weight_decay = 0.0;
  std::vector<double> losses;
  for (int step = 0; step < 100; ++step) {
    Tape t;
    ParamBinder p(t, m.params);
    Rng mask_rng(99);  // same mask every step
    Var loss = masked_frame_pretrain_loss(p, c, t.constant(frames), 0.3, mask_rng, false);
    losses.push_back(loss.value()[0]);
    t.backward(loss);
    adamw_step(m, p.gradients(), opt);
  }
  EXPECT_GT(losses.front(), 0.0);
  for (std::size_t w = 1; w < 10; ++w) {
    double prev = 0, cur = 0;
    for (std::size_t i = 0; i < 10; ++i) {
      prev += losses[(w - 1) * 10 + i];
      cur += losses[w * 10 + i];
    }
    EXPECT_LT(cur, prev) << "window " << w;
  }
}

TEST(EncodeAudio, DeterministicDistinctAndPermutationInvariantPool) {
  ModelConfig c;
  CmtModel m = init_model(c, 5);
  Rng rng(14);
  AudioWaveform w = random_wave(c, rng);
  EXPECT_EQ(encode_audio(w, m, Rng(2)).vector, encode_audio(w, m, Rng(2)).vector);
  AudioWaveform silent{Tensor({c.audio_length}, 0.0), c.sample_rate};
  AudioWaveform loud{Tensor({c.audio_length}, 0.9), c.sample_rate};
  EXPECT_GT(max_abs_diff(encode_audio(silent, m, Rng(0)).vector, encode_audio(loud, m, Rng(0)).vector), 1e-6);

  // Frame-token permutation equivariance of the contextualizer without positions.
  std::fill(m.params["audio.pos"].data().begin(), m.params["audio.pos"].data().end(), 0.0);
  Tensor frames = random_tensor({6, c.d_audio}, rng);
  Tensor permuted = frames;
  const std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < c.d_audio; ++j) permuted.at(i, j) = frames.at(perm[i], j);
  Tape t(false);
  ParamBinder p(t, m.params);
  Rng r(0);
  Tensor a = contextualize_audio(p, c, t.constant(frames), r, false).value();
  Tensor b = contextualize_audio(p, c, t.constant(permuted), r, false).value();
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < c.d_audio; ++j) ASSERT_NEAR(b.at(i, j), a.at(perm[i], j), 1e-12);
}

// --- textual --------------------------------------------------------------------

TEST(EncodeText, OutOfVocabularyNamesTheId) {
  ModelConfig c;
  CmtModel m = init_model(c, 6);
  try {
    encode_text({{kClsToken, 5, 77}}, m, Rng(0));
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("77"), std::string::npos);
  }
  EXPECT_THROW(encode_text({{5, 6}}, m, Rng(0)), InputError);
}

TEST(EncodeText, ClsAttendsToLaterTokens) {
  ModelConfig c;
  CmtModel m = init_model(c, 7);
  auto a = encode_text({{kClsToken, 10, 11, 12}}, m, Rng(0));
  auto b = encode_text({{kClsToken, 10, 11, 13}}, m, Rng(0));
  EXPECT_GT(max_abs_diff(a.vector, b.vector), 1e-9);
  EXPECT_EQ(a.modality, Modality::textual);
}

TEST(EncodeText, ZeroBlocksLeaveClsEmbeddingPlusPosition) {
  ModelConfig c;
  CmtModel m = init_model(c, 8);
  zero_prefix(m.params, "text.block");
  Tape t(false);
  ParamBinder p(t, m.params);
  Rng r(0);
  Tensor h = text_tokens(p, c, {{kClsToken, 9, 4}}, r, false).value();
  for (std::size_t j = 0; j < c.d_text; ++j)
    EXPECT_EQ(h.at(0, j), m.params["text.token_embed"].at(kClsToken, j) + m.params["text.pos"].at(0, j));
}

TEST(Vocabulary, TokenizesWithClsAndUnknown) {
  Vocabulary v(64);
  auto t = v.tokenize("w5 hello w63 w7 w8", 4);
  EXPECT_EQ(t.ids, (std::vector<std::uint32_t>{kClsToken, 5, kUnkToken, 63}));
  EXPECT_EQ(v.detokenize(t), "w5 [UNK] w63");
}

// --- gradient checks through whole streams -------------------------------------

class StreamGradCheck : public ::testing::Test {
 protected:
  ModelConfig c = tiny_config();
  CmtModel m = init_model(c, 21);
  Rng rng{22};
  MultimodalSample s{0, random_frame(c, rng), random_wave(c, rng), random_tokens(c, rng), 1};
  Tensor target = random_tensor({1, c.d_model}, rng);

  void check(Modality which) {
    auto rep = grad_check(
        [&](Tape&, ParamBinder& p) {
          Rng r(0);
          Var e = modality_row(p, c, s, which, r, false);
          return sum(mul(e, p.tape().constant(target)));
        },
        m.params);
    EXPECT_TRUE(rep.passed()) << modality_name(which) << " max rel err " << rep.max_rel_error;
  }
};

TEST_F(StreamGradCheck, Visual) { check(Modality::visual); }
TEST_F(StreamGradCheck, Acoustic) { check(Modality::acoustic); }
TEST_F(StreamGradCheck, Textual) { check(Modality::textual); }

TEST_F(StreamGradCheck, MaskedFramePretraining) {
  // Latent frames are the (fixed) reconstruction targets, so they enter as constants.
  Tensor latent;
  {
    Tape t(false);
    ParamBinder p(t, m.params);
    latent = conv_encode_audio(p, c.conv, audio_signal(p, c, s.audio)).value();
  }
  auto rep = grad_check(
      [&](Tape& t, ParamBinder& p) {
        Var frames = t.constant(latent);
        Rng r(3);
        return masked_frame_pretrain_loss(p, c, frames, 0.5, r, false);
      },
      m.params);
  EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
}
