// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <sstream>

#include "cmt/dataset.hpp"
#include "cmt/grad_check.hpp"
#include "cmt/model.hpp"

namespace cmt {

/// One operation family of the gradient suite and its result.
struct GradFamily {
  std::string name;
  GradCheckReport report;
  double seconds = 0.0;
};

struct GradSuiteOptions {
  GradCheckOptions check;  ///< eps / tolerance / floor for every family
  /// Coordinates sampled per parameter tensor in the model-level families.
  /// Primitive ops are always checked exhaustively.
  std::size_t model_coords = 8;
};

struct GradSuiteReport {
  std::vector<GradFamily> families;
  double max_rel_error = 0.0;
  bool passed() const {
    return std::all_of(families.begin(), families.end(), [](const GradFamily& f) { return f.report.passed(); });
  }
};

namespace detail {

inline ParameterSet with_prefix(const ParameterSet& ps, std::initializer_list<const char*> prefixes) {
  ParameterSet out;
  for (const auto& [name, t] : ps)
    for (const char* p : prefixes)
      if (name.rfind(p, 0) == 0) out.emplace(name, t);
  return out;
}

inline Tensor suite_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

}  // namespace detail

/// Gradient checks per operation family: every differentiable primitive,
/// the layer building blocks, each encoder, fusion + classifier, and the
/// full sample loss. Model-level families run at the dims of `cfg` with
/// dropout off, on one sample from a matching synthetic spec.
inline GradSuiteReport run_grad_suite(const ModelConfig& cfg, std::uint64_t seed, const GradSuiteOptions& opt = {}) {
  using detail::suite_tensor;
  GradSuiteReport out;
  auto run = [&](const std::string& name, const LossFn& f, const ParameterSet& ps, std::size_t coords) {
    GradCheckOptions o = opt.check;
    o.max_coords = coords;
    o.seed = seed;
    const auto t0 = std::chrono::steady_clock::now();
    GradFamily fam{name, grad_check(f, ps, o), 0.0};
    fam.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.max_rel_error = std::max(out.max_rel_error, fam.report.max_rel_error);
    out.families.push_back(std::move(fam));
  };

  Rng rng(seed);
  ParameterSet prim{{"a", suite_tensor({3, 4}, rng)},   {"b", suite_tensor({4, 3}, rng)},
                    {"c", suite_tensor({3, 4}, rng)},   {"g", suite_tensor({4}, rng)},
                    {"beta", suite_tensor({4}, rng)},   {"row", suite_tensor({4}, rng)},
                    {"sig", suite_tensor({10, 2}, rng)}, {"tab", suite_tensor({5, 4}, rng)}};
  const std::vector<std::pair<std::string, LossFn>> ops = {
      {"matmul", [](Tape&, ParamBinder& p) { return sum(mul(matmul(p("a"), p("b")), matmul(p("a"), p("b")))); }},
      {"transpose", [](Tape&, ParamBinder& p) { return sum(mul(transpose(p("a")), p("b"))); }},
      {"add_mul", [](Tape&, ParamBinder& p) { return sum(mul(add(p("a"), p("c")), p("c"))); }},
      {"add_row", [](Tape&, ParamBinder& p) { Var y = add_row(p("a"), p("row")); return sum(mul(y, y)); }},
      {"scale", [](Tape&, ParamBinder& p) { return sum(mul(scale(p("a"), -1.7), p("c"))); }},
      {"mean_rows", [](Tape&, ParamBinder& p) { Var y = mean_rows(p("a")); return sum(mul(y, y)); }},
      {"softmax", [](Tape&, ParamBinder& p) { return sum(mul(softmax_rows(p("a")), p("c"))); }},
      {"layer_norm",
       [](Tape&, ParamBinder& p) { return sum(mul(layer_norm(p("a"), p("g"), p("beta"), 1e-5), p("c"))); }},
      {"gelu", [](Tape&, ParamBinder& p) { return sum(mul(gelu(p("a")), p("c"))); }},
      {"slice_concat",
       [](Tape&, ParamBinder& p) {
         return sum(mul(concat_cols({slice_cols(p("a"), 2, 2), slice_cols(p("a"), 0, 2)}), p("c")));
       }},
      {"stack_rows",
       [](Tape&, ParamBinder& p) {
         Var y = stack_rows({p("a"), reshape(p("row"), {1, 4})});
         return sum(mul(y, y));
       }},
      {"gather_rows", [](Tape&, ParamBinder& p) { return sum(mul(gather_rows(p("tab"), {4, 0, 4}), p("c"))); }},
      {"replace_rows", [](Tape&, ParamBinder& p) { return sum(mul(replace_rows(p("a"), {0, 2}, p("row")), p("c"))); }},
      {"im2col1d", [](Tape&, ParamBinder& p) { Var y = im2col1d(p("sig"), 3, 2); return sum(mul(y, y)); }},
      {"cross_entropy", [](Tape&, ParamBinder& p) { return cross_entropy_logits(reshape(p("row"), {1, 4}), 1); }},
      {"mse", [](Tape&, ParamBinder& p) { return mse(p("a"), Tensor({3, 4}, 0.25)); }},
  };
  for (const auto& [name, f] : ops) run("op." + name, f, prim, 0);

  // Layer blocks on a small width, exhaustively.
  {
    ParameterSet ps{{"x", suite_tensor({3, 8}, rng)}, {"w", suite_tensor({3, 8}, rng)}};
    init_encoder_block(ps, "blk", 8, 2, rng);
    for (auto& [name, t] : ps)
      if (name.find("ln") != std::string::npos || name.find(".b") != std::string::npos)
        for (auto& v : t.data()) v += 0.1 * rng.normal();
    run("layer.attention",
        [](Tape&, ParamBinder& p) {
          Rng r(0);
          return sum(mul(multi_head_attention(p, p("x"), "blk.attn", 2, 0.0, r, false), p("w")));
        },
        detail::with_prefix(ps, {"x", "w", "blk.attn"}), 0);
    run("layer.encoder_block",
        [](Tape&, ParamBinder& p) {
          Rng r(0);
          return sum(mul(encoder_block(p, p("x"), "blk", {2, 0.0, 1e-5}, r, false), p("w")));
        },
        ps, 0);
  }

  // Model-level families at the configured dims.
  ModelConfig c = cfg;
  SyntheticSpec spec;
  spec.num_classes = c.num_classes();
  spec.samples_per_class = 1;
  spec.seed = seed;
  spec.image_size = c.image_height;
  spec.image_channels = c.image_channels;
  spec.patch = c.patch;
  spec.audio_length = c.audio_length;
  spec.sample_rate = c.sample_rate;
  spec.text_length = c.max_text_length;
  spec.vocab_size = c.vocab_size;
  const auto data = generate_dataset(spec);
  const MultimodalSample& s = data[data.size() / 2];
  CmtModel m = init_model(c, seed);
  // Move LN and bias parameters off their init values so their gradients are generic.
  for (auto& [name, t] : m.params)
    if (name.find("gamma") != std::string::npos || name.find("beta") != std::string::npos ||
        name.ends_with(".b"))
      for (auto& v : t.data()) v += 0.1 * rng.normal();
  const Tensor probe = suite_tensor({1, c.d_model}, rng);
  const std::size_t k = opt.model_coords;

  run("encoder.visual",
      [&](Tape& t, ParamBinder& p) {
        Rng r(0);
        return sum(mul(encode_visual(p, c, s.visual, r, false), t.constant(probe)));
      },
      detail::with_prefix(m.params, {"visual."}), k);
  run("encoder.acoustic",
      [&](Tape& t, ParamBinder& p) {
        Rng r(0);
        return sum(mul(encode_audio(p, c, s.audio, r, false), t.constant(probe)));
      },
      detail::with_prefix(m.params, {"audio."}), k);
  {
    // The reconstruction target is a stop-gradient copy of the latent
    // frames, so the check holds the frames fixed.
    Tape ft(false);
    ParamBinder fp(ft, m.params);
    const Tensor frames = conv_encode_audio(fp, c.conv, audio_signal(fp, c, s.audio)).value();
    run("encoder.acoustic_pretrain",
        [&](Tape& t, ParamBinder& p) {
          Rng r(1);
          return masked_frame_pretrain_loss(p, c, t.constant(frames), 0.3, r, false);
        },
        detail::with_prefix(m.params, {"audio.mask", "audio.pos", "audio.block"}), k);
  }
  run("encoder.textual",
      [&](Tape& t, ParamBinder& p) {
        Rng r(0);
        return sum(mul(encode_text(p, c, s.text, r, false), t.constant(probe)));
      },
      detail::with_prefix(m.params, {"text."}), k);
  {
    Rng er(seed ^ 0x5a);
    const Tensor v = suite_tensor({1, c.d_model}, er), a = suite_tensor({1, c.d_model}, er),
                 t = suite_tensor({1, c.d_model}, er);
    run("fusion.classifier",
        [&](Tape& tape, ParamBinder& p) {
          Rng r(0);
          Var fused = fuse(p, c, tape.constant(v), tape.constant(a), tape.constant(t), r, false);
          Var z = mean_rows(refine(p, c, fused, r, false));
          return cross_entropy_logits(classifier_logits(z, p("classifier.w"), p("classifier.b")), s.label);
        },
        detail::with_prefix(m.params, {"fusion.", "classifier."}), k);
  }
  run("model.full",
      [&](Tape&, ParamBinder& p) { return sample_loss(p, c, s, Rng(0), false); }, m.params, k);
  return out;
}

inline std::string format_grad_suite(const GradSuiteReport& r) {
  std::ostringstream os;
  for (const auto& f : r.families) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-28s %s  checked %6zu  max_rel_err %.3e  %.2fs\n", f.name.c_str(),
                  f.report.passed() ? "PASS" : "FAIL", f.report.checked, f.report.max_rel_error, f.seconds);
    os << buf;
  }
  return os.str();
}

}  // namespace cmt
