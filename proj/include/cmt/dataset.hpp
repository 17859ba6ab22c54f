// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multimodal corpus.
//
// independent   every modality carries the class cue k:
//                 visual   bright P x P block at patch-grid cell (k mod cells)
//                 acoustic sinusoid at base_frequency * (k + 1), random phase
//                 textual  tokens drawn from word group k
// xor-coupled   visual cue v and acoustic cue a are drawn so that
//               label = (v + a) mod C; text repeats the visual cue. No single
//               stream determines the label.
//
// Gaussian noise sigma is added to pixels and samples (then clamped to the
// valid range); each text token is replaced by a uniformly random word with
// probability min(sigma, 0.5).
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <algorithm>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmt/config.hpp"
#include "cmt/sample.hpp"

namespace cmt {

enum class Coupling { independent, xor_coupled };

inline const char* coupling_name(Coupling c) { return c == Coupling::independent ? "independent" : "xor-coupled"; }

inline Coupling parse_coupling(const std::string& s) {
  if (s == "independent") return Coupling::independent;
  if (s == "xor-coupled" || s == "xor") return Coupling::xor_coupled;
  throw ConfigError("unknown coupling mode '" + s + "' (expected independent or xor-coupled)");
}

struct SyntheticSpec {
  std::size_t num_classes = 8;
  std::size_t samples_per_class = 50;
  double noise = 0.1;
  Coupling coupling = Coupling::independent;
  std::uint64_t seed = 0;
  std::uint64_t first_id = 0;

  std::size_t image_size = 16;
  std::size_t image_channels = 1;
  std::size_t patch = 4;
  std::size_t audio_length = 256;
  double sample_rate = 4096.0;
  std::size_t text_length = 8;
  std::size_t vocab_size = 64;

  double base_frequency() const { return 4.0 * sample_rate / static_cast<double>(audio_length); }
  std::size_t grid_cells() const { return (image_size / patch) * (image_size / patch); }
  std::size_t word_count() const { return vocab_size - kFirstWordToken; }
  std::size_t group_size() const { return word_count() / num_classes; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (num_classes < 2) fail("synthetic spec needs at least 2 classes");
    if (samples_per_class < 1) fail("synthetic spec needs at least 1 sample per class");
    if (!(noise >= 0.0) || !std::isfinite(noise)) fail("noise must be a finite value >= 0");
    if (patch == 0 || image_size % patch) fail("image_size must be divisible by patch");
    if (image_channels == 0) fail("image_channels must be positive");
    if (!(sample_rate > 0.0)) fail("sample_rate must be positive");
    if (text_length < 2) fail("text_length must leave room for CLS and one word");
    if (vocab_size <= kFirstWordToken || group_size() == 0)
      fail("vocab_size " + std::to_string(vocab_size) + " too small for " + std::to_string(num_classes) +
           " word groups");
    if (base_frequency() * static_cast<double>(num_classes) >= sample_rate / 2.0)
      fail("highest class frequency exceeds Nyquist; lengthen audio_length");
  }

  /// Model geometry that consumes these samples.
  void apply_to(ModelConfig& c) const {
    c.image_height = c.image_width = image_size;
    c.image_channels = image_channels;
    c.patch = patch;
    c.audio_length = audio_length;
    c.sample_rate = sample_rate;
    c.vocab_size = vocab_size;
    c.max_text_length = text_length;
    if (c.labels.size() != num_classes) {
      auto defaults = default_emotion_labels();
      c.labels.clear();
      for (std::size_t k = 0; k < num_classes; ++k)
        c.labels.push_back(num_classes == defaults.size() ? defaults[k] : "class" + std::to_string(k));
    }
  }
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = {{"num_classes", s.num_classes}, {"samples_per_class", s.samples_per_class}, {"noise", s.noise},
       {"coupling", coupling_name(s.coupling)}, {"seed", s.seed}, {"first_id", s.first_id},
       {"image_size", s.image_size}, {"image_channels", s.image_channels}, {"patch", s.patch},
       {"audio_length", s.audio_length}, {"sample_rate", s.sample_rate}, {"text_length", s.text_length},
       {"vocab_size", s.vocab_size}};
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.samples_per_class = j.at("samples_per_class").get<std::size_t>();
  s.noise = j.at("noise").get<double>();
  s.coupling = parse_coupling(j.at("coupling").get<std::string>());
  s.seed = j.at("seed").get<std::uint64_t>();
  s.first_id = j.value("first_id", std::uint64_t{0});
  s.image_size = j.at("image_size").get<std::size_t>();
  s.image_channels = j.at("image_channels").get<std::size_t>();
  s.patch = j.at("patch").get<std::size_t>();
  s.audio_length = j.at("audio_length").get<std::size_t>();
  s.sample_rate = j.at("sample_rate").get<double>();
  s.text_length = j.at("text_length").get<std::size_t>();
  s.vocab_size = j.at("vocab_size").get<std::size_t>();
}

namespace detail {

inline VisualFrame render_visual(const SyntheticSpec& s, std::size_t cue, Rng& rng) {
  const std::size_t n = s.image_size, C = s.image_channels, P = s.patch, gw = n / P;
  const std::size_t cell = cue % s.grid_cells();
  const std::size_t r0 = (cell / gw) * P, c0 = (cell % gw) * P;
  Tensor px({n, n, C});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t ch = 0; ch < C; ++ch) {
        const bool lit = r >= r0 && r < r0 + P && c >= c0 && c < c0 + P;
        const double v = (lit ? 1.0 : 0.0) + (s.noise > 0.0 ? s.noise * rng.normal() : 0.0);
        px[(r * n + c) * C + ch] = std::clamp(v, 0.0, 1.0);
      }
  return {std::move(px)};
}

inline AudioWaveform render_audio(const SyntheticSpec& s, std::size_t cue, Rng& rng) {
  const double freq = s.base_frequency() * static_cast<double>(cue + 1);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  Tensor w({s.audio_length});
  for (std::size_t i = 0; i < s.audio_length; ++i) {
    const double t = static_cast<double>(i) / s.sample_rate;
    double v = 0.8 * std::sin(2.0 * std::numbers::pi * freq * t + phase);
    if (s.noise > 0.0) v += s.noise * rng.normal();
    w[i] = std::clamp(v, -1.0, 1.0);
  }
  return {std::move(w), s.sample_rate};
}

inline TokenSequence render_text(const SyntheticSpec& s, std::size_t cue, Rng& rng) {
  const std::size_t g = s.group_size();
  const double corrupt = std::min(s.noise, 0.5);
  TokenSequence t{{kClsToken}};
  for (std::size_t i = 1; i < s.text_length; ++i) {
    std::size_t id;
    if (corrupt > 0.0 && rng.bernoulli(corrupt))
      id = kFirstWordToken + rng.below(s.word_count());
    else
      id = kFirstWordToken + cue * g + rng.below(g);
    t.ids.push_back(static_cast<std::uint32_t>(id));
  }
  return t;
}

}  // namespace detail

/// Cues behind a sample: (visual, acoustic, textual).
struct SampleCues {
  std::size_t visual = 0, acoustic = 0, textual = 0;
};

/// Deterministic cue assignment for (spec, label, index).
inline SampleCues draw_cues(const SyntheticSpec& s, std::size_t label, Rng& rng) {
  if (s.coupling == Coupling::independent) return {label, label, label};
  const std::size_t C = s.num_classes;
  const std::size_t v = rng.below(C);
  const std::size_t a = (label + C - v) % C;
  return {v, a, v};
}

/// Class-major list of samples; a pure function of the spec.
inline std::vector<MultimodalSample> generate_dataset(const SyntheticSpec& spec) {
  spec.validate();
  std::vector<MultimodalSample> out;
  out.reserve(spec.num_classes * spec.samples_per_class);
  Rng root(spec.seed);
  std::uint64_t id = spec.first_id;
  for (std::size_t k = 0; k < spec.num_classes; ++k)
    for (std::size_t j = 0; j < spec.samples_per_class; ++j) {
      Rng rng = root.split({k, j});
      Rng cue_rng = rng.split({0});
      const SampleCues cues = draw_cues(spec, k, cue_rng);
      Rng rv = rng.split({1}), ra = rng.split({2}), rt = rng.split({3});
      out.push_back(MultimodalSample{id++, detail::render_visual(spec, cues.visual, rv),
                                     detail::render_audio(spec, cues.acoustic, ra),
                                     detail::render_text(spec, cues.textual, rt), k});
    }
  return out;
}

struct DatasetSplits {
  std::vector<MultimodalSample> train, validation, test;
};

/// Three disjoint splits from one spec (different seeds and id ranges).
inline DatasetSplits generate_splits(SyntheticSpec spec, std::size_t val_per_class, std::size_t test_per_class) {
  const std::uint64_t seed = spec.seed;
  DatasetSplits d;
  spec.seed = mix64(seed ^ 1);
  spec.first_id = 0;
  d.train = generate_dataset(spec);
  const std::size_t n_train = d.train.size();
  spec.seed = mix64(seed ^ 2);
  spec.first_id = n_train;
  spec.samples_per_class = val_per_class;
  d.validation = generate_dataset(spec);
  spec.seed = mix64(seed ^ 3);
  spec.first_id = n_train + d.validation.size();
  spec.samples_per_class = test_per_class;
  if (test_per_class > 0) d.test = generate_dataset(spec);
  return d;
}

// --- files ------------------------------------------------------------------
// <dir>/manifest.json   {"spec": {...}, "samples": [{id, label, visual, audio, sample_rate, text}]}
// <dir>/visual/<id>.cmtt, <dir>/audio/<id>.cmtt

inline void write_dataset(const std::filesystem::path& dir, const std::vector<MultimodalSample>& samples,
                          const nlohmann::json& spec_json) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "visual");
  fs::create_directories(dir / "audio");
  nlohmann::json records = nlohmann::json::array();
  for (const auto& s : samples) {
    const std::string vis = "visual/" + std::to_string(s.id) + ".cmtt";
    const std::string aud = "audio/" + std::to_string(s.id) + ".cmtt";
    save_tensor((dir / vis).string(), s.visual.pixels);
    save_tensor((dir / aud).string(), s.audio.samples);
    records.push_back({{"id", s.id}, {"label", s.label}, {"visual", vis}, {"audio", aud},
                       {"sample_rate", s.audio.sample_rate}, {"text", s.text.ids}});
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw InputError("cannot write " + (dir / "manifest.json").string());
  out << nlohmann::json{{"spec", spec_json}, {"samples", records}}.dump(1) << '\n';
}

struct LoadedDataset {
  nlohmann::json spec;
  std::vector<MultimodalSample> samples;
};

inline LoadedDataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw InputError("cannot open dataset manifest " + (dir / "manifest.json").string());
  LoadedDataset d;
  try {
    const auto j = nlohmann::json::parse(in);
    d.spec = j.at("spec");
    for (const auto& r : j.at("samples")) {
      MultimodalSample s;
      s.id = r.at("id").get<std::uint64_t>();
      s.label = r.at("label").get<std::size_t>();
      s.visual.pixels = load_tensor((dir / r.at("visual").get<std::string>()).string());
      s.audio.samples = load_tensor((dir / r.at("audio").get<std::string>()).string());
      s.audio.sample_rate = r.at("sample_rate").get<double>();
      s.text.ids = r.at("text").get<std::vector<std::uint32_t>>();
      d.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("dataset manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  return d;
}

}  // namespace cmt
