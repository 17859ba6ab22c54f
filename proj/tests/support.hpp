// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "cmt/dataset.hpp"
#include "cmt/model.hpp"

namespace cmt::testing {

inline Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

/// Synthetic data sized for tiny_config().
inline SyntheticSpec tiny_spec(std::size_t per_class = 2) {
  SyntheticSpec s;
  s.num_classes = 3;
  s.samples_per_class = per_class;
  s.image_size = 4;
  s.patch = 2;
  s.audio_length = 32;
  s.sample_rate = 256;
  s.vocab_size = 8;
  s.text_length = 4;
  return s;
}

inline ModelConfig tiny_model_config(const SyntheticSpec& s) {
  ModelConfig c = tiny_config();
  s.apply_to(c);
  return c;
}

}  // namespace cmt::testing
