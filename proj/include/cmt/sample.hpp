// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "cmt/encoders.hpp"

namespace cmt {

/// One (frame, waveform, tokens, label) tuple.
struct MultimodalSample {
  std::uint64_t id = 0;
  VisualFrame visual;
  AudioWaveform audio;
  TokenSequence text;
  std::size_t label = 0;
};

}  // namespace cmt
