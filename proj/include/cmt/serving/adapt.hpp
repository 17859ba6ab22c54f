// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "cmt/fusion.hpp"

namespace cmt {

enum class Theme { bright, standard, dim };
enum class Tone { celebratory, neutral, empathetic };
enum class Speed { fast, normal, deliberate };

inline const char* to_string(Theme t) {
  switch (t) {
    case Theme::bright: return "bright";
    case Theme::standard: return "default";
    case Theme::dim: return "dim";
  }
  return "?";
}
inline const char* to_string(Tone t) {
  switch (t) {
    case Tone::celebratory: return "celebratory";
    case Tone::neutral: return "neutral";
    case Tone::empathetic: return "empathetic";
  }
  return "?";
}
inline const char* to_string(Speed s) {
  switch (s) {
    case Speed::fast: return "fast";
    case Speed::normal: return "normal";
    case Speed::deliberate: return "deliberate";
  }
  return "?";
}

struct AdaptationDirective {
  Theme theme = Theme::standard;
  Tone tone = Tone::neutral;
  Speed speed = Speed::normal;
  bool supportive_cues = false;

  friend bool operator==(const AdaptationDirective&, const AdaptationDirective&) = default;
};

inline std::string to_json_string(const AdaptationDirective& d) {
  return std::string("{\"theme\":\"") + to_string(d.theme) + "\",\"tone\":\"" + to_string(d.tone) +
         "\",\"response_speed\":\"" + to_string(d.speed) + "\",\"supportive_cues\":" +
         (d.supportive_cues ? "true" : "false") + "}";
}

/// Interface adjustments for an emotion name. Throws InputError for names
/// outside the eight-category table.
inline AdaptationDirective adapt_response(const std::string& emotion) {
  if (emotion == "happiness" || emotion == "surprise") return {Theme::bright, Tone::celebratory, Speed::fast, false};
  if (emotion == "neutral") return {};
  if (emotion == "sadness" || emotion == "fear") return {Theme::dim, Tone::empathetic, Speed::deliberate, true};
  if (emotion == "anger" || emotion == "disgust" || emotion == "contempt")
    return {Theme::standard, Tone::empathetic, Speed::deliberate, true};
  throw InputError("no adaptation rule for emotion '" + emotion + "'");
}

inline AdaptationDirective adapt_response(std::size_t category, const EmotionLabelSet& labels) {
  return adapt_response(labels.name(category));
}

}  // namespace cmt
