// SPDX-License-Identifier: Apache-2.0
#pragma once

// Frame: "CMT1" | u8 msg_type | u64 request_id | u32 payload_len | payload.
// Integers are little-endian; tensors inside payloads use the CMTT layout.

#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <string>

#include "cmt/model.hpp"

namespace cmt::wire {

enum class MsgType : std::uint8_t {
  encode_request = 0,
  encode_response = 1,
  fuse_request = 2,
  fuse_response = 3,
  health = 4,
  error = 5,
};

inline const char* msg_type_name(MsgType t) {
  switch (t) {
    case MsgType::encode_request: return "EncodeRequest";
    case MsgType::encode_response: return "EncodeResponse";
    case MsgType::fuse_request: return "FuseRequest";
    case MsgType::fuse_response: return "FuseResponse";
    case MsgType::health: return "Health";
    case MsgType::error: return "Error";
  }
  return "?";
}

inline constexpr std::size_t kHeaderSize = 17;
inline constexpr std::uint32_t kDefaultMaxPayload = 16u << 20;

struct Message {
  MsgType type = MsgType::health;
  std::uint64_t request_id = 0;
  Bytes payload;

  friend bool operator==(const Message&, const Message&) = default;
};

/// Decode failure with the reason as a tag, so callers can branch without
/// parsing the message text.
class WireError : public FormatError {
 public:
  enum class Kind { bad_magic, unknown_type, truncated, oversize, bad_payload };
  WireError(Kind k, const std::string& what) : FormatError(what), kind_(k) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

inline Bytes encode_message(const Message& m) {
  if (m.payload.size() > 0xffffffffULL) throw InputError("payload exceeds u32 length");
  Bytes out;
  out.reserve(kHeaderSize + m.payload.size());
  ByteWriter w(out);
  w.magic("CMT1");
  w.u8(static_cast<std::uint8_t>(m.type));
  w.u64(m.request_id);
  w.u32(static_cast<std::uint32_t>(m.payload.size()));
  w.bytes(m.payload);
  return out;
}

/// Incremental frame decoder. Bytes may arrive in arbitrary chunks; a frame is
/// only materialised once complete, and the declared length is checked
/// against `max_payload` before anything is buffered for it.
class Decoder {
 public:
  explicit Decoder(std::uint32_t max_payload = kDefaultMaxPayload) : max_(max_payload) {}

  void feed(std::span<const std::uint8_t> chunk) { buf_.insert(buf_.end(), chunk.begin(), chunk.end()); }

  /// Next complete frame, or nullopt when more bytes are needed.
  std::optional<Message> next() {
    if (buf_.size() < 4) {
      check_magic_prefix();
      return std::nullopt;
    }
    check_magic_prefix();
    if (buf_.size() < kHeaderSize) {
      if (buf_.size() > 4) check_type(buf_[4]);
      return std::nullopt;
    }
    check_type(buf_[4]);
    std::uint64_t id = 0;
    std::uint32_t len = 0;
    for (int i = 7; i >= 0; --i) id = (id << 8) | buf_[5 + static_cast<std::size_t>(i)];
    for (int i = 3; i >= 0; --i) len = (len << 8) | buf_[13 + static_cast<std::size_t>(i)];
    if (len > max_)
      throw WireError(WireError::Kind::oversize,
                      "payload of " + std::to_string(len) + " bytes exceeds limit " + std::to_string(max_));
    if (buf_.size() < kHeaderSize + len) return std::nullopt;
    Message m;
    m.type = static_cast<MsgType>(buf_[4]);
    m.request_id = id;
    m.payload.assign(buf_.begin() + kHeaderSize, buf_.begin() + static_cast<std::ptrdiff_t>(kHeaderSize + len));
    buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(kHeaderSize + len));
    return m;
  }

  /// Call at end of stream: leftover bytes mean the last frame was cut short.
  void finish() const {
    if (!buf_.empty())
      throw WireError(WireError::Kind::truncated,
                      "stream ended inside a frame (" + std::to_string(buf_.size()) + " bytes pending)");
  }

  std::size_t buffered() const noexcept { return buf_.size(); }

 private:
  void check_magic_prefix() const {
    static constexpr char magic[4] = {'C', 'M', 'T', '1'};
    for (std::size_t i = 0; i < std::min<std::size_t>(4, buf_.size()); ++i)
      if (buf_[i] != static_cast<std::uint8_t>(magic[i])) throw WireError(WireError::Kind::bad_magic, "bad frame magic");
  }
  static void check_type(std::uint8_t t) {
    if (t > static_cast<std::uint8_t>(MsgType::error))
      throw WireError(WireError::Kind::unknown_type, "unknown msg_type " + std::to_string(t));
  }

  std::uint32_t max_;
  std::deque<std::uint8_t> buf_;
};

/// Whole-buffer decode: exactly one frame, nothing after it.
inline Message decode_message(std::span<const std::uint8_t> bytes, std::uint32_t max_payload = kDefaultMaxPayload) {
  Decoder d(max_payload);
  d.feed(bytes);
  auto m = d.next();
  if (!m) d.finish();
  if (d.buffered() != 0) throw WireError(WireError::Kind::bad_payload, "trailing bytes after frame");
  return *m;
}

// --- payloads -----------------------------------------------------------------

/// Stage tags carried in EncodeRequest. `sample` asks the gateway for a full
/// inference; `sample_sequential` does the same with the encoders called one
/// after another (the benchmark baseline).
enum class StageTag : std::uint8_t { visual = 0, acoustic = 1, textual = 2, sample = 3, sample_sequential = 4 };

inline bool is_sample(StageTag t) { return t == StageTag::sample || t == StageTag::sample_sequential; }

inline const char* stage_tag_name(StageTag t) {
  switch (t) {
    case StageTag::visual: return "visual";
    case StageTag::acoustic: return "acoustic";
    case StageTag::textual: return "textual";
    case StageTag::sample: return "sample";
    case StageTag::sample_sequential: return "sample_sequential";
  }
  return "?";
}

namespace detail {

inline Tensor read_tensor(ByteReader& r) {
  try {
    return read_cmtt(r);
  } catch (const WireError&) {
    throw;
  } catch (const Error& e) {
    throw WireError(WireError::Kind::bad_payload, std::string("bad tensor in payload: ") + e.what());
  }
}

template <class F>
auto parse(std::span<const std::uint8_t> payload, const char* what, F&& body) {
  ByteReader r(payload);
  try {
    auto out = body(r);
    if (r.remaining() != 0) throw WireError(WireError::Kind::bad_payload, std::string("trailing bytes in ") + what);
    return out;
  } catch (const WireError&) {
    throw;
  } catch (const Error& e) {
    throw WireError(WireError::Kind::bad_payload, std::string(what) + ": " + e.what());
  }
}

inline Tensor token_tensor(const TokenSequence& t) {
  if (t.ids.empty()) throw InputError("empty token sequence");
  Tensor out({t.ids.size()});
  for (std::size_t i = 0; i < t.ids.size(); ++i) out[i] = t.ids[i];
  return out;
}

inline TokenSequence tokens_from(const Tensor& t) {
  if (t.ndim() != 1) throw WireError(WireError::Kind::bad_payload, "token tensor must be 1-D");
  TokenSequence s;
  for (double v : t.data()) {
    if (!(v >= 0.0 && v <= 4294967295.0) || v != std::floor(v))
      throw WireError(WireError::Kind::bad_payload, "token id is not a u32 integer");
    s.ids.push_back(static_cast<std::uint32_t>(v));
  }
  return s;
}

inline void write_audio(ByteWriter& w, const AudioWaveform& a) {
  write_cmtt(w, a.samples);
  w.f64(a.sample_rate);
}

inline AudioWaveform read_audio(ByteReader& r) {
  AudioWaveform a;
  a.samples = read_tensor(r);
  a.sample_rate = r.f64();
  return a;
}

}  // namespace detail

/// Input for one encoder stage; exactly the field matching `tag` is used.
struct EncodeInput {
  StageTag tag = StageTag::visual;
  VisualFrame visual;
  AudioWaveform audio;
  TokenSequence text;
};

// EncodeRequest: u8 tag | body.
//   visual:   CMTT pixels
//   acoustic: CMTT samples | f64 sample_rate
//   textual:  CMTT token ids (integral f64)
//   sample:   visual body | acoustic body | textual body
inline Bytes encode_request_payload(const EncodeInput& in) {
  Bytes out;
  ByteWriter w(out);
  w.u8(static_cast<std::uint8_t>(in.tag));
  switch (in.tag) {
    case StageTag::visual: write_cmtt(w, in.visual.pixels); break;
    case StageTag::acoustic: detail::write_audio(w, in.audio); break;
    case StageTag::textual: write_cmtt(w, detail::token_tensor(in.text)); break;
    case StageTag::sample:
    case StageTag::sample_sequential:
      write_cmtt(w, in.visual.pixels);
      detail::write_audio(w, in.audio);
      write_cmtt(w, detail::token_tensor(in.text));
      break;
  }
  return out;
}

inline EncodeInput decode_request_payload(std::span<const std::uint8_t> payload) {
  return detail::parse(payload, "EncodeRequest", [](ByteReader& r) {
    EncodeInput in;
    const auto tag = r.u8();
    if (tag > static_cast<std::uint8_t>(StageTag::sample_sequential))
      throw WireError(WireError::Kind::bad_payload, "unknown stage tag " + std::to_string(tag));
    in.tag = static_cast<StageTag>(tag);
    const bool all = is_sample(in.tag);
    if (in.tag == StageTag::visual || all) in.visual.pixels = detail::read_tensor(r);
    if (in.tag == StageTag::acoustic || all) in.audio = detail::read_audio(r);
    if (in.tag == StageTag::textual || all) in.text = detail::tokens_from(detail::read_tensor(r));
    return in;
  });
}

inline EncodeInput sample_input(const MultimodalSample& s, bool sequential = false) {
  return {sequential ? StageTag::sample_sequential : StageTag::sample, s.visual, s.audio, s.text};
}

/// Replies carry the time the stage spent computing, for latency breakdowns.
struct EncodeOutput {
  ModalityEmbedding embedding;
  double service_ms = 0.0;
};

// EncodeResponse: u8 modality | CMTT embedding | f64 service_ms.
inline Bytes encode_response_payload(const EncodeOutput& o) {
  Bytes out;
  ByteWriter w(out);
  w.u8(static_cast<std::uint8_t>(o.embedding.modality));
  write_cmtt(w, o.embedding.vector);
  w.f64(o.service_ms);
  return out;
}

inline EncodeOutput decode_response_payload(std::span<const std::uint8_t> payload) {
  return detail::parse(payload, "EncodeResponse", [](ByteReader& r) {
    EncodeOutput o;
    const auto m = r.u8();
    if (m > 2) throw WireError(WireError::Kind::bad_payload, "unknown modality " + std::to_string(m));
    o.embedding.modality = static_cast<Modality>(m);
    o.embedding.vector = detail::read_tensor(r);
    o.service_ms = r.f64();
    return o;
  });
}

// FuseRequest: CMTT visual | CMTT acoustic | CMTT textual embedding.
inline Bytes fuse_request_payload(const ModalityEmbedding& v, const ModalityEmbedding& a, const ModalityEmbedding& t) {
  Bytes out;
  ByteWriter w(out);
  write_cmtt(w, v.vector);
  write_cmtt(w, a.vector);
  write_cmtt(w, t.vector);
  return out;
}

struct FuseInput {
  ModalityEmbedding visual, acoustic, textual;
};

inline FuseInput decode_fuse_request(std::span<const std::uint8_t> payload) {
  return detail::parse(payload, "FuseRequest", [](ByteReader& r) {
    FuseInput f;
    f.visual = {detail::read_tensor(r), Modality::visual};
    f.acoustic = {detail::read_tensor(r), Modality::acoustic};
    f.textual = {detail::read_tensor(r), Modality::textual};
    return f;
  });
}

struct FuseOutput {
  EmotionDistribution distribution;
  double service_ms = 0.0;
};

// FuseResponse: CMTT logits | CMTT probs | f64 service_ms.
inline Bytes fuse_response_payload(const FuseOutput& o) {
  Bytes out;
  ByteWriter w(out);
  write_cmtt(w, o.distribution.logits);
  write_cmtt(w, o.distribution.probs);
  w.f64(o.service_ms);
  return out;
}

inline FuseOutput decode_fuse_response(std::span<const std::uint8_t> payload) {
  return detail::parse(payload, "FuseResponse", [](ByteReader& r) {
    FuseOutput o;
    o.distribution.logits = detail::read_tensor(r);
    o.distribution.probs = detail::read_tensor(r);
    if (o.distribution.logits.shape() != o.distribution.probs.shape())
      throw WireError(WireError::Kind::bad_payload, "logits and probs differ in shape");
    o.distribution.argmax = argmax_lowest(o.distribution.logits);
    o.service_ms = r.f64();
    return o;
  });
}

inline Bytes string_payload(const std::string& s) {
  Bytes out;
  ByteWriter w(out);
  w.str16(s.size() > 0xffff ? s.substr(0, 0xffff) : s);
  return out;
}

inline std::string decode_string_payload(std::span<const std::uint8_t> payload) {
  return detail::parse(payload, "string payload", [](ByteReader& r) { return r.str16(); });
}

inline Message error_message(std::uint64_t id, const std::string& reason) {
  return {MsgType::error, id, string_payload(reason)};
}

}  // namespace cmt::wire
