// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint layout (little-endian):
//   "CMTC" | u16 version | u32 config_len | config JSON (UTF-8)
//   | u32 count | count x (u16 name_len | name | u64 offset)
//   | tensors in CMTT format at the recorded absolute offsets
#pragma once

#include <string>

#include "cmt/model.hpp"

namespace cmt {

inline constexpr std::uint16_t kCheckpointVersion = 1;

inline Bytes encode_checkpoint(const CmtModel& m) {
  Bytes out;
  ByteWriter w(out);
  w.magic("CMTC");
  w.u16(kCheckpointVersion);
  const std::string cfg = nlohmann::json(m.config).dump();
  w.u32(static_cast<std::uint32_t>(cfg.size()));
  w.bytes({reinterpret_cast<const std::uint8_t*>(cfg.data()), cfg.size()});
  w.u32(static_cast<std::uint32_t>(m.params.size()));

  std::size_t manifest = 0;
  for (const auto& [name, _] : m.params) manifest += 2 + name.size() + 8;
  std::uint64_t offset = out.size() + manifest;
  for (const auto& [name, t] : m.params) {
    w.str16(name);
    w.u64(offset);
    offset += 4 + 1 + 4 * t.ndim() + 8 * t.size();
  }
  for (const auto& [_, t] : m.params) write_cmtt(w, t);
  return out;
}

inline CmtModel decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("CMTC", "checkpoint");
  const auto version = r.u16();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto cfg_len = r.u32();
  auto cfg = r.take(cfg_len);
  CmtModel m;
  try {
    m.config = nlohmann::json::parse(cfg.begin(), cfg.end()).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  const auto count = r.u32();
  std::vector<std::pair<std::string, std::uint64_t>> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str16();
    entries.emplace_back(std::move(name), r.u64());
  }
  for (const auto& [name, offset] : entries) {
    r.seek(offset);
    m.params[name] = read_cmtt(r);
  }
  m.config.validate();
  CmtModel reference = init_model(m.config, 0);
  for (const auto& [name, t] : reference.params) {
    auto it = m.params.find(name);
    if (it == m.params.end()) throw FormatError("checkpoint is missing parameter '" + name + "'");
    if (it->second.shape() != t.shape())
      throw FormatError("checkpoint parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                        ", config expects " + shape_str(t.shape()));
  }
  return m;
}

inline void save_checkpoint(const std::string& path, const CmtModel& m) { write_file_bytes(path, encode_checkpoint(m)); }
inline CmtModel load_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace cmt
