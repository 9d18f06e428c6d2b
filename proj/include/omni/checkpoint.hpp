#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "omni/binio.hpp"
#include "omni/config.hpp"
#include "omni/error.hpp"
#include "omni/model.hpp"

namespace omni {

// Checkpoint layout (little endian):
//   "OMNP" | u16 version | u32 header_len | header text (key=value lines:
//   model.*, vocab.*, meta.*) | u32 n_blocks | blocks...
// Each block: u16 name_len | name | u8 group | u32 rows | u32 cols | rows*cols f32.
inline constexpr char kCheckpointMagic[4] = {'O', 'M', 'N', 'P'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  Parameters<float> params;
  KeyValues meta;  // keys without the "meta." prefix
};

struct CheckpointBlock {
  std::string name;
  Group group;
  std::uint32_t rows, cols;
};

struct CheckpointInfo {
  std::uint16_t version = 0;
  KeyValues header;
  std::vector<CheckpointBlock> blocks;
};

inline std::string encode_checkpoint(const Parameters<float>& p, const KeyValues& meta = {}) {
  KeyValues header = p.config().to_kv();
  for (auto& [k, v] : meta.entries()) header.set("meta." + k, v);
  binio::Writer w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u16(kCheckpointVersion);
  const auto text = header.serialize();
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
  w.u32(static_cast<std::uint32_t>(p.tensors().size()));
  for (auto& t : p.tensors()) {
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name);
    w.u8(static_cast<std::uint8_t>(t.group));
    w.u32(static_cast<std::uint32_t>(t.rows));
    w.u32(static_cast<std::uint32_t>(t.cols));
    for (float x : t.data) w.f32(x);
  }
  return w.data();
}

namespace detail {

inline void check_magic(binio::Reader& r, std::string_view expected, const std::string& what) {
  auto m = r.bytes(4);
  if (m != expected) fail(what + ": bad magic '" + std::string(m) + "', expected '" + std::string(expected) + "'");
}

// Reads the header and block table; with `params` set, fills its tensors.
inline CheckpointInfo read_checkpoint(std::string_view data, Parameters<float>* params, const std::string& what) {
  binio::Reader r(data, what);
  check_magic(r, std::string_view(kCheckpointMagic, 4), what);
  CheckpointInfo info;
  info.version = r.u16();
  if (info.version != kCheckpointVersion) fail(what + ": unsupported checkpoint version " + std::to_string(info.version));
  const auto header_len = r.u32();
  info.header = KeyValues::parse(r.bytes(header_len), what + " header");
  const auto n = r.u32();
  if (params) require(n == params->tensors().size(), what + ": block count " + std::to_string(n) + " does not match config");
  for (std::uint32_t i = 0; i < n; ++i) {
    CheckpointBlock b;
    b.name = std::string(r.bytes(r.u16()));
    const auto g = r.u8();
    if (g >= kNumGroups) fail(what + ": block '" + b.name + "' has unknown group " + std::to_string(g));
    b.group = static_cast<Group>(g);
    b.rows = r.u32();
    b.cols = r.u32();
    const std::size_t count = static_cast<std::size_t>(b.rows) * b.cols;
    if (params) {
      auto& t = params->tensors()[i];
      if (t.name != b.name || t.group != b.group || static_cast<std::uint32_t>(t.rows) != b.rows ||
          static_cast<std::uint32_t>(t.cols) != b.cols)
        fail(what + ": block " + std::to_string(i) + " '" + b.name + "' does not match the configured layout");
      for (std::size_t k = 0; k < count; ++k) t.data[k] = r.f32();
    } else {
      r.bytes(count * sizeof(float));
    }
    info.blocks.push_back(std::move(b));
  }
  if (r.remaining() != 0) fail(what + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return info;
}

}  // namespace detail

inline CheckpointInfo inspect_checkpoint(std::string_view data, const std::string& what = "checkpoint") {
  return detail::read_checkpoint(data, nullptr, what);
}

inline Checkpoint decode_checkpoint(std::string_view data, const std::string& what = "checkpoint") {
  auto info = inspect_checkpoint(data, what);
  Checkpoint ck{Parameters<float>(ModelConfig::from_kv(info.header)), {}};
  detail::read_checkpoint(data, &ck.params, what);
  for (auto& [k, v] : info.header.entries())
    if (k.rfind("meta.", 0) == 0) ck.meta.set(k.substr(5), v);
  return ck;
}

inline void save_checkpoint(const std::string& path, const Parameters<float>& p, const KeyValues& meta = {}) {
  binio::write_file(path, encode_checkpoint(p, meta));
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(binio::read_file(path), path); }

}  // namespace omni
