#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "omni/binio.hpp"
#include "omni/error.hpp"
#include "omni/vocab.hpp"

namespace omni {

enum class IdSpace : std::uint8_t { Local = 0, Global = 1 };

// Rectangular layers x steps grid, stored layer-major.
class TokenGrid {
 public:
  TokenGrid() = default;
  TokenGrid(int n_layers, int n_steps, IdSpace space = IdSpace::Global, TokenId fill = 0)
      : n_layers_(n_layers), n_steps_(n_steps), space_(space) {
    require(n_layers >= 0 && n_steps >= 0, "negative grid shape");
    tokens_.assign(static_cast<std::size_t>(n_layers) * n_steps, fill);
  }

  static TokenGrid from_rows(const std::vector<std::vector<TokenId>>& rows, IdSpace space = IdSpace::Global) {
    const int steps = rows.empty() ? 0 : static_cast<int>(rows.front().size());
    TokenGrid g(static_cast<int>(rows.size()), steps, space);
    for (int l = 0; l < g.n_layers(); ++l) {
      require(static_cast<int>(rows[l].size()) == steps, "ragged rows");
      for (int t = 0; t < steps; ++t) g.at(l, t) = rows[l][t];
    }
    return g;
  }

  int n_layers() const { return n_layers_; }
  int n_steps() const { return n_steps_; }
  IdSpace id_space() const { return space_; }
  void set_id_space(IdSpace s) { space_ = s; }

  TokenId& at(int layer, int step) { return tokens_[index(layer, step)]; }
  TokenId at(int layer, int step) const { return tokens_[index(layer, step)]; }

  std::span<const TokenId> row(int layer) const {
    return {tokens_.data() + static_cast<std::size_t>(layer) * n_steps_, static_cast<std::size_t>(n_steps_)};
  }
  std::span<TokenId> row(int layer) {
    return {tokens_.data() + static_cast<std::size_t>(layer) * n_steps_, static_cast<std::size_t>(n_steps_)};
  }
  std::vector<TokenId> column(int step) const {
    std::vector<TokenId> c(n_layers_);
    for (int l = 0; l < n_layers_; ++l) c[l] = at(l, step);
    return c;
  }
  const std::vector<TokenId>& raw() const { return tokens_; }

  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;

 private:
  std::size_t index(int layer, int step) const {
    if (layer < 0 || layer >= n_layers_ || step < 0 || step >= n_steps_) {
      fail("grid index (" + std::to_string(layer) + "," + std::to_string(step) + ") outside " +
           std::to_string(n_layers_) + "x" + std::to_string(n_steps_));
    }
    return static_cast<std::size_t>(layer) * n_steps_ + step;
  }

  int n_layers_ = 0;
  int n_steps_ = 0;
  IdSpace space_ = IdSpace::Global;
  std::vector<TokenId> tokens_;
};

// "OMNG" | u16 version | u16 n_layers | u32 n_steps | u8 id_space | u32 tokens (layer-major)
inline constexpr std::string_view kGridMagic = "OMNG";
inline constexpr std::uint16_t kGridVersion = 1;

inline std::string encode_grid_file(const TokenGrid& g) {
  binio::Writer w;
  w.bytes(kGridMagic);
  w.u16(kGridVersion);
  w.u16(static_cast<std::uint16_t>(g.n_layers()));
  w.u32(static_cast<std::uint32_t>(g.n_steps()));
  w.u8(static_cast<std::uint8_t>(g.id_space()));
  for (TokenId t : g.raw()) w.u32(t);
  return w.data();
}

inline TokenGrid decode_grid_file(std::string_view bytes) {
  binio::Reader r(bytes, "token grid file");
  auto magic = r.bytes(4);
  require(magic == kGridMagic, "not a token grid file (magic '" + std::string(magic) + "')");
  auto version = r.u16();
  require(version == kGridVersion, "unsupported token grid version " + std::to_string(version));
  int layers = r.u16();
  auto steps = r.u32();
  auto space = r.u8();
  require(space <= 1, "bad id_space tag " + std::to_string(space));
  require(r.remaining() == static_cast<std::size_t>(layers) * steps * 4,
          "token grid payload size mismatch: expected " + std::to_string(static_cast<std::size_t>(layers) * steps * 4) +
              " bytes, have " + std::to_string(r.remaining()));
  TokenGrid g(layers, static_cast<int>(steps), static_cast<IdSpace>(space));
  for (int l = 0; l < layers; ++l)
    for (std::uint32_t t = 0; t < steps; ++t) g.at(l, static_cast<int>(t)) = r.u32();
  return g;
}

inline void save_grid(const std::string& path, const TokenGrid& g) { binio::write_file(path, encode_grid_file(g)); }
inline TokenGrid load_grid(const std::string& path) { return decode_grid_file(binio::read_file(path)); }

}  // namespace omni
