#pragma once

#include <algorithm>
#include <array>
#include <span>
#include <string>
#include <vector>

#include "omni/error.hpp"
#include "omni/token_grid.hpp"
#include "omni/vocab.hpp"

namespace omni {

// Per-sequence step offsets, text first. offsets[0] is always 0.
struct DelayPattern {
  std::array<int, kSeqLayers> offsets{0, 1, 2, 3, 4, 5, 6, 7};

  static DelayPattern standard() { return {}; }
  static DelayPattern none() { return DelayPattern{{0, 0, 0, 0, 0, 0, 0, 0}}; }

  int max_offset() const { return *std::max_element(offsets.begin(), offsets.end()); }

  void validate() const {
    require(offsets[0] == 0, "delay pattern must start with 0 (text leads)");
    for (int o : offsets) require(o >= 0, "delay offsets must be non-negative");
  }

  // Structural stagger plus a uniform text-advance of N steps on every audio layer.
  DelayPattern with_text_advance(int n) const {
    require(n >= 0, "text advance must be non-negative");
    DelayPattern p = *this;
    for (int l = 1; l < kSeqLayers; ++l) p.offsets[l] += n;
    return p;
  }

  std::string to_string() const {
    std::string s;
    for (int l = 0; l < kSeqLayers; ++l) {
      if (l) s += ',';
      s += std::to_string(offsets[l]);
    }
    return s;
  }

  friend bool operator==(const DelayPattern&, const DelayPattern&) = default;
};

// out(l, t) = in(l, t - off[l]) when that index is inside [0, T), else pad.
inline TokenGrid apply_delay(const TokenGrid& grid, std::span<const int> offsets, TokenId pad) {
  require(static_cast<int>(offsets.size()) == grid.n_layers(),
          "delay needs one offset per layer (" + std::to_string(grid.n_layers()) + " layers, " +
              std::to_string(offsets.size()) + " offsets)");
  const int max_off = offsets.empty() ? 0 : *std::max_element(offsets.begin(), offsets.end());
  TokenGrid out(grid.n_layers(), grid.n_steps() + max_off, grid.id_space(), pad);
  for (int l = 0; l < grid.n_layers(); ++l) {
    require(offsets[l] >= 0, "delay offsets must be non-negative");
    for (int t = 0; t < grid.n_steps(); ++t) out.at(l, t + offsets[l]) = grid.at(l, t);
  }
  return out;
}

inline TokenGrid revert_delay(const TokenGrid& grid, std::span<const int> offsets, TokenId pad) {
  require(static_cast<int>(offsets.size()) == grid.n_layers(),
          "delay needs one offset per layer (" + std::to_string(grid.n_layers()) + " layers, " +
              std::to_string(offsets.size()) + " offsets)");
  const int max_off = offsets.empty() ? 0 : *std::max_element(offsets.begin(), offsets.end());
  require(grid.n_steps() >= max_off, "delayed grid shorter than the pattern's maximum offset");
  const int steps = grid.n_steps() - max_off;
  TokenGrid out(grid.n_layers(), steps, grid.id_space(), pad);
  for (int l = 0; l < grid.n_layers(); ++l) {
    for (int t = 0; t < grid.n_steps(); ++t) {
      const int src = t - offsets[l];
      if (src >= 0 && src < steps) {
        out.at(l, src) = grid.at(l, t);
      } else if (grid.at(l, t) != pad) {
        fail("inconsistent padding: non-pad token " + std::to_string(grid.at(l, t)) + " at structurally padded cell (" +
             std::to_string(l) + ", " + std::to_string(t) + ")");
      }
    }
  }
  return out;
}

inline TokenGrid apply_delay(const TokenGrid& grid, const DelayPattern& pattern, TokenId pad) {
  require(grid.n_layers() == kSeqLayers, "delay pattern applies to 8-layer grids, got " + std::to_string(grid.n_layers()));
  pattern.validate();
  return apply_delay(grid, std::span<const int>(pattern.offsets), pad);
}

inline TokenGrid revert_delay(const TokenGrid& grid, const DelayPattern& pattern, TokenId pad) {
  require(grid.n_layers() == kSeqLayers, "delay pattern applies to 8-layer grids, got " + std::to_string(grid.n_layers()));
  pattern.validate();
  return revert_delay(grid, std::span<const int>(pattern.offsets), pad);
}

// True when (layer, step) of a delayed grid of `delayed_steps` columns holds
// no payload under the pattern.
inline bool structurally_padded(const DelayPattern& pattern, int delayed_steps, int layer, int step) {
  const int payload = delayed_steps - pattern.max_offset();
  const int src = step - pattern.offsets[layer];
  return src < 0 || src >= payload;
}

// First decode step at which `layer` emits a non-pad token.
inline int first_emission_step(const DelayPattern& pattern, int text_advance, int layer) {
  require(layer >= 0 && layer < kSeqLayers, "layer out of range");
  return layer == 0 ? pattern.offsets[0] : pattern.offsets[layer] + text_advance;
}

}  // namespace omni
