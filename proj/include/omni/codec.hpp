#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "omni/error.hpp"
#include "omni/token_grid.hpp"
#include "omni/vocab.hpp"

namespace omni::codec {

struct CodecConfig {
  std::uint32_t base = 8;
  int n_layers = kAudioLayers;

  // B^7, the exclusive upper bound of a sample.
  std::uint64_t sample_limit() const { return pow(n_layers); }
  std::uint64_t pow(int e) const {
    std::uint64_t v = 1;
    for (int i = 0; i < e; ++i) v *= base;
    return v;
  }
  void validate() const {
    require(base >= 2, "codec base must be >= 2");
    require(n_layers == kAudioLayers, "codec has exactly 7 layers");
  }
};

// Codebook cardinality must match every audio layer of the vocabulary.
inline void check_compatible(const CodecConfig& cfg, const VocabSpec& vocab) {
  for (int l = 1; l <= kAudioLayers; ++l) {
    require(vocab.audio_layer_size(l) == cfg.base,
            "codec base " + std::to_string(cfg.base) + " != audio layer " + std::to_string(l) + " size " +
                std::to_string(vocab.audio_layer_size(l)));
  }
}

using Signal = std::vector<std::uint64_t>;

// Row r of the grid is codec layer r+1; layer 1 is the most significant digit.
inline TokenGrid encode_signal(const Signal& signal, const CodecConfig& cfg) {
  cfg.validate();
  const auto limit = cfg.sample_limit();
  TokenGrid grid(cfg.n_layers, static_cast<int>(signal.size()), IdSpace::Local);
  for (std::size_t t = 0; t < signal.size(); ++t) {
    auto s = signal[t];
    if (s >= limit) {
      fail("sample " + std::to_string(s) + " at step " + std::to_string(t) + " outside [0, " + std::to_string(limit) +
           ")");
    }
    for (int r = cfg.n_layers - 1; r >= 0; --r) {
      grid.at(r, static_cast<int>(t)) = static_cast<TokenId>(s % cfg.base);
      s /= cfg.base;
    }
  }
  return grid;
}

inline Signal decode_grid(const TokenGrid& grid, const CodecConfig& cfg) {
  cfg.validate();
  require(grid.n_layers() == cfg.n_layers,
          "codec grid needs 7 layers, got " + std::to_string(grid.n_layers()));
  Signal out(grid.n_steps(), 0);
  for (int t = 0; t < grid.n_steps(); ++t) {
    std::uint64_t s = 0;
    for (int r = 0; r < cfg.n_layers; ++r) {
      auto tok = grid.at(r, t);
      if (tok >= cfg.base) {
        fail("token " + std::to_string(tok) + " at (layer " + std::to_string(r + 1) + ", step " + std::to_string(t) +
             ") >= base " + std::to_string(cfg.base));
      }
      s = s * cfg.base + tok;
    }
    out[t] = s;
  }
  return out;
}

// Step-major interleave: step 0 layers 1..L, step 1 layers 1..L, ...
inline std::vector<TokenId> flatten_grid(const TokenGrid& grid) {
  std::vector<TokenId> flat;
  flat.reserve(static_cast<std::size_t>(grid.n_layers()) * grid.n_steps());
  for (int t = 0; t < grid.n_steps(); ++t)
    for (int l = 0; l < grid.n_layers(); ++l) flat.push_back(grid.at(l, t));
  return flat;
}

inline TokenGrid unflatten(std::span<const TokenId> seq, int n_layers, IdSpace space = IdSpace::Local) {
  require(n_layers > 0, "n_layers must be positive");
  require(seq.size() % static_cast<std::size_t>(n_layers) == 0,
          "flat length " + std::to_string(seq.size()) + " not divisible by " + std::to_string(n_layers));
  const int steps = static_cast<int>(seq.size() / n_layers);
  TokenGrid grid(n_layers, steps, space);
  for (int t = 0; t < steps; ++t)
    for (int l = 0; l < n_layers; ++l) grid.at(l, t) = seq[static_cast<std::size_t>(t) * n_layers + l];
  return grid;
}

// Local codec indices <-> global vocabulary ids for the 7 audio layers.
inline TokenGrid to_global(const TokenGrid& local, const VocabSpec& vocab) {
  require(local.n_layers() == kAudioLayers, "audio grid must have 7 layers");
  TokenGrid g(kAudioLayers, local.n_steps(), IdSpace::Global);
  for (int r = 0; r < kAudioLayers; ++r)
    for (int t = 0; t < local.n_steps(); ++t) g.at(r, t) = vocab.audio_id(r + 1, local.at(r, t));
  return g;
}

inline TokenGrid to_local(const TokenGrid& global, const VocabSpec& vocab) {
  require(global.n_layers() == kAudioLayers, "audio grid must have 7 layers");
  TokenGrid g(kAudioLayers, global.n_steps(), IdSpace::Local);
  for (int r = 0; r < kAudioLayers; ++r) {
    for (int t = 0; t < global.n_steps(); ++t) {
      auto info = vocab.classify(global.at(r, t));
      if (info.kind != TokenKind::Audio || info.layer != r + 1) {
        fail("id " + std::to_string(global.at(r, t)) + " at (layer " + std::to_string(r + 1) + ", step " +
             std::to_string(t) + ") is not an audio id of that layer");
      }
      g.at(r, t) = info.local;
    }
  }
  return g;
}

}  // namespace omni::codec
