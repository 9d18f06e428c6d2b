#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "omni/error.hpp"

namespace omni {

using TokenId = std::uint32_t;

inline constexpr int kAudioLayers = 7;
inline constexpr int kSeqLayers = kAudioLayers + 1;  // text + 7 audio

enum class Special : int {
  Pad = 0,
  Bos,
  EosText,
  EosAudio,
  AnswerText,
  AnswerAudio,
  InputAudioMark,
};
inline constexpr int kNumSpecials = 7;

inline constexpr std::array<std::string_view, kNumSpecials> kSpecialNames = {
    "PAD", "BOS", "EOS_TEXT", "EOS_AUDIO", "ANSWER_TEXT", "ANSWER_AUDIO", "INPUT_AUDIO_MARK"};

inline std::string_view special_name(Special s) { return kSpecialNames[static_cast<int>(s)]; }

enum class TokenKind : std::uint8_t { Text = 0, Audio = 1, Special = 2 };

inline std::string_view kind_name(TokenKind k) {
  switch (k) {
    case TokenKind::Text: return "TEXT";
    case TokenKind::Audio: return "AUDIO";
    case TokenKind::Special: return "SPECIAL";
  }
  return "?";
}

// (role, layer, local_index). Text lives on layer 0, audio on layers 1..7;
// specials report layer 0 and their role ordinal as local index.
struct TokenInfo {
  TokenKind kind;
  int layer;
  std::uint32_t local;

  friend bool operator==(const TokenInfo&, const TokenInfo&) = default;
};

// Partitioned ID space: [text | audio layer 1 | ... | audio layer 7 | specials].
class VocabSpec {
 public:
  VocabSpec() = default;

  std::uint32_t text_size() const { return text_size_; }
  std::span<const std::uint32_t, kAudioLayers> audio_layer_sizes() const {
    return std::span<const std::uint32_t, kAudioLayers>(audio_sizes_);
  }
  std::uint32_t audio_layer_size(int layer) const { return audio_sizes_.at(layer - 1); }
  std::uint32_t total_size() const { return total_; }

  TokenId special(Special s) const { return special_base_ + static_cast<TokenId>(s); }
  TokenId pad() const { return special(Special::Pad); }

  TokenId text_id(std::uint32_t local) const {
    require(local < text_size_, "text index out of range");
    return local;
  }
  // layer in [1, 7]
  TokenId audio_id(int layer, std::uint32_t local) const {
    require(layer >= 1 && layer <= kAudioLayers, "audio layer out of range");
    require(local < audio_sizes_[layer - 1], "audio index out of range for layer");
    return audio_base_[layer - 1] + local;
  }

  TokenInfo classify(TokenId id) const {
    if (id >= total_) {
      fail("token id " + std::to_string(id) + " out of range (total_size=" + std::to_string(total_) + ")");
    }
    if (id < text_size_) return {TokenKind::Text, 0, id};
    if (id >= special_base_) return {TokenKind::Special, 0, id - special_base_};
    for (int l = kAudioLayers; l >= 1; --l) {
      if (id >= audio_base_[l - 1]) return {TokenKind::Audio, l, id - audio_base_[l - 1]};
    }
    fail("unreachable classify");
  }

  TokenId compose(const TokenInfo& info) const {
    switch (info.kind) {
      case TokenKind::Text: return text_id(info.local);
      case TokenKind::Audio: return audio_id(info.layer, info.local);
      case TokenKind::Special:
        require(info.local < static_cast<std::uint32_t>(kNumSpecials), "special index out of range");
        return special_base_ + info.local;
    }
    fail("bad token kind");
  }

  bool is_special(TokenId id, Special s) const { return id == special(s); }

  // Layer `seq_layer` of the 8 model sequences may carry this id as input:
  // its own content plus any special.
  bool valid_input(int seq_layer, TokenId id) const {
    if (id >= total_) return false;
    if (id >= special_base_) return true;
    auto info = classify(id);
    return seq_layer == 0 ? info.kind == TokenKind::Text
                          : (info.kind == TokenKind::Audio && info.layer == seq_layer);
  }

  // What a head may put probability mass on: its layer's content plus the
  // stream's EOS.
  bool legal_output(int seq_layer, TokenId id) const {
    if (id >= total_) return false;
    if (seq_layer == 0) return id < text_size_ || id == special(Special::EosText);
    if (id == special(Special::EosAudio)) return true;
    return id >= audio_base_[seq_layer - 1] && id < audio_base_[seq_layer - 1] + audio_sizes_[seq_layer - 1];
  }

  std::vector<TokenId> legal_outputs(int seq_layer) const {
    std::vector<TokenId> out;
    for (TokenId id = 0; id < total_; ++id)
      if (legal_output(seq_layer, id)) out.push_back(id);
    return out;
  }

  // key=value lines, used inside checkpoints and config files.
  std::string serialize() const {
    std::string s = "vocab.text_size=" + std::to_string(text_size_) + "\nvocab.audio_layer_sizes=";
    for (int l = 0; l < kAudioLayers; ++l) {
      if (l) s += ',';
      s += std::to_string(audio_sizes_[l]);
    }
    s += '\n';
    return s;
  }

  friend bool operator==(const VocabSpec&, const VocabSpec&) = default;

  friend VocabSpec build_vocab(std::uint32_t text_size, std::span<const std::uint32_t> audio_layer_sizes);

 private:
  std::uint32_t text_size_ = 0;
  std::array<std::uint32_t, kAudioLayers> audio_sizes_{};
  std::array<TokenId, kAudioLayers> audio_base_{};
  TokenId special_base_ = 0;
  std::uint32_t total_ = 0;
};

inline VocabSpec build_vocab(std::uint32_t text_size, std::span<const std::uint32_t> audio_layer_sizes) {
  require(text_size >= 2, "text vocabulary needs at least 2 ids");
  require(audio_layer_sizes.size() == static_cast<std::size_t>(kAudioLayers),
          "expected exactly 7 audio layer sizes, got " + std::to_string(audio_layer_sizes.size()));
  VocabSpec v;
  v.text_size_ = text_size;
  TokenId next = text_size;
  for (int l = 0; l < kAudioLayers; ++l) {
    require(audio_layer_sizes[l] >= 2, "audio layer " + std::to_string(l + 1) + " needs at least 2 ids");
    v.audio_sizes_[l] = audio_layer_sizes[l];
    v.audio_base_[l] = next;
    next += audio_layer_sizes[l];
  }
  v.special_base_ = next;
  v.total_ = next + kNumSpecials;
  return v;
}

inline VocabSpec build_vocab(std::uint32_t text_size, std::uint32_t uniform_layer_size) {
  std::array<std::uint32_t, kAudioLayers> sizes;
  sizes.fill(uniform_layer_size);
  return build_vocab(text_size, sizes);
}

}  // namespace omni
