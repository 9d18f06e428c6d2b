#pragma once

// Shared fixtures for the test binaries: a scripted stand-in model for the
// engine, small model configs and scratch directories.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "omni/delay.hpp"
#include "omni/engine.hpp"
#include "omni/grammar.hpp"
#include "omni/layout.hpp"
#include "omni/model.hpp"
#include "omni/train.hpp"
#include "omni/vocab.hpp"

namespace omni::testing {

// A model whose heads follow a fixed script: head l favours the delayed
// script cell for the current step. Members whose layout has no audio output
// may follow a different text script, which lets tests make the two batch
// members disagree on purpose.
class ScriptedModel {
 public:
  struct Session {
    int steps = 0;
    bool text_only = false;
  };

  ScriptedModel(VocabSpec vocab, DelayPattern effective, std::vector<TokenId> text, TokenGrid audio_global,
                std::vector<TokenId> text_only_text = {})
      : vocab_(std::move(vocab)), eff_(effective) {
    full_ = script(text, audio_global);
    text_only_ = script(text_only_text.empty() ? text : text_only_text, TokenGrid(kAudioLayers, 0));
  }

  const VocabSpec& vocab() const { return vocab_; }
  int max_seq_len() const { return 4096; }
  Session new_session() const { return {}; }

  HeadLogits prefill(Session& s, const InputLayout& layout) const {
    s.steps = 0;
    s.text_only = !layout.output_layers[1];
    return logits(s);
  }

  std::vector<HeadLogits> step(std::span<Session* const> sessions, std::span<const std::array<TokenId, kSeqLayers>>) const {
    std::vector<HeadLogits> out;
    for (auto* s : sessions) {
      ++s->steps;
      out.push_back(logits(*s));
    }
    return out;
  }

  HeadLogits reevaluate(const InputLayout& layout, const TokenGrid& emitted) const {
    Session s{emitted.n_steps(), !layout.output_layers[1]};
    return logits(s);
  }

 private:
  TokenGrid script(const std::vector<TokenId>& text, const TokenGrid& audio) const {
    const int len = std::max(static_cast<int>(text.size()), audio.n_steps()) + 1;
    TokenGrid g(kSeqLayers, len, IdSpace::Global, vocab_.pad());
    for (std::size_t i = 0; i < text.size(); ++i) g.at(0, static_cast<int>(i)) = text[i];
    g.at(0, static_cast<int>(text.size())) = vocab_.special(Special::EosText);
    for (int l = 1; l < kSeqLayers; ++l) {
      for (int t = 0; t < audio.n_steps(); ++t) g.at(l, t) = audio.at(l - 1, t);
      g.at(l, audio.n_steps()) = vocab_.special(Special::EosAudio);
    }
    return apply_delay(g, eff_, vocab_.pad());
  }

  HeadLogits logits(const Session& s) const {
    const auto& g = s.text_only ? text_only_ : full_;
    HeadLogits out;
    const float ninf = -std::numeric_limits<float>::infinity();
    for (int l = 0; l < kSeqLayers; ++l) {
      out[l].assign(vocab_.total_size(), ninf);
      for (TokenId id : vocab_.legal_outputs(l)) out[l][id] = 0.0f;
      if (s.steps < g.n_steps() && vocab_.legal_output(l, g.at(l, s.steps))) out[l][g.at(l, s.steps)] = 5.0f;
    }
    return out;
  }

  VocabSpec vocab_;
  DelayPattern eff_;
  TokenGrid full_, text_only_;
};

// Tiny but complete model: fast enough for training inside unit tests.
inline ModelConfig tiny_config(std::uint64_t seed = 1) {
  ModelConfig c;
  c.d_model = 32;
  c.n_trunk_blocks = 1;
  c.n_extension_blocks = 1;
  c.n_heads = 2;
  c.max_seq_len = 64;
  c.seed = seed;
  return c;
}

inline TokenGrid synth_audio_global(const std::vector<TokenId>& text, const grammar::GrammarSpec& g, const VocabSpec& vocab) {
  return codec::to_global(codec::encode_signal(grammar::synthesize(text, g), codec::CodecConfig{g.base}), vocab);
}

// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            ("omni_" + tag + "_" + std::to_string(stamp) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace omni::testing
