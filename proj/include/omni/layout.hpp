#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "omni/codec.hpp"
#include "omni/delay.hpp"
#include "omni/error.hpp"
#include "omni/token_grid.hpp"
#include "omni/vocab.hpp"

namespace omni {

// Modality notation: A/T = audio/text, 1/2 = input/output.
enum class TaskKind : std::uint8_t {
  Asr = 0,          // A1|T1
  Tts,              // T1|A1
  TextQa,           // T1|T2
  AudioQaTextOut,   // A1|T2
  AudioQaFull,      // A1|T1|A2|T2
};
inline constexpr std::array<TaskKind, 5> kAllTasks = {TaskKind::Asr, TaskKind::Tts, TaskKind::TextQa,
                                                      TaskKind::AudioQaTextOut, TaskKind::AudioQaFull};

inline std::string_view task_name(TaskKind k) {
  switch (k) {
    case TaskKind::Asr: return "ASR";
    case TaskKind::Tts: return "TTS";
    case TaskKind::TextQa: return "TEXT_QA";
    case TaskKind::AudioQaTextOut: return "AUDIO_QA_TEXT_OUT";
    case TaskKind::AudioQaFull: return "AUDIO_QA_FULL";
  }
  return "?";
}

inline TaskKind parse_task(std::string_view s) {
  for (auto k : kAllTasks)
    if (task_name(k) == s) return k;
  fail("unknown task '" + std::string(s) + "'");
}

inline std::string_view task_modality(TaskKind k) {
  switch (k) {
    case TaskKind::Asr: return "A1|T1";
    case TaskKind::Tts: return "T1|A1";
    case TaskKind::TextQa: return "T1|T2";
    case TaskKind::AudioQaTextOut: return "A1|T2";
    case TaskKind::AudioQaFull: return "A1|T1|A2|T2";
  }
  return "?";
}

struct TaskTraits {
  bool text_in, audio_in, text_out, audio_out;
};

inline TaskTraits traits(TaskKind k) {
  switch (k) {
    case TaskKind::Asr: return {false, true, true, false};
    case TaskKind::Tts: return {true, false, false, true};
    case TaskKind::TextQa: return {true, false, true, false};
    case TaskKind::AudioQaTextOut: return {false, true, true, false};
    case TaskKind::AudioQaFull: return {false, true, true, true};
  }
  fail("bad task kind");
}

// One corpus entry. Text ids are local text indices (equal to global ids).
struct TrainingExample {
  TaskKind task = TaskKind::TextQa;
  std::vector<TokenId> text_in;
  codec::Signal signal_in;
  std::vector<TokenId> text_out;
  codec::Signal signal_out;

  // Longest output stream in tokens, EOS included.
  int max_tokens() const {
    return static_cast<int>(std::max(text_out.empty() ? 0 : text_out.size() + 1,
                                     signal_out.empty() ? 0 : signal_out.size() + 1));
  }

  friend bool operator==(const TrainingExample&, const TrainingExample&) = default;
};

using Corpus = std::vector<TrainingExample>;

// Rectangular boolean grid matching a TokenGrid's shape.
class MaskGrid {
 public:
  MaskGrid() = default;
  MaskGrid(int layers, int steps) : layers_(layers), steps_(steps), bits_(static_cast<std::size_t>(layers) * steps, 0) {}
  int n_layers() const { return layers_; }
  int n_steps() const { return steps_; }
  bool at(int l, int t) const { return bits_.at(static_cast<std::size_t>(l) * steps_ + t) != 0; }
  void set(int l, int t, bool v) { bits_.at(static_cast<std::size_t>(l) * steps_ + t) = v ? 1 : 0; }
  int count(int layer) const {
    int c = 0;
    for (int t = 0; t < steps_; ++t) c += at(layer, t);
    return c;
  }
  int count() const {
    int c = 0;
    for (auto b : bits_) c += b;
    return c;
  }
  friend bool operator==(const MaskGrid&, const MaskGrid&) = default;

 private:
  int layers_ = 0;
  int steps_ = 0;
  std::vector<std::uint8_t> bits_;
};

struct InputLayout {
  TaskKind task = TaskKind::TextQa;
  TokenGrid input_ids;                        // 8 x T_in, global ids
  std::vector<std::vector<float>> features;  // T_in entries; empty vector = no frame at that position
  std::array<int, kSeqLayers> answer_positions{-1, -1, -1, -1, -1, -1, -1, -1};
  std::array<bool, kSeqLayers> output_layers{};
  DelayPattern pattern;  // effective pattern: structural stagger + text advance
  int text_advance = 0;
  TokenGrid target_ids;  // 8 x T_out, delayed, global ids
  MaskGrid loss_mask;    // 8 x T_out

  int input_len() const { return input_ids.n_steps(); }
  bool has_text_output() const { return output_layers[0]; }
  bool has_audio_output() const { return output_layers[1]; }
};

// Synthetic encoder features for one sample: normalised value then the
// base-B digits (coarse first), each scaled into [0, 1).
inline std::vector<float> feature_frame(std::uint64_t sample, const codec::CodecConfig& cfg) {
  std::vector<float> f(1 + kAudioLayers);
  f[0] = static_cast<float>(static_cast<double>(sample) / static_cast<double>(cfg.sample_limit()));
  std::uint64_t s = sample;
  for (int r = kAudioLayers - 1; r >= 0; --r) {
    f[1 + r] = static_cast<float>(s % cfg.base) / static_cast<float>(cfg.base);
    s /= cfg.base;
  }
  return f;
}
inline constexpr int kFeatureDim = 1 + kAudioLayers;

namespace detail {

inline void check_text(const std::vector<TokenId>& text, const VocabSpec& vocab, const char* what) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] >= vocab.text_size()) {
      fail(std::string(what) + "[" + std::to_string(i) + "]=" + std::to_string(text[i]) + " is not a text id");
    }
  }
}

inline void check_payloads(const TrainingExample& ex, bool need_outputs) {
  auto tr = traits(ex.task);
  const auto name = std::string(task_name(ex.task));
  auto check = [&](bool allowed, bool present, const char* field) {
    if (allowed && !present) fail(name + ": missing " + field + " payload");
    if (!allowed && present) fail(name + ": task forbids a " + field + " payload");
  };
  check(tr.text_in, !ex.text_in.empty(), "text_in");
  check(tr.audio_in, !ex.signal_in.empty(), "signal_in");
  if (need_outputs) {
    check(tr.text_out, !ex.text_out.empty(), "text_out");
    check(tr.audio_out, !ex.signal_out.empty(), "signal_out");
  }
}

}  // namespace detail

// Input side only: the 8 right-aligned input rows, features and <answer>
// markers. Outputs of `ex` are ignored.
inline InputLayout build_prompt_layout(const TrainingExample& ex, const VocabSpec& vocab, const DelayPattern& pattern,
                                       int text_advance) {
  detail::check_payloads(ex, false);
  detail::check_text(ex.text_in, vocab, "text_in");
  pattern.validate();
  codec::CodecConfig ccfg{vocab.audio_layer_size(1)};
  codec::check_compatible(ccfg, vocab);

  const auto tr = traits(ex.task);
  const TokenId pad = vocab.pad();

  std::array<std::vector<TokenId>, kSeqLayers> rows;
  if (tr.text_in) {
    rows[0].push_back(vocab.special(Special::Bos));
    rows[0].insert(rows[0].end(), ex.text_in.begin(), ex.text_in.end());
  }
  if (tr.text_out) rows[0].push_back(vocab.special(Special::AnswerText));

  TokenGrid audio_in;
  if (tr.audio_in) audio_in = codec::to_global(codec::encode_signal(ex.signal_in, ccfg), vocab);
  for (int l = 1; l < kSeqLayers; ++l) {
    if (tr.audio_in) {
      rows[l].push_back(vocab.special(Special::InputAudioMark));
      auto r = audio_in.row(l - 1);
      rows[l].insert(rows[l].end(), r.begin(), r.end());
    }
    if (tr.audio_out) rows[l].push_back(vocab.special(Special::AnswerAudio));
  }

  std::size_t t_in = 0;
  for (auto& r : rows) t_in = std::max(t_in, r.size());

  InputLayout out;
  out.task = ex.task;
  out.input_ids = TokenGrid(kSeqLayers, static_cast<int>(t_in), IdSpace::Global, pad);
  for (int l = 0; l < kSeqLayers; ++l) {
    const int shift = static_cast<int>(t_in - rows[l].size());
    for (std::size_t i = 0; i < rows[l].size(); ++i) out.input_ids.at(l, shift + static_cast<int>(i)) = rows[l][i];
  }
  out.features.assign(t_in, {});
  if (tr.audio_in) {
    // columns sit right after INPUT_AUDIO_MARK on the audio rows
    const int first = static_cast<int>(t_in - rows[1].size()) + 1;
    for (std::size_t s = 0; s < ex.signal_in.size(); ++s) out.features[first + s] = feature_frame(ex.signal_in[s], ccfg);
  }
  out.output_layers[0] = tr.text_out;
  for (int l = 1; l < kSeqLayers; ++l) out.output_layers[l] = tr.audio_out;
  for (int l = 0; l < kSeqLayers; ++l)
    if (out.output_layers[l]) out.answer_positions[l] = static_cast<int>(t_in) - 1;
  out.pattern = pattern.with_text_advance(text_advance);
  out.text_advance = text_advance;
  out.target_ids = TokenGrid(kSeqLayers, 0, IdSpace::Global, pad);
  out.loss_mask = MaskGrid(kSeqLayers, 0);
  return out;
}

// Undelayed 8 x W output grid (content then EOS per stream, PAD after) and its
// real-cell mask.
inline std::pair<TokenGrid, MaskGrid> undelayed_targets(const TrainingExample& ex, const VocabSpec& vocab) {
  const auto tr = traits(ex.task);
  const TokenId pad = vocab.pad();
  codec::CodecConfig ccfg{vocab.audio_layer_size(1)};
  const int text_len = tr.text_out ? static_cast<int>(ex.text_out.size()) + 1 : 0;
  const int audio_len = tr.audio_out ? static_cast<int>(ex.signal_out.size()) + 1 : 0;
  const int width = std::max(text_len, audio_len);
  TokenGrid grid(kSeqLayers, width, IdSpace::Global, pad);
  MaskGrid mask(kSeqLayers, width);
  if (tr.text_out) {
    for (std::size_t i = 0; i < ex.text_out.size(); ++i) {
      grid.at(0, static_cast<int>(i)) = ex.text_out[i];
      mask.set(0, static_cast<int>(i), true);
    }
    grid.at(0, text_len - 1) = vocab.special(Special::EosText);
    mask.set(0, text_len - 1, true);
  }
  if (tr.audio_out) {
    auto audio = codec::to_global(codec::encode_signal(ex.signal_out, ccfg), vocab);
    for (int l = 1; l < kSeqLayers; ++l) {
      for (int t = 0; t < audio.n_steps(); ++t) {
        grid.at(l, t) = audio.at(l - 1, t);
        mask.set(l, t, true);
      }
      grid.at(l, audio_len - 1) = vocab.special(Special::EosAudio);
      mask.set(l, audio_len - 1, true);
    }
  }
  return {std::move(grid), std::move(mask)};
}

inline InputLayout build_layout(const TrainingExample& ex, const VocabSpec& vocab, const DelayPattern& pattern,
                                int text_advance) {
  detail::check_payloads(ex, true);
  detail::check_text(ex.text_out, vocab, "text_out");
  InputLayout out = build_prompt_layout(ex, vocab, pattern, text_advance);
  auto [grid, mask] = undelayed_targets(ex, vocab);
  const auto& offsets = out.pattern.offsets;
  out.target_ids = apply_delay(grid, out.pattern, vocab.pad());
  out.loss_mask = MaskGrid(kSeqLayers, out.target_ids.n_steps());
  for (int l = 0; l < kSeqLayers; ++l)
    for (int t = 0; t < mask.n_steps(); ++t)
      if (mask.at(l, t)) out.loss_mask.set(l, t + offsets[l], true);
  return out;
}

// The text-only twin used by batch-parallel decoding: same input, audio
// answer markers replaced by PAD, audio layers produce nothing.
inline InputLayout text_only_variant(const InputLayout& layout, const VocabSpec& vocab) {
  InputLayout b = layout;
  for (int l = 1; l < kSeqLayers; ++l) {
    for (int t = 0; t < b.input_ids.n_steps(); ++t)
      if (b.input_ids.at(l, t) == vocab.special(Special::AnswerAudio)) b.input_ids.at(l, t) = vocab.pad();
    b.output_layers[l] = false;
    b.answer_positions[l] = -1;
    for (int t = 0; t < b.loss_mask.n_steps(); ++t) {
      b.loss_mask.set(l, t, false);
      b.target_ids.at(l, t) = vocab.pad();
    }
  }
  if (b.task == TaskKind::AudioQaFull) b.task = TaskKind::AudioQaTextOut;
  return b;
}

struct LayoutViolation {
  int layer;
  int step;
  std::string rule;
};

inline std::vector<LayoutViolation> validate_layout(const InputLayout& layout, const VocabSpec& vocab) {
  std::vector<LayoutViolation> v;
  const auto& in = layout.input_ids;
  if (in.n_layers() != kSeqLayers) {
    v.push_back({-1, -1, "input_ids must have 8 layers"});
    return v;
  }
  for (int l = 0; l < kSeqLayers; ++l)
    for (int t = 0; t < in.n_steps(); ++t)
      if (!vocab.valid_input(l, in.at(l, t))) v.push_back({l, t, "input id invalid for layer"});

  if (!layout.features.empty() && static_cast<int>(layout.features.size()) != in.n_steps())
    v.push_back({-1, -1, "feature frames not aligned with input positions"});

  for (int l = 0; l < kSeqLayers; ++l) {
    const int pos = layout.answer_positions[l];
    if (pos < 0) continue;
    const TokenId want = vocab.special(l == 0 ? Special::AnswerText : Special::AnswerAudio);
    if (pos >= in.n_steps() || in.at(l, pos) != want) v.push_back({l, pos, "answer marker missing"});
  }

  const auto& tg = layout.target_ids;
  const auto& mask = layout.loss_mask;
  if (tg.n_layers() != kSeqLayers || mask.n_layers() != kSeqLayers || mask.n_steps() != tg.n_steps()) {
    v.push_back({-1, -1, "target/mask shape mismatch"});
    return v;
  }
  if (tg.n_steps() > 0 && tg.n_steps() < layout.pattern.max_offset()) {
    v.push_back({-1, -1, "target grid shorter than delay pattern"});
    return v;
  }
  for (int l = 0; l < kSeqLayers; ++l) {
    for (int t = 0; t < tg.n_steps(); ++t) {
      const TokenId id = tg.at(l, t);
      if (!vocab.valid_input(l, id)) v.push_back({l, t, "target id invalid for layer"});
      const bool structural = structurally_padded(layout.pattern, tg.n_steps(), l, t);
      if (structural && id != vocab.pad()) v.push_back({l, t, "non-pad target in structurally padded cell"});
      if (!mask.at(l, t)) continue;
      if (structural) v.push_back({l, t, "loss mask on structural pad"});
      if (!layout.output_layers[l]) v.push_back({l, t, "loss mask on a layer without output"});
      if (!vocab.legal_output(l, id)) v.push_back({l, t, "masked target not a legal head output"});
    }
  }
  return v;
}

}  // namespace omni
