#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "omni/delay.hpp"
#include "omni/error.hpp"
#include "omni/layout.hpp"
#include "omni/model.hpp"
#include "omni/token_grid.hpp"
#include "omni/vocab.hpp"

namespace omni {

enum class Sampling : std::uint8_t { Greedy = 0, TopK = 1 };
enum class DecodeMode : std::uint8_t { Parallel = 0, BatchParallel = 1 };

struct DecodeConfig {
  int max_steps = 128;
  Sampling sampling = Sampling::Greedy;
  int top_k = 1;
  double temperature = 1.0;
  int text_advance = 0;  // N: extra audio-side offset
  DelayPattern pattern;
  DecodeMode mode = DecodeMode::Parallel;
  std::uint64_t seed = 1;
  bool incremental = true;  // false re-evaluates the whole prefix every step
  int min_stream_len = 1;   // EOS is not sampled before this many content tokens

  void validate() const {
    require(max_steps >= 1, "max_steps must be >= 1");
    require(text_advance >= 0, "text advance must be >= 0");
    require(sampling == Sampling::Greedy || (top_k >= 1 && temperature > 0), "top-k needs k >= 1 and temperature > 0");
    require(min_stream_len >= 0, "min_stream_len must be >= 0");
    pattern.validate();
    for (int l = 2; l < kSeqLayers; ++l)
      require(pattern.offsets[l] >= pattern.offsets[1], "audio layer offsets must not precede layer 1");
  }

  // Steps needed before the first complete audio column can appear.
  int min_steps_for_audio() const { return pattern.max_offset() + text_advance + 1; }
};

struct StreamEvent {
  enum class Kind : std::uint8_t { TextToken, AudioColumn, Done };
  Kind kind;
  int step;
  TokenId token = 0;                        // TextToken
  int column_index = -1;                    // AudioColumn: undelayed step
  std::array<TokenId, kAudioLayers> column{};  // AudioColumn: global ids, layer 1 first
};

using Sink = std::function<void(const StreamEvent&)>;

struct LatencyReport {
  int first_text_step = -1;
  int first_audio_step = -1;
  int last_content_step = -1;
  int total_steps = 0;
  bool truncated = false;
  double wall_ms = 0;

  int steps_to_complete() const { return last_content_step + 1; }
  double wall_ms_per_step() const { return total_steps ? wall_ms / total_steps : 0.0; }
};

struct DecodeResult {
  TokenGrid grid;      // undelayed 8 x T, trailing all-PAD columns trimmed
  TokenGrid emitted;   // raw per-step emissions, 8 x steps
  LatencyReport report;
  std::vector<TokenId> text;  // text content tokens, EOS excluded
  TokenGrid audio;            // 7 x n_columns, global ids, EOS column excluded
};

// Per-layer constraint for one sampling step.
struct Forcing {
  std::array<std::optional<TokenId>, kSeqLayers> forced{};
  std::array<bool, kSeqLayers> allow_eos{};
};

// greedy: argmax over the legal ids (lowest id wins ties); top-k: sample from
// the temperature-scaled softmax over the k best legal ids. Forced layers
// bypass sampling. EOS is masked unless allow_eos is set.
template <class Rng>
std::array<TokenId, kSeqLayers> sample_step(const HeadLogits& logits, const DecodeConfig& cfg, const Forcing& forcing,
                                            const VocabSpec& vocab, Rng& rng) {
  std::array<TokenId, kSeqLayers> out{};
  std::vector<std::pair<float, TokenId>> cand;
  for (int l = 0; l < kSeqLayers; ++l) {
    if (forcing.forced[l]) {
      out[l] = *forcing.forced[l];
      continue;
    }
    const TokenId eos = vocab.special(l == 0 ? Special::EosText : Special::EosAudio);
    const auto& z = logits[l];
    require(z.size() == vocab.total_size(), "logit vector has wrong size");
    cand.clear();
    for (TokenId id = 0; id < z.size(); ++id) {
      if (!std::isfinite(z[id]) || !vocab.legal_output(l, id)) continue;
      if (id == eos && !forcing.allow_eos[l]) continue;
      cand.push_back({z[id], id});
    }
    if (cand.empty()) fail("all logits masked for layer " + std::to_string(l));
    if (cfg.sampling == Sampling::Greedy) {
      auto best = cand.front();
      for (auto& c : cand)
        if (c.first > best.first) best = c;
      out[l] = best.second;
      continue;
    }
    std::stable_sort(cand.begin(), cand.end(), [](auto& a, auto& b) { return a.first > b.first; });
    const std::size_t k = std::min<std::size_t>(cand.size(), static_cast<std::size_t>(cfg.top_k));
    std::vector<double> w(k);
    double sum = 0;
    for (std::size_t i = 0; i < k; ++i) {
      w[i] = std::exp((static_cast<double>(cand[i].first) - cand[0].first) / cfg.temperature);
      sum += w[i];
    }
    double u = std::uniform_real_distribution<double>(0.0, sum)(rng);
    std::size_t pick = k - 1;
    for (std::size_t i = 0; i < k; ++i) {
      if (u < w[i]) {
        pick = i;
        break;
      }
      u -= w[i];
    }
    out[l] = cand[pick].second;
  }
  return out;
}

namespace detail {

// Termination bookkeeping for one decode member.
struct StreamState {
  std::array<bool, kSeqLayers> active{};
  std::array<int, kSeqLayers> off{};
  bool text_done = false;
  int text_len = 0;
  int audio_end = -1;  // undelayed column holding EOS_AUDIO on layer 1
  int max_audio_off = 0;

  StreamState(const InputLayout& layout, int text_advance, const DelayPattern& pattern) {
    active = layout.output_layers;
    const auto eff = pattern.with_text_advance(text_advance);
    off = eff.offsets;
    for (int l = 1; l < kSeqLayers; ++l) max_audio_off = std::max(max_audio_off, off[l]);
  }

  bool audio_active() const { return active[1]; }

  Forcing forcing(int step, const VocabSpec& vocab, int min_len) const {
    Forcing f;
    const TokenId pad = vocab.pad();
    if (!active[0] || text_done) {
      f.forced[0] = pad;
    } else {
      f.allow_eos[0] = text_len >= min_len;
    }
    for (int l = 1; l < kSeqLayers; ++l) {
      const int col = step - off[l];
      if (!active[l] || col < 0) {
        f.forced[l] = pad;
      } else if (audio_end >= 0 && col == audio_end) {
        f.forced[l] = vocab.special(Special::EosAudio);
      } else if (audio_end >= 0 && col > audio_end) {
        f.forced[l] = pad;
      } else {
        f.allow_eos[l] = (l == 1) && col >= min_len;
      }
    }
    return f;
  }

  // Registers the sampled column; may rewrite layers that hit the EOS column
  // in the same step as layer 1.
  void observe(int step, std::array<TokenId, kSeqLayers>& col, const VocabSpec& vocab) {
    if (active[0] && !text_done) {
      if (col[0] == vocab.special(Special::EosText)) {
        text_done = true;
      } else if (col[0] != vocab.pad()) {
        ++text_len;
      }
    }
    if (active[1] && audio_end < 0 && step - off[1] >= 0 && col[1] == vocab.special(Special::EosAudio)) {
      audio_end = step - off[1];
      for (int l = 2; l < kSeqLayers; ++l)
        if (step - off[l] == audio_end) col[l] = vocab.special(Special::EosAudio);
    }
  }

  bool finished(int step) const {
    const bool text_ok = !active[0] || text_done;
    const bool audio_ok = !active[1] || (audio_end >= 0 && step - max_audio_off >= audio_end);
    return text_ok && audio_ok;
  }
};

inline bool is_content(const VocabSpec& vocab, int layer, TokenId id) {
  if (id >= vocab.total_size()) return false;
  auto info = vocab.classify(id);
  return layer == 0 ? info.kind == TokenKind::Text : (info.kind == TokenKind::Audio && info.layer == layer);
}

// Emits events for `step`, updating the latency report.
inline void emit_events(int step, const std::vector<std::array<TokenId, kSeqLayers>>& raw, const StreamState& st,
                        const VocabSpec& vocab, LatencyReport& rep, const Sink& sink) {
  const auto& col = raw[step];
  for (int l = 0; l < kSeqLayers; ++l)
    if (is_content(vocab, l, col[l])) rep.last_content_step = step;
  if (is_content(vocab, 0, col[0])) {
    if (rep.first_text_step < 0) rep.first_text_step = step;
    if (sink) sink(StreamEvent{StreamEvent::Kind::TextToken, step, col[0]});
  }
  if (!st.audio_active()) return;
  const int c = step - st.max_audio_off;
  if (c < 0) return;
  StreamEvent ev{StreamEvent::Kind::AudioColumn, step};
  ev.column_index = c;
  for (int l = 1; l < kSeqLayers; ++l) {
    const TokenId id = raw[c + st.off[l]][l];
    if (!is_content(vocab, l, id)) return;
    ev.column[l - 1] = id;
  }
  if (rep.first_audio_step < 0) rep.first_audio_step = step;
  if (sink) sink(ev);
}

inline TokenGrid to_grid(const std::vector<std::array<TokenId, kSeqLayers>>& raw, TokenId pad) {
  TokenGrid g(kSeqLayers, static_cast<int>(raw.size()), IdSpace::Global, pad);
  for (int t = 0; t < static_cast<int>(raw.size()); ++t)
    for (int l = 0; l < kSeqLayers; ++l) g.at(l, t) = raw[t][l];
  return g;
}

inline void finalize(DecodeResult& r, const std::vector<std::array<TokenId, kSeqLayers>>& raw, const DelayPattern& eff,
                     const VocabSpec& vocab) {
  const TokenId pad = vocab.pad();
  r.emitted = to_grid(raw, pad);
  // extend by the pattern span so every payload column lands inside the grid
  auto ext = raw;
  ext.resize(raw.size() + eff.max_offset(), [&] {
    std::array<TokenId, kSeqLayers> c;
    c.fill(pad);
    return c;
  }());
  auto undelayed = revert_delay(to_grid(ext, pad), eff, pad);
  int width = undelayed.n_steps();
  while (width > 0) {
    bool all_pad = true;
    for (int l = 0; l < kSeqLayers; ++l) all_pad = all_pad && undelayed.at(l, width - 1) == pad;
    if (!all_pad) break;
    --width;
  }
  r.grid = TokenGrid(kSeqLayers, width, IdSpace::Global, pad);
  for (int l = 0; l < kSeqLayers; ++l)
    for (int t = 0; t < width; ++t) r.grid.at(l, t) = undelayed.at(l, t);
  for (int t = 0; t < width; ++t)
    if (is_content(vocab, 0, r.grid.at(0, t))) r.text.push_back(r.grid.at(0, t));
  int cols = 0;
  while (cols < width) {
    bool ok = true;
    for (int l = 1; l < kSeqLayers; ++l) ok = ok && is_content(vocab, l, r.grid.at(l, cols));
    if (!ok) break;
    ++cols;
  }
  r.audio = TokenGrid(kAudioLayers, cols, IdSpace::Global, pad);
  for (int l = 1; l < kSeqLayers; ++l)
    for (int t = 0; t < cols; ++t) r.audio.at(l - 1, t) = r.grid.at(l, t);
}

}  // namespace detail

// Text-first delayed parallel decoding: one token per head per step, audio
// layers staggered by the pattern plus N, events pushed to the sink as soon
// as a step's tokens are known.
template <class Model>
DecodeResult decode_parallel(const Model& model, const InputLayout& layout, const DecodeConfig& cfg, const Sink& sink = {}) {
  cfg.validate();
  require(cfg.mode == DecodeMode::Parallel, "decode_parallel needs mode=parallel");
  const auto& vocab = model.vocab();
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(cfg.seed);
  detail::StreamState st(layout, cfg.text_advance, cfg.pattern);
  const int budget = std::min(cfg.max_steps, model.max_seq_len() - layout.input_len() + 1);

  DecodeResult res;
  std::vector<std::array<TokenId, kSeqLayers>> raw;
  auto session = model.new_session();
  HeadLogits logits;
  if (cfg.incremental) logits = model.prefill(session, layout);
  bool done = false;
  for (int step = 0; step < budget; ++step) {
    if (!cfg.incremental) logits = model.reevaluate(layout, detail::to_grid(raw, vocab.pad()));
    auto col = sample_step(logits, cfg, st.forcing(step, vocab, cfg.min_stream_len), vocab, rng);
    st.observe(step, col, vocab);
    raw.push_back(col);
    detail::emit_events(step, raw, st, vocab, res.report, sink);
    res.report.total_steps = step + 1;
    if (st.finished(step)) {
      done = true;
      break;
    }
    if (step + 1 < budget && cfg.incremental) {
      typename Model::Session* s = &session;
      logits = model.step(std::span<typename Model::Session* const>(&s, 1), std::span<const std::array<TokenId, kSeqLayers>>(&col, 1))[0];
    }
  }
  res.report.truncated = !done;
  res.report.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  if (sink) sink(StreamEvent{StreamEvent::Kind::Done, res.report.total_steps});
  detail::finalize(res, raw, cfg.pattern.with_text_advance(cfg.text_advance), vocab);
  return res;
}

// Batch-parallel decoding with a batch of two: member A carries the full
// text+audio layout, member B the text-only twin. B's text token replaces A's
// at every step, both as the emitted text and as A's next input.
template <class Model>
DecodeResult decode_batch_parallel(const Model& model, const InputLayout& layout, const DecodeConfig& cfg, const Sink& sink = {}) {
  cfg.validate();
  require(cfg.mode == DecodeMode::BatchParallel, "decode_batch_parallel needs mode=batch_parallel");
  const auto& vocab = model.vocab();
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(cfg.seed);
  const InputLayout text_only = text_only_variant(layout, vocab);
  detail::StreamState st_a(layout, cfg.text_advance, cfg.pattern);
  detail::StreamState st_b(text_only, cfg.text_advance, cfg.pattern);
  const int budget = std::min(cfg.max_steps, model.max_seq_len() - layout.input_len() + 1);

  DecodeResult res;
  std::vector<std::array<TokenId, kSeqLayers>> raw_a, raw_b;
  auto sa = model.new_session();
  auto sb = model.new_session();
  HeadLogits la, lb;
  if (cfg.incremental) {
    la = model.prefill(sa, layout);
    lb = model.prefill(sb, text_only);
  }
  bool done = false;
  for (int step = 0; step < budget; ++step) {
    if (!cfg.incremental) {
      la = model.reevaluate(layout, detail::to_grid(raw_a, vocab.pad()));
      lb = model.reevaluate(text_only, detail::to_grid(raw_b, vocab.pad()));
    }
    auto col_b = sample_step(lb, cfg, st_b.forcing(step, vocab, cfg.min_stream_len), vocab, rng);
    st_b.observe(step, col_b, vocab);
    // A's own text sample is discarded: its text head is forced to B's choice.
    auto fa = st_a.forcing(step, vocab, cfg.min_stream_len);
    fa.forced[0] = col_b[0];
    auto col_a = sample_step(la, cfg, fa, vocab, rng);
    st_a.observe(step, col_a, vocab);
    raw_a.push_back(col_a);
    raw_b.push_back(col_b);
    detail::emit_events(step, raw_a, st_a, vocab, res.report, sink);
    res.report.total_steps = step + 1;
    if (st_a.finished(step)) {
      done = true;
      break;
    }
    if (step + 1 < budget && cfg.incremental) {
      std::array<typename Model::Session*, 2> ss{&sa, &sb};
      std::array<std::array<TokenId, kSeqLayers>, 2> cols{col_a, col_b};
      auto out = model.step(std::span<typename Model::Session* const>(ss), std::span<const std::array<TokenId, kSeqLayers>>(cols));
      la = std::move(out[0]);
      lb = std::move(out[1]);
    }
  }
  res.report.truncated = !done;
  res.report.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  if (sink) sink(StreamEvent{StreamEvent::Kind::Done, res.report.total_steps});
  detail::finalize(res, raw_a, cfg.pattern.with_text_advance(cfg.text_advance), vocab);
  return res;
}

template <class Model>
DecodeResult decode(const Model& model, const InputLayout& layout, const DecodeConfig& cfg, const Sink& sink = {}) {
  return cfg.mode == DecodeMode::Parallel ? decode_parallel(model, layout, cfg, sink) : decode_batch_parallel(model, layout, cfg, sink);
}

// Step counts to complete `audio_steps` columns plus `text_len` text tokens.
// Flattened: one token per step, text first, then 7 tokens per column.
inline long flattened_step_count(long text_len, long audio_steps) { return kAudioLayers * audio_steps + text_len; }

// Delayed parallel: the last column leaves the most-delayed layer at
// audio_steps - 1 + max audio offset (+N); text runs alongside.
inline long delayed_step_count(const DelayPattern& pattern, int text_advance, long text_len, long audio_steps) {
  long max_audio = 0;
  for (int l = 1; l < kSeqLayers; ++l) max_audio = std::max<long>(max_audio, pattern.offsets[l]);
  const long audio = audio_steps > 0 ? audio_steps + max_audio + text_advance : 0;
  return std::max(text_len, audio);
}

// Runs the flattened single-stream schedule token by token and returns the
// number of steps until the last token is out.
inline long simulate_flattened(const std::vector<TokenId>& text, const TokenGrid& audio) {
  std::vector<TokenId> stream(text.begin(), text.end());
  for (int t = 0; t < audio.n_steps(); ++t)
    for (int l = 0; l < audio.n_layers(); ++l) stream.push_back(audio.at(l, t));
  long steps = 0;
  for (std::size_t i = 0; i < stream.size(); ++i) ++steps;
  return steps;
}

}  // namespace omni
