#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "omni/codec.hpp"
#include "omni/config.hpp"
#include "omni/error.hpp"
#include "omni/layout.hpp"
#include "omni/vocab.hpp"

// Closed synthetic grammar standing in for real speech datasets.
//
// Text ids: 0-9 digits, 10 '+', 11 '-', 12 'echo', 13.. words w0, w1, ...
// Questions are three tokens: "a + b", "a - b" (a >= b) or "echo wI wJ";
// answers are the decimal digits of the result or the echoed words.
// Statements (ASR / TTS payloads) are three words.
// Speech for text: each token becomes R samples, token * B^4 + r for r < R.
namespace omni::grammar {

inline constexpr TokenId kPlus = 10;
inline constexpr TokenId kMinus = 11;
inline constexpr TokenId kEcho = 12;
inline constexpr TokenId kFirstWord = 13;

struct GrammarSpec {
  std::uint32_t text_size = 32;
  std::uint32_t base = 8;
  int samples_per_token = 4;
  int prompt_len = 3;

  int n_words() const { return static_cast<int>(text_size) - static_cast<int>(kFirstWord); }

  void validate(const VocabSpec& vocab) const {
    require(vocab.text_size() == text_size, "grammar text_size " + std::to_string(text_size) + " != vocab text_size " +
                                                std::to_string(vocab.text_size()));
    require(vocab.audio_layer_size(1) == base, "grammar base does not match vocab audio layers");
    require(n_words() >= 2, "grammar needs text_size >= 15 (digits, operators, at least two words)");
    require(prompt_len == 3, "grammar prompts are three tokens");
    codec::CodecConfig c{base};
    require(static_cast<std::uint64_t>(text_size) <= c.pow(3), "text ids must fit in three base-B digits");
    require(static_cast<std::uint64_t>(samples_per_token) <= c.pow(4) && samples_per_token >= 1,
            "samples_per_token must be in [1, B^4]");
  }

  static GrammarSpec from_kv(const KeyValues& kv) {
    GrammarSpec g;
    g.text_size = kv.number<std::uint32_t>("vocab.text_size", g.text_size);
    auto sizes = kv.list<std::uint32_t>("vocab.audio_layer_sizes", {8, 8, 8, 8, 8, 8, 8});
    require(!sizes.empty(), "vocab.audio_layer_sizes is empty");
    g.base = sizes.front();
    g.samples_per_token = kv.number<int>("data.samples_per_token", g.samples_per_token);
    g.prompt_len = kv.number<int>("data.prompt_len", g.prompt_len);
    return g;
  }
};

inline std::string token_name(TokenId id) {
  if (id <= 9) return std::to_string(id);
  if (id == kPlus) return "+";
  if (id == kMinus) return "-";
  if (id == kEcho) return "echo";
  return "w" + std::to_string(id - kFirstWord);
}

inline std::string render(const std::vector<TokenId>& text) {
  std::string s;
  for (std::size_t i = 0; i < text.size(); ++i) s += (i ? " " : "") + token_name(text[i]);
  return s;
}

inline std::vector<TokenId> parse_text(std::string_view s, const GrammarSpec& g) {
  std::vector<TokenId> out;
  std::istringstream in{std::string(s)};
  std::string w;
  while (in >> w) {
    TokenId id;
    if (w == "+") {
      id = kPlus;
    } else if (w == "-") {
      id = kMinus;
    } else if (w == "echo") {
      id = kEcho;
    } else if (w.size() == 1 && w[0] >= '0' && w[0] <= '9') {
      id = static_cast<TokenId>(w[0] - '0');
    } else if (w.size() > 1 && w[0] == 'w') {
      id = kFirstWord + static_cast<TokenId>(std::stoul(w.substr(1)));
    } else {
      fail("unknown token '" + w + "'");
    }
    if (id >= g.text_size) fail("token '" + w + "' outside the text vocabulary");
    out.push_back(id);
  }
  return out;
}

inline std::vector<TokenId> digits_of(int v) {
  if (v == 0) return {0};
  std::vector<TokenId> d;
  for (; v > 0; v /= 10) d.insert(d.begin(), static_cast<TokenId>(v % 10));
  return d;
}

// Deterministic answer for an in-grammar question; throws otherwise.
inline std::vector<TokenId> answer(const std::vector<TokenId>& q) {
  require(q.size() == 3, "questions are three tokens");
  if (q[0] == kEcho) {
    require(q[1] >= kFirstWord && q[2] >= kFirstWord, "echo takes two words");
    return {q[1], q[2]};
  }
  require(q[0] <= 9 && q[2] <= 9, "arithmetic operands are digits");
  if (q[1] == kPlus) return digits_of(static_cast<int>(q[0] + q[2]));
  if (q[1] == kMinus && q[0] >= q[2]) return digits_of(static_cast<int>(q[0] - q[2]));
  fail("not an in-grammar question: " + render(q));
}

inline codec::Signal synthesize(const std::vector<TokenId>& text, const GrammarSpec& g) {
  codec::CodecConfig c{g.base};
  const auto scale = c.pow(4);
  codec::Signal s;
  s.reserve(text.size() * g.samples_per_token);
  for (TokenId t : text)
    for (int r = 0; r < g.samples_per_token; ++r) s.push_back(static_cast<std::uint64_t>(t) * scale + static_cast<std::uint64_t>(r));
  return s;
}

template <class Rng>
std::vector<TokenId> random_question(Rng& rng, const GrammarSpec& g) {
  std::uniform_int_distribution<int> kind(0, 9), digit(0, 9), word(0, g.n_words() - 1);
  const int k = kind(rng);
  if (k < 4) return {static_cast<TokenId>(digit(rng)), kPlus, static_cast<TokenId>(digit(rng))};
  if (k < 7) {
    int a = digit(rng), b = digit(rng);
    if (a < b) std::swap(a, b);
    return {static_cast<TokenId>(a), kMinus, static_cast<TokenId>(b)};
  }
  return {kEcho, kFirstWord + static_cast<TokenId>(word(rng)), kFirstWord + static_cast<TokenId>(word(rng))};
}

template <class Rng>
std::vector<TokenId> random_statement(Rng& rng, const GrammarSpec& g) {
  std::uniform_int_distribution<int> word(0, g.n_words() - 1);
  std::vector<TokenId> s(g.prompt_len);
  for (auto& t : s) t = kFirstWord + static_cast<TokenId>(word(rng));
  return s;
}

template <class Rng>
TrainingExample make_example(TaskKind task, Rng& rng, const GrammarSpec& g) {
  TrainingExample ex;
  ex.task = task;
  switch (task) {
    case TaskKind::Asr: {
      auto s = random_statement(rng, g);
      ex.signal_in = synthesize(s, g);
      ex.text_out = s;
      break;
    }
    case TaskKind::Tts: {
      auto s = random_statement(rng, g);
      ex.text_in = s;
      ex.signal_out = synthesize(s, g);
      break;
    }
    case TaskKind::TextQa: {
      auto q = random_question(rng, g);
      ex.text_in = q;
      ex.text_out = answer(q);
      break;
    }
    case TaskKind::AudioQaTextOut: {
      auto q = random_question(rng, g);
      ex.signal_in = synthesize(q, g);
      ex.text_out = answer(q);
      break;
    }
    case TaskKind::AudioQaFull: {
      auto q = random_question(rng, g);
      ex.signal_in = synthesize(q, g);
      ex.text_out = answer(q);
      ex.signal_out = synthesize(ex.text_out, g);
      break;
    }
  }
  return ex;
}

// `count` examples cycling through the five task kinds.
inline Corpus gen_data(const GrammarSpec& g, const VocabSpec& vocab, int count, std::uint64_t seed) {
  require(count >= 1, "gen_data needs count >= 1");
  g.validate(vocab);
  std::mt19937_64 rng(seed);
  Corpus c;
  c.reserve(count);
  for (int i = 0; i < count; ++i) c.push_back(make_example(kAllTasks[i % kAllTasks.size()], rng, g));
  return c;
}

// Recovers the question text from its synthesized speech (inverse of synthesize).
inline std::vector<TokenId> transcribe(const codec::Signal& s, const GrammarSpec& g) {
  codec::CodecConfig c{g.base};
  require(s.size() % g.samples_per_token == 0, "signal length is not a whole number of tokens");
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < s.size(); i += g.samples_per_token) out.push_back(static_cast<TokenId>(s[i] / c.pow(4)));
  return out;
}

}  // namespace omni::grammar
