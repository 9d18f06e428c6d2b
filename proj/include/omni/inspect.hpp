#pragma once

#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "omni/checkpoint.hpp"
#include "omni/corpus.hpp"
#include "omni/error.hpp"
#include "omni/token_grid.hpp"

namespace omni {

enum class FileKind : std::uint8_t { Grid, Checkpoint, Corpus };

// Printable form of a file's first four bytes: ASCII kept, the rest as \xNN.
inline std::string describe_magic(std::string_view data) {
  std::string out;
  for (std::size_t i = 0; i < std::min<std::size_t>(4, data.size()); ++i) {
    const auto c = static_cast<unsigned char>(data[i]);
    if (c >= 0x20 && c < 0x7f) {
      out += static_cast<char>(c);
    } else {
      char buf[8];
      std::snprintf(buf, sizeof(buf), "\\x%02x", c);
      out += buf;
    }
  }
  return out;
}

inline FileKind detect_file_kind(std::string_view data) {
  if (data.substr(0, 4) == kGridMagic) return FileKind::Grid;
  if (data.substr(0, 4) == std::string_view(kCheckpointMagic, 4)) return FileKind::Checkpoint;
  const auto first = data.find_first_not_of(" \t\r\n");
  if (first != std::string_view::npos && data[first] == '{') return FileKind::Corpus;
  fail("unknown file magic '" + describe_magic(data) + "' (" + std::to_string(std::min<std::size_t>(4, data.size())) +
       " bytes); expected OMNG, OMNP or JSON lines");
}

namespace detail {

inline void histogram_line(std::ostringstream& out, const std::string& label, const std::map<TokenId, long>& h) {
  out << "  " << label << ":";
  if (h.empty()) out << " (empty)";
  for (auto& [id, n] : h) out << " " << id << "x" << n;
  out << "\n";
}

inline std::string inspect_grid(std::string_view data) {
  auto g = decode_grid_file(data);
  std::ostringstream out;
  out << "kind=token_grid magic=OMNG version=" << kGridVersion << "\n";
  out << "n_layers=" << g.n_layers() << " n_steps=" << g.n_steps()
      << " id_space=" << (g.id_space() == IdSpace::Global ? "global" : "local") << "\n";
  out << "token histograms (id x count):\n";
  for (int l = 0; l < g.n_layers(); ++l) {
    std::map<TokenId, long> h;
    for (TokenId t : g.row(l)) ++h[t];
    histogram_line(out, "layer " + std::to_string(l), h);
  }
  return out.str();
}

inline std::string inspect_checkpoint_file(std::string_view data) {
  auto info = inspect_checkpoint(data);
  std::ostringstream out;
  out << "kind=checkpoint magic=OMNP version=" << info.version << "\n";
  out << "header:\n";
  for (auto& [k, v] : info.header.entries()) out << "  " << k << "=" << v << "\n";
  const auto cfg = ModelConfig::from_kv(info.header);
  out << "vocab: " << cfg.vocab.serialize() << "\n";
  std::array<std::size_t, kNumGroups> counts{};
  std::array<int, kNumGroups> blocks{};
  std::size_t total = 0;
  for (auto& b : info.blocks) {
    const auto n = static_cast<std::size_t>(b.rows) * b.cols;
    counts[static_cast<int>(b.group)] += n;
    ++blocks[static_cast<int>(b.group)];
    total += n;
  }
  out << "parameter groups:\n";
  for (int g = 0; g < kNumGroups; ++g)
    out << "  " << kGroupNames[g] << ": blocks=" << blocks[g] << " elements=" << counts[g] << "\n";
  out << "total elements=" << total << "\n";
  out << "blocks:\n";
  for (auto& b : info.blocks) out << "  " << b.name << " [" << group_name(b.group) << "] " << b.rows << "x" << b.cols << "\n";
  return out.str();
}

inline std::string inspect_corpus(std::string_view data) {
  auto c = decode_corpus(data);
  std::ostringstream out;
  out << "kind=corpus format=jsonl examples=" << c.size() << "\n";
  std::map<std::string, long> per_task;
  std::map<TokenId, long> text_in, text_out;
  std::size_t sig_in = 0, sig_out = 0;
  for (auto& ex : c) {
    ++per_task[std::string(task_name(ex.task))];
    for (auto t : ex.text_in) ++text_in[t];
    for (auto t : ex.text_out) ++text_out[t];
    sig_in += ex.signal_in.size();
    sig_out += ex.signal_out.size();
  }
  out << "tasks:\n";
  for (auto& [k, n] : per_task) out << "  " << k << ": " << n << "\n";
  out << "signal samples: in=" << sig_in << " out=" << sig_out << "\n";
  out << "token histograms (id x count):\n";
  histogram_line(out, "text_in", text_in);
  histogram_line(out, "text_out", text_out);
  return out.str();
}

}  // namespace detail

// Human-readable dump of a grid file, checkpoint or corpus.
inline std::string inspect_bytes(std::string_view data) {
  switch (detect_file_kind(data)) {
    case FileKind::Grid: return detail::inspect_grid(data);
    case FileKind::Checkpoint: return detail::inspect_checkpoint_file(data);
    case FileKind::Corpus: return detail::inspect_corpus(data);
  }
  fail("unreachable file kind");
}

}  // namespace omni
