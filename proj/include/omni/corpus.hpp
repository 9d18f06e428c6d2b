#pragma once

#include <sstream>
#include <string>
#include <string_view>

#include <json.hpp>

#include "omni/binio.hpp"
#include "omni/error.hpp"
#include "omni/layout.hpp"

namespace omni {

// Corpus files are JSON Lines, one example per line:
//   {"signal_in":[...],"signal_out":[...],"task":"TEXT_QA","text_in":[...],"text_out":[...]}
// Keys are written in sorted order so equal corpora give equal bytes.

inline nlohmann::json example_to_json(const TrainingExample& ex) {
  nlohmann::json j;
  j["task"] = std::string(task_name(ex.task));
  j["text_in"] = ex.text_in;
  j["signal_in"] = ex.signal_in;
  j["text_out"] = ex.text_out;
  j["signal_out"] = ex.signal_out;
  return j;
}

inline TrainingExample example_from_json(const nlohmann::json& j) {
  require(j.is_object(), "example is not a JSON object");
  TrainingExample ex;
  ex.task = parse_task(j.at("task").get<std::string>());
  auto field = [&](const char* key, auto& out) {
    if (j.contains(key)) j.at(key).get_to(out);
  };
  field("text_in", ex.text_in);
  field("signal_in", ex.signal_in);
  field("text_out", ex.text_out);
  field("signal_out", ex.signal_out);
  detail::check_payloads(ex, true);
  return ex;
}

inline std::string encode_corpus(const Corpus& corpus) {
  std::string out;
  for (auto& ex : corpus) {
    out += example_to_json(ex).dump();
    out += '\n';
  }
  return out;
}

inline Corpus decode_corpus(std::string_view text, const std::string& what = "corpus") {
  Corpus c;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      c.push_back(example_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      fail(what + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return c;
}

inline void save_corpus(const std::string& path, const Corpus& corpus) { binio::write_file(path, encode_corpus(corpus)); }
inline Corpus load_corpus(const std::string& path) { return decode_corpus(binio::read_file(path), path); }

}  // namespace omni
