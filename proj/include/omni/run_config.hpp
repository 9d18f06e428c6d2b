#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "omni/config.hpp"
#include "omni/engine.hpp"
#include "omni/error.hpp"
#include "omni/grammar.hpp"
#include "omni/model.hpp"
#include "omni/train.hpp"

namespace omni {

// Everything a run needs besides the corpus file. One `seed` drives model
// initialisation, batch shuffling and sampling; the corpus has its own
// seed so the data can be regenerated independently.
struct RunConfig {
  ModelConfig model;
  grammar::GrammarSpec grammar;
  TrainSchedule train;
  std::array<int, 3> stage_epochs{4, 4, 60};
  DecodeConfig decode;
  int text_advance = 0;  // shared by training layouts and decoding
  int data_count = 2000;
  std::uint64_t data_seed = 1;
  std::uint64_t seed = 1;

  // Propagates the run seed into every consumer.
  void apply_seed(std::uint64_t s) {
    seed = s;
    model.seed = s;
    train.seed = s;
    decode.seed = s;
  }

  void validate() const {
    model.validate();
    grammar.validate(model.vocab);
    train.validate();
    for (int e : stage_epochs) require(e >= 0, "train.epochs.stageN must be >= 0");
    require(text_advance >= 0, "layout.text_advance must be >= 0");
    require(data_count >= 1, "data.count must be >= 1");
    decode.validate();
  }

  static RunConfig from_kv(const KeyValues& kv) {
    RunConfig c;
    c.model = ModelConfig::from_kv(kv);
    c.grammar = grammar::GrammarSpec::from_kv(kv);

    auto& t = c.train;
    t.batch_size = kv.number<int>("train.batch_size", t.batch_size);
    t.lr_max = kv.number<double>("train.lr_max", t.lr_max);
    t.lr_min = kv.number<double>("train.lr_min", t.lr_min);
    const auto opt = kv.get("train.optimizer", t.optimizer == Optimizer::Adam ? "adam" : "sgd");
    require(opt == "adam" || opt == "sgd", "train.optimizer must be adam or sgd");
    t.optimizer = opt == "adam" ? Optimizer::Adam : Optimizer::Sgd;
    t.momentum = kv.number<double>("train.momentum", t.momentum);
    t.beta1 = kv.number<double>("train.beta1", t.beta1);
    t.beta2 = kv.number<double>("train.beta2", t.beta2);
    t.adam_eps = kv.number<double>("train.adam_eps", t.adam_eps);
    t.clip_norm = kv.number<double>("train.clip_norm", t.clip_norm);
    t.shards = kv.number<int>("train.shards", t.shards);
    t.threads = kv.number<int>("train.threads", t.threads);
    for (int s = 0; s < 3; ++s)
      c.stage_epochs[s] = kv.number<int>("train.epochs.stage" + std::to_string(s + 1), c.stage_epochs[s]);

    auto& d = c.decode;
    d.max_steps = kv.number<int>("decode.max_steps", d.max_steps);
    const auto sampling = kv.get("decode.sampling", "greedy");
    require(sampling == "greedy" || sampling == "top_k", "decode.sampling must be greedy or top_k");
    d.sampling = sampling == "greedy" ? Sampling::Greedy : Sampling::TopK;
    d.top_k = kv.number<int>("decode.top_k", d.top_k);
    d.temperature = kv.number<double>("decode.temperature", d.temperature);
    d.mode = parse_mode(kv.get("decode.mode", "parallel"));
    d.min_stream_len = kv.number<int>("decode.min_stream_len", d.min_stream_len);
    d.incremental = kv.number<int>("decode.incremental", 1) != 0;

    c.text_advance = kv.number<int>("layout.text_advance", c.text_advance);
    d.text_advance = c.text_advance;
    d.pattern = c.model.pattern;
    c.data_count = kv.number<int>("data.count", c.data_count);
    c.data_seed = kv.number<std::uint64_t>("data.seed", c.data_seed);
    c.apply_seed(kv.number<std::uint64_t>("seed", c.seed));
    if (kv.has("model.seed")) c.model.seed = kv.number<std::uint64_t>("model.seed");
    c.validate();
    return c;
  }

  KeyValues to_kv() const {
    KeyValues kv = model.to_kv();
    kv.set("data.samples_per_token", std::to_string(grammar.samples_per_token));
    kv.set("data.prompt_len", std::to_string(grammar.prompt_len));
    kv.set("data.count", std::to_string(data_count));
    kv.set("data.seed", std::to_string(data_seed));
    kv.set("train.batch_size", std::to_string(train.batch_size));
    kv.set("train.lr_max", format_double(train.lr_max));
    kv.set("train.lr_min", format_double(train.lr_min));
    kv.set("train.optimizer", train.optimizer == Optimizer::Adam ? "adam" : "sgd");
    kv.set("train.momentum", format_double(train.momentum));
    kv.set("train.beta1", format_double(train.beta1));
    kv.set("train.beta2", format_double(train.beta2));
    kv.set("train.adam_eps", format_double(train.adam_eps));
    kv.set("train.clip_norm", format_double(train.clip_norm));
    kv.set("train.shards", std::to_string(train.shards));
    kv.set("train.threads", std::to_string(train.threads));
    for (int s = 0; s < 3; ++s) kv.set("train.epochs.stage" + std::to_string(s + 1), std::to_string(stage_epochs[s]));
    kv.set("decode.max_steps", std::to_string(decode.max_steps));
    kv.set("decode.sampling", decode.sampling == Sampling::Greedy ? "greedy" : "top_k");
    kv.set("decode.top_k", std::to_string(decode.top_k));
    kv.set("decode.temperature", format_double(decode.temperature));
    kv.set("decode.mode", std::string(mode_name(decode.mode)));
    kv.set("decode.min_stream_len", std::to_string(decode.min_stream_len));
    kv.set("decode.incremental", decode.incremental ? "1" : "0");
    kv.set("layout.text_advance", std::to_string(text_advance));
    kv.set("seed", std::to_string(seed));
    return kv;
  }

  TrainSchedule schedule_for(int stage) const {
    TrainSchedule s = train;
    s.epochs = stage_epochs.at(stage - 1);
    return s;
  }

  static DecodeMode parse_mode(const std::string& s) {
    if (s == "parallel") return DecodeMode::Parallel;
    if (s == "batch" || s == "batch_parallel") return DecodeMode::BatchParallel;
    fail("decode mode must be parallel or batch, got '" + s + "'");
  }
  static std::string_view mode_name(DecodeMode m) { return m == DecodeMode::Parallel ? "parallel" : "batch_parallel"; }
};

}  // namespace omni
