#pragma once

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "omni/binio.hpp"
#include "omni/checkpoint.hpp"
#include "omni/codec.hpp"
#include "omni/corpus.hpp"
#include "omni/engine.hpp"
#include "omni/grammar.hpp"
#include "omni/inspect.hpp"
#include "omni/run_config.hpp"
#include "omni/train.hpp"

// Command implementations behind the `omni` tool. Each takes plain option
// structs and an output stream so tests can drive them in-process.
namespace omni::cli {

inline RunConfig load_run_config(const std::string& path) {
  if (path.empty()) return RunConfig{};
  return RunConfig::from_kv(KeyValues::parse(binio::read_file(path), path));
}

// ---------------------------------------------------------------- gen-data

struct GenDataOptions {
  std::string config;
  std::string out = "corpus.jsonl";
  std::optional<int> count;
  std::optional<std::uint64_t> seed;
};

inline Corpus cmd_gen_data(const GenDataOptions& o, std::ostream& log) {
  auto rc = load_run_config(o.config);
  const int count = o.count.value_or(rc.data_count);
  const auto seed = o.seed.value_or(rc.data_seed);
  auto corpus = grammar::gen_data(rc.grammar, rc.model.vocab, count, seed);
  save_corpus(o.out, corpus);
  log << "wrote " << corpus.size() << " examples to " << o.out << " (seed " << seed << ")\n";
  return corpus;
}

// ------------------------------------------------------------------- train

struct TrainOptions {
  std::string config;
  std::string corpus = "corpus.jsonl";
  std::string stage = "all";  // 1, 2, 3 or all
  std::string out_dir = "run";
  std::string from;  // prior-stage checkpoint when starting at stage 2 or 3
  std::string metrics;  // default: <out_dir>/metrics.json
  std::optional<std::uint64_t> seed;
};

inline std::string stage_checkpoint_path(const std::string& dir, int stage) {
  return (std::filesystem::path(dir) / ("stage" + std::to_string(stage) + ".omnp")).string();
}

inline nlohmann::json per_task_metrics(const Parameters<float>& p, const std::vector<InputLayout>& layouts) {
  nlohmann::json j = nlohmann::json::object();
  for (auto k : kAllTasks) {
    auto m = evaluate(p, layouts, [k](const InputLayout& l) { return l.task == k; });
    if (m.examples == 0) continue;
    j[std::string(task_name(k))] = {{"loss", m.loss}, {"token_accuracy", m.token_accuracy}, {"examples", m.examples}};
  }
  return j;
}

inline nlohmann::json cmd_train(const TrainOptions& o, std::ostream& log) {
  auto rc = load_run_config(o.config);
  if (o.seed) rc.apply_seed(*o.seed);
  int first = 1, last = 3;
  if (o.stage != "all") {
    if (o.stage != "1" && o.stage != "2" && o.stage != "3") fail("--stage must be 1, 2, 3 or all");
    first = last = o.stage[0] - '0';
  }
  auto corpus = load_corpus(o.corpus);
  require(!corpus.empty(), "corpus " + o.corpus + " is empty");

  Parameters<float> params;
  if (first == 1) {
    params = Parameters<float>::init(rc.model);
  } else {
    const auto prior = o.from.empty() ? stage_checkpoint_path(o.out_dir, first - 1) : o.from;
    if (!std::filesystem::exists(prior))
      fail("stage " + std::to_string(first) + " needs the stage-" + std::to_string(first - 1) + " checkpoint: " + prior +
           " not found");
    auto ck = load_checkpoint(prior);
    const int prior_stage = ck.meta.number<int>("stage", 0);
    require(prior_stage == first - 1, prior + " is a stage-" + std::to_string(prior_stage) + " checkpoint, expected stage " +
                                          std::to_string(first - 1));
    require(ck.params.config() == rc.model, prior + " was trained with a different model config");
    params = std::move(ck.params);
  }

  std::filesystem::create_directories(o.out_dir);
  const auto layouts = build_layouts(corpus, rc.model.vocab, rc.model.pattern, rc.text_advance);
  nlohmann::json metrics;
  metrics["config"] = nlohmann::json::object();
  const auto config_kv = rc.to_kv();
  for (auto& [k, v] : config_kv.entries()) metrics["config"][k] = v;
  metrics["corpus_examples"] = corpus.size();
  metrics["initial"] = per_task_metrics(params, layouts);
  metrics["stages"] = nlohmann::json::array();

  for (int s = first; s <= last; ++s) {
    const auto plan = StagePlan::standard(s);
    Trainer trainer(params, rc.schedule_for(s));
    auto sm = trainer.run(plan, layouts, [&](const EpochMetrics& e) {
      log << "stage " << s << " epoch " << e.epoch << " loss " << std::setprecision(6) << e.loss << " token_acc "
          << e.token_accuracy << " lr " << e.lr_end << "\n";
      log.flush();
    });
    nlohmann::json js;
    js["stage"] = s;
    js["examples"] = sm.examples;
    js["steps"] = sm.steps;
    js["trainable_groups"] = nlohmann::json::array();
    for (int g = 0; g < kNumGroups; ++g)
      if (plan.trainable.on[g]) js["trainable_groups"].push_back(std::string(kGroupNames[g]));
    js["tasks"] = nlohmann::json::array();
    for (auto k : plan.tasks) js["tasks"].push_back(std::string(task_name(k)));
    js["epochs"] = nlohmann::json::array();
    for (auto& e : sm.epochs)
      js["epochs"].push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"token_accuracy", e.token_accuracy}, {"lr_end", e.lr_end}});
    js["per_task"] = per_task_metrics(params, layouts);
    const auto path = stage_checkpoint_path(o.out_dir, s);
    KeyValues meta;
    meta.set("stage", std::to_string(s));
    meta.set("layout.text_advance", std::to_string(rc.text_advance));
    meta.set("seed", std::to_string(rc.seed));
    save_checkpoint(path, params, meta);
    js["checkpoint"] = path;
    metrics["stages"].push_back(js);
    log << "stage " << s << " checkpoint " << path << "\n";
  }
  const auto mpath = o.metrics.empty() ? (std::filesystem::path(o.out_dir) / "metrics.json").string() : o.metrics;
  binio::write_file(mpath, metrics.dump(2) + "\n");
  log << "metrics " << mpath << "\n";
  return metrics;
}

// ------------------------------------------------------------------ decode

struct DecodeOptions {
  std::string config;
  std::string checkpoint;
  std::string prompt;
  std::string task;  // default: TEXT_QA
  std::string mode = "parallel";
  bool greedy = false;
  std::optional<int> top_k;
  std::optional<double> temperature;
  std::optional<int> text_advance;
  std::optional<int> max_steps;
  std::optional<std::uint64_t> seed;
  std::string out_prefix = "decode";
};

struct DecodeOutcome {
  DecodeResult result;
  codec::Signal signal;
  nlohmann::json meta;
};

inline TrainingExample prompt_example(TaskKind task, const std::string& prompt, const grammar::GrammarSpec& g) {
  TrainingExample ex;
  ex.task = task;
  auto text = grammar::parse_text(prompt, g);
  require(!text.empty(), "empty prompt");
  if (traits(task).audio_in) {
    ex.signal_in = grammar::synthesize(text, g);
  } else {
    ex.text_in = text;
  }
  return ex;
}

inline DecodeOutcome cmd_decode(const DecodeOptions& o, std::ostream& out) {
  require(!o.checkpoint.empty(), "--checkpoint is required");
  auto ck = load_checkpoint(o.checkpoint);
  auto rc = load_run_config(o.config);
  DecodeConfig cfg = rc.decode;
  cfg.pattern = ck.params.config().pattern;
  cfg.text_advance = ck.meta.number<int>("layout.text_advance", 0);
  cfg.mode = RunConfig::parse_mode(o.mode);
  if (o.top_k) {
    require(!o.greedy, "--greedy and --top-k are exclusive");
    cfg.sampling = Sampling::TopK;
    cfg.top_k = *o.top_k;
  }
  if (o.greedy) cfg.sampling = Sampling::Greedy;
  if (o.temperature) cfg.temperature = *o.temperature;
  if (o.text_advance) cfg.text_advance = *o.text_advance;
  if (o.max_steps) cfg.max_steps = *o.max_steps;
  if (o.seed) cfg.seed = *o.seed;

  const auto& vocab = ck.params.config().vocab;
  auto g = rc.grammar;
  g.validate(vocab);
  const auto task = o.task.empty() ? TaskKind::TextQa : parse_task(o.task);
  const auto layout = build_prompt_layout(prompt_example(task, o.prompt, g), vocab, cfg.pattern, cfg.text_advance);

  StepModel<float> model(ck.params);
  Sink sink = [&](const StreamEvent& e) {
    switch (e.kind) {
      case StreamEvent::Kind::TextToken:
        out << "step " << e.step << " text " << grammar::token_name(e.token) << "\n";
        break;
      case StreamEvent::Kind::AudioColumn: {
        out << "step " << e.step << " audio " << e.column_index << ":";
        for (int l = 0; l < kAudioLayers; ++l) out << " " << vocab.classify(e.column[l]).local;
        out << "\n";
        break;
      }
      case StreamEvent::Kind::Done:
        out << "step " << e.step << " done\n";
        break;
    }
    out.flush();
  };
  DecodeOutcome oc;
  oc.result = decode(model, layout, cfg, sink);
  const auto& r = oc.result;
  oc.signal = codec::decode_grid(codec::to_local(r.audio, vocab), codec::CodecConfig{g.base});

  save_grid(o.out_prefix + ".omng", r.grid);
  std::string dump;
  for (std::size_t i = 0; i < oc.signal.size(); ++i) dump += std::to_string(i) + " " + std::to_string(oc.signal[i]) + "\n";
  binio::write_file(o.out_prefix + ".signal.txt", dump);

  auto& m = oc.meta;
  m["task"] = std::string(task_name(task));
  m["prompt"] = o.prompt;
  m["mode"] = std::string(RunConfig::mode_name(cfg.mode));
  m["text"] = grammar::render(r.text);
  m["text_ids"] = r.text;
  m["audio_columns"] = r.audio.n_steps();
  m["truncated"] = r.report.truncated;
  m["first_text_step"] = r.report.first_text_step;
  m["first_audio_step"] = r.report.first_audio_step;
  m["total_steps"] = r.report.total_steps;
  m["text_advance"] = cfg.text_advance;
  m["max_steps"] = cfg.max_steps;
  m["seed"] = cfg.seed;
  binio::write_file(o.out_prefix + ".meta.json", m.dump(2) + "\n");

  out << "answer: " << grammar::render(r.text) << "\n";
  out << "audio_columns=" << r.audio.n_steps() << " total_steps=" << r.report.total_steps
      << " truncated=" << (r.report.truncated ? 1 : 0) << "\n";
  out << "wrote " << o.out_prefix << ".omng " << o.out_prefix << ".signal.txt " << o.out_prefix << ".meta.json\n";
  return oc;
}

// ------------------------------------------------------------------- bench

struct BenchOptions {
  std::string config;
  std::string checkpoint;
  std::string suite = "standard";  // standard | quick
  std::string json_out;            // empty: no file
  std::optional<std::uint64_t> seed;
};

inline nlohmann::json cmd_bench(const BenchOptions& o, std::ostream& out) {
  require(!o.checkpoint.empty(), "--checkpoint is required");
  auto ck = load_checkpoint(o.checkpoint);
  auto rc = load_run_config(o.config);
  int prompts = 0;
  std::vector<int> advances;
  if (o.suite == "standard") {
    prompts = 20;
    advances = {0, 2, 5};
  } else if (o.suite == "quick") {
    prompts = 4;
    advances = {0, 2};
  } else {
    fail("unknown bench suite '" + o.suite + "' (standard, quick)");
  }
  const auto& vocab = ck.params.config().vocab;
  const auto& pattern = ck.params.config().pattern;
  const auto seed = o.seed.value_or(rc.seed);
  std::mt19937_64 rng(seed);
  std::vector<TrainingExample> exs;
  for (int i = 0; i < prompts; ++i) exs.push_back(grammar::make_example(TaskKind::AudioQaFull, rng, rc.grammar));
  StepModel<float> model(ck.params);

  nlohmann::json report;
  report["suite"] = o.suite;
  report["prompts"] = prompts;
  report["runs"] = nlohmann::json::array();
  bool laws_ok = true;
  out << std::left << std::setw(16) << "mode" << std::setw(4) << "N" << std::setw(12) << "first_text" << std::setw(13)
      << "first_audio" << std::setw(12) << "ms/step" << std::setw(12) << "delayed" << std::setw(12) << "flattened"
      << "laws\n";
  for (auto mode : {DecodeMode::Parallel, DecodeMode::BatchParallel}) {
    for (int n : advances) {
      DecodeConfig cfg = rc.decode;
      cfg.mode = mode;
      cfg.pattern = pattern;
      cfg.text_advance = n;
      cfg.sampling = Sampling::Greedy;
      cfg.seed = seed;
      long delayed = 0, flattened = 0, steps = 0;
      double wall = 0;
      int first_text = -1, first_audio = -1;
      bool ok = true;
      for (auto& ex : exs) {
        auto layout = build_prompt_layout(ex, vocab, pattern, n);
        auto r = decode(model, layout, cfg);
        wall += r.report.wall_ms;
        steps += r.report.total_steps;
        first_text = std::max(first_text, r.report.first_text_step);
        if (r.report.first_audio_step >= 0) first_audio = std::max(first_audio, r.report.first_audio_step);
        ok = ok && r.report.first_text_step == 0;
        if (r.report.first_audio_step >= 0) ok = ok && r.report.first_audio_step == first_emission_step(pattern, n, kSeqLayers - 1);
        const long text_len = static_cast<long>(r.text.size()), cols = r.audio.n_steps();
        const long analytic = delayed_step_count(pattern, n, text_len, cols);
        if (!r.report.truncated) ok = ok && r.report.steps_to_complete() == analytic;
        delayed += r.report.steps_to_complete();
        flattened += flattened_step_count(text_len, cols);
      }
      laws_ok = laws_ok && ok;
      const double ms_step = steps ? wall / static_cast<double>(steps) : 0.0;
      report["runs"].push_back({{"mode", std::string(RunConfig::mode_name(mode))},
                                {"text_advance", n},
                                {"first_text_step", first_text},
                                {"first_audio_step", first_audio},
                                {"expected_first_audio_step", first_emission_step(pattern, n, kSeqLayers - 1)},
                                {"wall_ms_per_step", ms_step},
                                {"total_steps_delayed", delayed},
                                {"total_steps_flattened", flattened},
                                {"laws_ok", ok}});
      out << std::left << std::setw(16) << RunConfig::mode_name(mode) << std::setw(4) << n << std::setw(12) << first_text
          << std::setw(13) << first_audio << std::setw(12) << std::fixed << std::setprecision(3) << ms_step << std::setw(12)
          << delayed << std::setw(12) << flattened << (ok ? "ok" : "VIOLATED") << "\n";
    }
  }
  // per-step cost of batch-parallel relative to parallel at N=0
  const double par = report["runs"][0]["wall_ms_per_step"].get<double>();
  const double bat = report["runs"][advances.size()]["wall_ms_per_step"].get<double>();
  report["batch_over_parallel_per_step"] = par > 0 ? bat / par : 0.0;
  report["batch_over_parallel_reference"] = 2.5;

  report["analytic"] = nlohmann::json::array();
  for (long t : {1L, 8L, 64L, 256L}) {
    const long text_len = 4;
    const long f = flattened_step_count(text_len, t), d = delayed_step_count(pattern, 0, text_len, t);
    report["analytic"].push_back({{"audio_steps", t}, {"text_len", text_len}, {"flattened", f}, {"delayed", d},
                                  {"ratio", static_cast<double>(f) / static_cast<double>(d)}});
  }
  report["laws_ok"] = laws_ok;
  out << "batch/parallel per-step wall clock: " << std::setprecision(2) << report["batch_over_parallel_per_step"].get<double>()
      << "x (reference 2.5x)\n";
  for (auto& a : report["analytic"])
    out << "T=" << a["audio_steps"] << " flattened=" << a["flattened"] << " delayed=" << a["delayed"]
        << " ratio=" << std::setprecision(3) << a["ratio"].get<double>() << "\n";
  if (!o.json_out.empty()) binio::write_file(o.json_out, report.dump(2) + "\n");
  if (!laws_ok) fail("bench: step-count laws violated (see report)");
  return report;
}

// ----------------------------------------------------------------- inspect

inline std::string cmd_inspect(const std::string& path) { return inspect_bytes(binio::read_file(path)); }

}  // namespace omni::cli
