// omni: corpus generation, staged training, streaming decode, benchmarks and
// file inspection for the desk-scale speech-text model.
#include <iostream>

#include <CLI11.hpp>

#include "omni/cli.hpp"

int main(int argc, char** argv) {
  using namespace omni;
  CLI::App app{"omni - desk-scale parallel text/audio language model"};
  app.require_subcommand(1);

  cli::GenDataOptions gen;
  auto* c_gen = app.add_subcommand("gen-data", "write a synthetic JSONL corpus covering all five tasks");
  c_gen->add_option("--config", gen.config, "run config file (key=value)");
  c_gen->add_option("--out,-o", gen.out, "output corpus path")->capture_default_str();
  c_gen->add_option("--count,-n", gen.count, "number of examples (default: data.count)");
  c_gen->add_option("--seed", gen.seed, "corpus seed (default: data.seed)");

  cli::TrainOptions train;
  auto* c_train = app.add_subcommand("train", "run training stages and write one checkpoint per stage");
  c_train->add_option("--config", train.config, "run config file (key=value)");
  c_train->add_option("--corpus", train.corpus, "JSONL corpus")->capture_default_str();
  c_train->add_option("--stage", train.stage, "1, 2, 3 or all")->capture_default_str();
  c_train->add_option("--out-dir", train.out_dir, "directory for stageN.omnp and metrics.json")->capture_default_str();
  c_train->add_option("--from", train.from, "prior-stage checkpoint (default: <out-dir>/stage<N-1>.omnp)");
  c_train->add_option("--metrics", train.metrics, "metrics JSON path (default: <out-dir>/metrics.json)");
  c_train->add_option("--seed", train.seed, "run seed (initialisation and shuffling)");

  cli::DecodeOptions dec;
  auto* c_dec = app.add_subcommand("decode", "stream a response for one prompt");
  c_dec->add_option("--config", dec.config, "run config file (key=value)");
  c_dec->add_option("--checkpoint,-c", dec.checkpoint, "checkpoint (.omnp)")->required();
  c_dec->add_option("--prompt,-p", dec.prompt, "prompt text, e.g. \"3 + 4\" or \"echo w1 w2\"")->required();
  c_dec->add_option("--task", dec.task, "TEXT_QA (default), AUDIO_QA_FULL, AUDIO_QA_TEXT_OUT, ASR or TTS");
  c_dec->add_option("--mode", dec.mode, "parallel or batch")->capture_default_str();
  auto* greedy = c_dec->add_flag("--greedy", dec.greedy, "argmax sampling (default)");
  c_dec->add_option("--top-k", dec.top_k, "sample from the k most likely tokens")->excludes(greedy);
  c_dec->add_option("--temp", dec.temperature, "top-k temperature");
  c_dec->add_option("--text-advance", dec.text_advance, "extra audio delay N (default: value used in training)");
  c_dec->add_option("--max-steps", dec.max_steps, "decode step budget");
  c_dec->add_option("--seed", dec.seed, "sampling seed");
  c_dec->add_option("--out-prefix", dec.out_prefix, "prefix for .omng, .signal.txt and .meta.json")->capture_default_str();

  cli::BenchOptions bench;
  auto* c_bench = app.add_subcommand("bench", "latency and step-count report for both decode modes");
  c_bench->add_option("--config", bench.config, "run config file (key=value)");
  c_bench->add_option("--checkpoint,-c", bench.checkpoint, "checkpoint (.omnp)")->required();
  c_bench->add_option("--suite", bench.suite, "standard or quick")->capture_default_str();
  c_bench->add_option("--json", bench.json_out, "write the JSON report here");
  c_bench->add_option("--seed", bench.seed, "prompt seed");

  std::string inspect_path;
  auto* c_inspect = app.add_subcommand("inspect", "dump a grid file, checkpoint or corpus");
  c_inspect->add_option("path", inspect_path, "file to inspect")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*c_gen) cli::cmd_gen_data(gen, std::cout);
    if (*c_train) cli::cmd_train(train, std::cout);
    if (*c_dec) cli::cmd_decode(dec, std::cout);
    if (*c_bench) cli::cmd_bench(bench, std::cout);
    if (*c_inspect) std::cout << cli::cmd_inspect(inspect_path);
  } catch (const std::exception& e) {
    std::cout.flush();
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
