#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <sys/wait.h>

#include <json.hpp>

#include "omni/binio.hpp"
#include "omni/checkpoint.hpp"
#include "omni/corpus.hpp"
#include "omni/token_grid.hpp"
#include "support.hpp"

using omni::testing::ScratchDir;

namespace {

struct CmdResult {
  int status = -1;
  std::string output;  // stdout and stderr
};

CmdResult run(const std::string& args) {
  const std::string cmd = std::string(OMNI_CLI_PATH) + " " + args + " 2>&1";
  CmdResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
  const int st = pclose(pipe);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

std::string smoke_config() { return std::string(OMNI_SOURCE_DIR) + "/configs/smoke.conf"; }

bool contains(const std::string& hay, const std::string& needle) { return hay.find(needle) != std::string::npos; }

// One trained smoke run shared by the tests below.
class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new ScratchDir("cli");
    corpus_ = dir_->file("corpus.jsonl");
    run_dir_ = dir_->file("run");
    gen_ = run("gen-data --config " + smoke_config() + " --out " + corpus_);
    train_ = run("train --config " + smoke_config() + " --corpus " + corpus_ + " --out-dir " + run_dir_);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static ScratchDir* dir_;
  static std::string corpus_, run_dir_;
  static CmdResult gen_, train_;
};

ScratchDir* CliPipeline::dir_ = nullptr;
std::string CliPipeline::corpus_;
std::string CliPipeline::run_dir_;
CmdResult CliPipeline::gen_;
CmdResult CliPipeline::train_;

}  // namespace

TEST_F(CliPipeline, GenDataWritesConfiguredCount) {
  ASSERT_EQ(gen_.status, 0) << gen_.output;
  EXPECT_EQ(omni::load_corpus(corpus_).size(), 40u);
  auto again = dir_->file("again.jsonl");
  ASSERT_EQ(run("gen-data --config " + smoke_config() + " --out " + again).status, 0);
  EXPECT_EQ(omni::binio::read_file(again), omni::binio::read_file(corpus_));
}

TEST_F(CliPipeline, TrainWritesStageCheckpointsAndMetrics) {
  ASSERT_EQ(train_.status, 0) << train_.output;
  for (int s = 1; s <= 3; ++s) {
    auto ck = omni::load_checkpoint(run_dir_ + "/stage" + std::to_string(s) + ".omnp");
    EXPECT_EQ(ck.meta.get("stage"), std::to_string(s));
  }
  auto m = nlohmann::json::parse(omni::binio::read_file(run_dir_ + "/metrics.json"));
  ASSERT_EQ(m["stages"].size(), 3u);
  EXPECT_EQ(m["corpus_examples"], 40);
  EXPECT_TRUE(m["initial"].contains("TEXT_QA"));
  for (auto& st : m["stages"]) {
    EXPECT_TRUE(st.contains("epochs"));
    EXPECT_TRUE(st.contains("per_task"));
    EXPECT_TRUE(st.contains("trainable_groups"));
    EXPECT_GT(st["steps"].get<long>(), 0);
  }
  EXPECT_EQ(m["stages"][0]["trainable_groups"], nlohmann::json({"input_adapter", "output_extension"}));
  EXPECT_EQ(m["stages"][0]["tasks"], nlohmann::json({"ASR", "TTS"}));
}

TEST_F(CliPipeline, SingleStageResumesFromPriorCheckpoint) {
  ASSERT_EQ(train_.status, 0) << train_.output;
  auto out = dir_->file("resume");
  auto r = run("train --config " + smoke_config() + " --corpus " + corpus_ + " --stage 3 --from " + run_dir_ +
               "/stage2.omnp --out-dir " + out);
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_EQ(omni::binio::read_file(out + "/stage3.omnp"), omni::binio::read_file(run_dir_ + "/stage3.omnp"));
}

TEST_F(CliPipeline, MissingPriorCheckpointIsAnError) {
  auto r = run("train --config " + smoke_config() + " --corpus " + corpus_ + " --stage 2 --out-dir " + dir_->file("empty"));
  EXPECT_EQ(r.status, 1);
  EXPECT_TRUE(contains(r.output, "error: stage 2 needs the stage-1 checkpoint")) << r.output;
  r = run("train --config " + smoke_config() + " --corpus " + corpus_ + " --stage 3 --from " + run_dir_ + "/stage1.omnp --out-dir " +
          dir_->file("wrong"));
  EXPECT_EQ(r.status, 1);
  EXPECT_TRUE(contains(r.output, "expected stage 2")) << r.output;
}

TEST_F(CliPipeline, DecodeStreamsAndWritesArtifacts) {
  ASSERT_EQ(train_.status, 0) << train_.output;
  auto prefix = dir_->file("d");
  auto r = run("decode --config " + smoke_config() + " -c " + run_dir_ + "/stage3.omnp --task AUDIO_QA_FULL -p \"3 + 4\" --greedy --out-prefix " +
               prefix);
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_TRUE(contains(r.output, "step 0 ")) << r.output;
  EXPECT_TRUE(contains(r.output, " done\n")) << r.output;
  EXPECT_TRUE(contains(r.output, "answer: ")) << r.output;
  auto grid = omni::load_grid(prefix + ".omng");
  EXPECT_EQ(grid.n_layers(), 8);
  auto meta = nlohmann::json::parse(omni::binio::read_file(prefix + ".meta.json"));
  EXPECT_EQ(meta["task"], "AUDIO_QA_FULL");
  EXPECT_EQ(meta["first_text_step"], 0);
  EXPECT_TRUE(std::filesystem::exists(prefix + ".signal.txt"));
  auto insp = run("inspect " + prefix + ".omng");
  EXPECT_EQ(insp.status, 0);
  EXPECT_TRUE(contains(insp.output, "n_layers=8")) << insp.output;
}

TEST_F(CliPipeline, MaxStepsOneTruncates) {
  ASSERT_EQ(train_.status, 0) << train_.output;
  auto prefix = dir_->file("t");
  auto r = run("decode --config " + smoke_config() + " -c " + run_dir_ + "/stage3.omnp --task AUDIO_QA_FULL -p \"1 + 1\" --max-steps 1 --out-prefix " +
               prefix);
  ASSERT_EQ(r.status, 0) << r.output;
  auto meta = nlohmann::json::parse(omni::binio::read_file(prefix + ".meta.json"));
  EXPECT_EQ(meta["truncated"], true);
  EXPECT_EQ(meta["total_steps"], 1);
}

TEST_F(CliPipeline, BenchQuickSuiteHoldsTheLaws) {
  ASSERT_EQ(train_.status, 0) << train_.output;
  auto json = dir_->file("bench.json");
  auto r = run("bench --config " + smoke_config() + " -c " + run_dir_ + "/stage3.omnp --suite quick --json " + json);
  ASSERT_EQ(r.status, 0) << r.output;
  auto rep = nlohmann::json::parse(omni::binio::read_file(json));
  EXPECT_EQ(rep["laws_ok"], true);
  EXPECT_EQ(rep["runs"].size(), 4u);
  EXPECT_EQ(rep["analytic"][3]["flattened"], 7 * 256 + 4);
}

TEST_F(CliPipeline, InspectCheckpointAndCorpus) {
  ASSERT_EQ(train_.status, 0) << train_.output;
  auto r = run("inspect " + run_dir_ + "/stage1.omnp");
  ASSERT_EQ(r.status, 0) << r.output;
  for (auto g : {"embeddings", "input_adapter", "trunk", "output_extension", "heads"}) EXPECT_TRUE(contains(r.output, g));
  r = run("inspect " + corpus_);
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_TRUE(contains(r.output, "examples=40")) << r.output;
}

TEST(Cli, ErrorsArePrefixedAndNonZero) {
  ScratchDir dir("clierr");
  auto junk = dir.file("junk.bin");
  omni::binio::write_file(junk, std::string("\x01\x02zz", 4));
  auto r = run("inspect " + junk);
  EXPECT_EQ(r.status, 1);
  EXPECT_TRUE(contains(r.output, "error: unknown file magic")) << r.output;
  r = run("inspect " + dir.file("missing.omng"));
  EXPECT_EQ(r.status, 1);
  EXPECT_TRUE(contains(r.output, "error: ")) << r.output;
  r = run("decode -p \"1 + 1\"");
  EXPECT_EQ(r.status, 2);
  EXPECT_TRUE(contains(r.output, "error: ")) << r.output;
  r = run("frobnicate");
  EXPECT_NE(r.status, 0);
  EXPECT_TRUE(contains(r.output, "error: ")) << r.output;
}
