#include <gtest/gtest.h>

#include "omni/grammar.hpp"
#include "omni/train.hpp"
#include "support.hpp"

using namespace omni;
using omni::testing::tiny_config;

namespace {

Corpus small_corpus(int n, std::uint64_t seed = 3) {
  return grammar::gen_data(grammar::GrammarSpec{}, build_vocab(32, 8), n, seed);
}

TrainSchedule quick_schedule(int epochs) {
  TrainSchedule s;
  s.epochs = epochs;
  s.batch_size = 8;
  return s;
}

bool same_params(const Parameters<float>& a, const Parameters<float>& b) {
  for (std::size_t i = 0; i < a.tensors().size(); ++i)
    if (a.tensors()[i].data != b.tensors()[i].data) return false;
  return true;
}

// Per group: true when every element is bit-identical before and after.
std::array<bool, kNumGroups> unchanged_groups(const Parameters<float>& before, const Parameters<float>& after) {
  std::array<bool, kNumGroups> same;
  same.fill(true);
  for (std::size_t i = 0; i < before.tensors().size(); ++i)
    if (before.tensors()[i].data != after.tensors()[i].data) same[static_cast<int>(before.tensors()[i].group)] = false;
  return same;
}

}  // namespace

TEST(StagePlan, StandardStagesSelectGroupsAndTasks) {
  auto s1 = StagePlan::standard(1);
  EXPECT_EQ(s1.trainable, GroupSet::of({Group::InputAdapter, Group::OutputExtension}));
  EXPECT_TRUE(s1.accepts(TaskKind::Asr));
  EXPECT_TRUE(s1.accepts(TaskKind::Tts));
  EXPECT_FALSE(s1.accepts(TaskKind::TextQa));
  auto s2 = StagePlan::standard(2);
  EXPECT_FALSE(s2.trainable.has(Group::InputAdapter));
  EXPECT_FALSE(s2.trainable.has(Group::OutputExtension));
  EXPECT_TRUE(s2.accepts(TaskKind::AudioQaTextOut));
  EXPECT_FALSE(s2.accepts(TaskKind::AudioQaFull));
  EXPECT_EQ(StagePlan::standard(3).trainable, GroupSet::all());
  EXPECT_THROW(StagePlan::standard(4), Error);
}

TEST(Freezing, StageOneAndTwoLeaveFrozenGroupsBitIdentical) {
  auto p = Parameters<float>::init(tiny_config(11));
  auto corpus = small_corpus(40);
  for (int stage : {1, 2}) {
    const auto plan = StagePlan::standard(stage);
    auto before = p;
    train_stage(p, plan, corpus, quick_schedule(1));
    auto same = unchanged_groups(before, p);
    for (int g = 0; g < kNumGroups; ++g)
      EXPECT_EQ(same[g], !plan.trainable.has(static_cast<Group>(g))) << "stage " << stage << " group " << kGroupNames[g];
  }
}

TEST(Training, DeterministicAcrossRunsAndThreadCounts) {
  auto corpus = small_corpus(30);
  auto run = [&](int threads) {
    auto p = Parameters<float>::init(tiny_config(5));
    auto sched = quick_schedule(2);
    sched.threads = threads;
    train_stage(p, StagePlan::standard(3), corpus, sched);
    return p;
  };
  auto a = run(1), b = run(1), c = run(3);
  EXPECT_TRUE(same_params(a, b));
  EXPECT_TRUE(same_params(a, c));
}

TEST(Training, SgdWithMomentumAlsoDeterministicAndDecreasesLoss) {
  auto corpus = small_corpus(20);
  auto sched = quick_schedule(6);
  sched.optimizer = Optimizer::Sgd;
  sched.lr_max = 0.3;
  sched.lr_min = 0.03;
  auto p = Parameters<float>::init(tiny_config(5));
  auto q = p;
  auto layouts = build_layouts(corpus, p.config().vocab, p.config().pattern, 0);
  const double before = evaluate(p, layouts).loss;
  train_stage(p, StagePlan::standard(3), corpus, sched);
  train_stage(q, StagePlan::standard(3), corpus, sched);
  EXPECT_TRUE(same_params(p, q));
  EXPECT_LT(evaluate(p, layouts).loss, before);
}

TEST(Training, MemorisesFiftyExamples) {
  auto corpus = small_corpus(50, 9);
  auto cfg = tiny_config(2);
  cfg.d_model = 48;
  auto p = Parameters<float>::init(cfg);
  auto layouts = build_layouts(corpus, cfg.vocab, cfg.pattern, 0);
  const double before = evaluate(p, layouts).loss;
  TrainSchedule sched;
  sched.epochs = 150;
  sched.batch_size = 10;
  sched.lr_max = 1e-2;
  sched.lr_min = 1e-4;
  Trainer(p, sched).run(StagePlan::standard(3), layouts);
  const double after = evaluate(p, layouts).loss;
  EXPECT_LE(after, 0.1 * before) << "before " << before << " after " << after;
}

TEST(Schedule, CosineEndpointsAndValidation) {
  TrainSchedule s;
  EXPECT_DOUBLE_EQ(s.lr_at(0, 100), s.lr_max);
  EXPECT_NEAR(s.lr_at(99, 100), s.lr_min, 1e-12);
  EXPECT_NEAR(s.lr_at(50, 101), 0.5 * (s.lr_max + s.lr_min), 1e-12);
  s.batch_size = 0;
  EXPECT_THROW(s.validate(), Error);
}

TEST(Training, EmptyCorpusAfterFilterIsAnError) {
  auto p = Parameters<float>::init(tiny_config());
  Corpus only_qa;
  for (auto& ex : small_corpus(10))
    if (ex.task == TaskKind::TextQa) only_qa.push_back(ex);
  EXPECT_THROW(train_stage(p, StagePlan::standard(1), only_qa, quick_schedule(1)), Error);
}

TEST(Evaluate, FilterRestrictsExamples) {
  auto p = Parameters<float>::init(tiny_config());
  auto layouts = build_layouts(small_corpus(10), p.config().vocab, p.config().pattern, 0);
  auto m = evaluate(p, layouts, [](const InputLayout& l) { return l.task == TaskKind::Asr; });
  EXPECT_EQ(m.examples, 2);
  EXPECT_GT(m.loss, 0);
}
