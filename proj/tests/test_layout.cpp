#include <gtest/gtest.h>

#include <random>

#include "omni/grammar.hpp"
#include "omni/layout.hpp"

using namespace omni;

namespace {

const VocabSpec kVocab = build_vocab(32, 8);

TrainingExample text_qa(std::vector<TokenId> in, std::vector<TokenId> out) {
  TrainingExample ex;
  ex.task = TaskKind::TextQa;
  ex.text_in = std::move(in);
  ex.text_out = std::move(out);
  return ex;
}

}  // namespace

TEST(Layout, TextQaFixture) {
  auto l = build_layout(text_qa({5, 6}, {7}), kVocab, DelayPattern::standard(), 0);
  const TokenId pad = kVocab.pad();
  const std::vector<TokenId> row0{kVocab.special(Special::Bos), 5, 6, kVocab.special(Special::AnswerText)};
  ASSERT_EQ(l.input_len(), 4);
  for (int t = 0; t < 4; ++t) EXPECT_EQ(l.input_ids.at(0, t), row0[t]);
  for (int layer = 1; layer < kSeqLayers; ++layer)
    for (int t = 0; t < 4; ++t) EXPECT_EQ(l.input_ids.at(layer, t), pad);
  EXPECT_EQ(l.answer_positions[0], 3);
  for (int layer = 1; layer < kSeqLayers; ++layer) EXPECT_EQ(l.answer_positions[layer], -1);
  // undelayed width 2 + stagger 7
  ASSERT_EQ(l.target_ids.n_steps(), 9);
  EXPECT_EQ(l.target_ids.at(0, 0), 7u);
  EXPECT_EQ(l.target_ids.at(0, 1), kVocab.special(Special::EosText));
  EXPECT_TRUE(l.loss_mask.at(0, 0));
  EXPECT_TRUE(l.loss_mask.at(0, 1));
  EXPECT_EQ(l.loss_mask.count(0), 2);
  for (int layer = 1; layer < kSeqLayers; ++layer) EXPECT_EQ(l.loss_mask.count(layer), 0);
  EXPECT_TRUE(validate_layout(l, kVocab).empty());
}

TEST(Layout, AudioQaFullHasBothMarkersAndAllLayersMasked) {
  std::mt19937_64 rng(5);
  grammar::GrammarSpec g;
  auto ex = grammar::make_example(TaskKind::AudioQaFull, rng, g);
  auto l = build_layout(ex, kVocab, DelayPattern::standard(), 0);
  const int last = l.input_len() - 1;
  EXPECT_EQ(l.input_ids.at(0, last), kVocab.special(Special::AnswerText));
  for (int layer = 1; layer < kSeqLayers; ++layer) {
    EXPECT_EQ(l.input_ids.at(layer, last), kVocab.special(Special::AnswerAudio));
    EXPECT_EQ(l.loss_mask.count(layer), static_cast<int>(ex.signal_out.size()) + 1);
  }
  EXPECT_EQ(l.loss_mask.count(0), static_cast<int>(ex.text_out.size()) + 1);
  EXPECT_TRUE(validate_layout(l, kVocab).empty());
}

TEST(Layout, MissingOrForbiddenPayloadIsAnError) {
  TrainingExample asr;
  asr.task = TaskKind::Asr;
  asr.text_out = {13};
  EXPECT_THROW(build_layout(asr, kVocab, DelayPattern::standard(), 0), Error);
  auto tq = text_qa({5}, {7});
  tq.signal_in = {1, 2};
  EXPECT_THROW(build_layout(tq, kVocab, DelayPattern::standard(), 0), Error);
  auto missing_out = text_qa({5}, {});
  EXPECT_THROW(build_layout(missing_out, kVocab, DelayPattern::standard(), 0), Error);
  EXPECT_NO_THROW(build_prompt_layout(missing_out, kVocab, DelayPattern::standard(), 0));
}

TEST(Layout, GeneratorValidatorAgreementPerTask) {
  grammar::GrammarSpec g;
  std::mt19937_64 rng(77);
  const std::vector<DelayPattern> patterns{DelayPattern::standard(), DelayPattern::none()};
  for (auto task : kAllTasks) {
    for (int i = 0; i < 1000; ++i) {
      auto ex = grammar::make_example(task, rng, g);
      const int n = static_cast<int>(rng() % 4);
      auto l = build_layout(ex, kVocab, patterns[i % 2], n);
      auto v = validate_layout(l, kVocab);
      ASSERT_TRUE(v.empty()) << task_name(task) << " #" << i << ": " << v.front().rule;
      // mask conservation
      const auto tr = traits(task);
      ASSERT_EQ(l.loss_mask.count(0), tr.text_out ? static_cast<int>(ex.text_out.size()) + 1 : 0);
      for (int layer = 1; layer < kSeqLayers; ++layer)
        ASSERT_EQ(l.loss_mask.count(layer), tr.audio_out ? static_cast<int>(ex.signal_out.size()) + 1 : 0);
      // delay consistency
      auto [undelayed, mask] = undelayed_targets(ex, kVocab);
      ASSERT_EQ(revert_delay(l.target_ids, l.pattern, kVocab.pad()), undelayed);
    }
  }
}

TEST(Layout, ValidatorFlagsAudioIdOnTextLayer) {
  auto l = build_layout(text_qa({5, 6}, {7}), kVocab, DelayPattern::standard(), 0);
  l.input_ids.at(0, 1) = kVocab.audio_id(2, 3);
  auto v = validate_layout(l, kVocab);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].layer, 0);
  EXPECT_EQ(v[0].step, 1);
}

TEST(Layout, ValidatorFlagsMaskOnStructuralPad) {
  auto l = build_layout(text_qa({5, 6}, {7}), kVocab, DelayPattern::standard(), 0);
  l.loss_mask.set(0, 5, true);  // text payload is 2 wide; step 5 is structural
  auto v = validate_layout(l, kVocab);
  // the cell is structural, and its PAD target is not something a head emits
  ASSERT_EQ(v.size(), 2u);
  EXPECT_EQ(v[0].layer, 0);
  EXPECT_EQ(v[0].step, 5);
  EXPECT_EQ(v[0].rule, "loss mask on structural pad");
  EXPECT_EQ(v[1].rule, "masked target not a legal head output");
}

TEST(Layout, FeaturesAlignWithAudioColumns) {
  std::mt19937_64 rng(9);
  grammar::GrammarSpec g;
  auto ex = grammar::make_example(TaskKind::Asr, rng, g);
  auto l = build_layout(ex, kVocab, DelayPattern::standard(), 0);
  ASSERT_EQ(static_cast<int>(l.features.size()), l.input_len());
  int featured = 0;
  codec::CodecConfig c{8};
  for (int t = 0; t < l.input_len(); ++t) {
    if (l.features[t].empty()) continue;
    ++featured;
    ASSERT_EQ(static_cast<int>(l.features[t].size()), kFeatureDim);
    // the frame's digit entries match the audio tokens at the same position
    for (int layer = 1; layer < kSeqLayers; ++layer) {
      const auto local = kVocab.classify(l.input_ids.at(layer, t)).local;
      EXPECT_FLOAT_EQ(l.features[t][layer], static_cast<float>(local) / 8.0f);
    }
  }
  EXPECT_EQ(featured, static_cast<int>(ex.signal_in.size()));
}

TEST(Layout, TextOnlyVariantDropsAudioOutputs) {
  std::mt19937_64 rng(6);
  grammar::GrammarSpec g;
  auto l = build_layout(grammar::make_example(TaskKind::AudioQaFull, rng, g), kVocab, DelayPattern::standard(), 0);
  auto b = text_only_variant(l, kVocab);
  EXPECT_EQ(b.task, TaskKind::AudioQaTextOut);
  EXPECT_TRUE(b.output_layers[0]);
  for (int layer = 1; layer < kSeqLayers; ++layer) {
    EXPECT_FALSE(b.output_layers[layer]);
    EXPECT_EQ(b.loss_mask.count(layer), 0);
    for (int t = 0; t < b.input_len(); ++t) EXPECT_NE(b.input_ids.at(layer, t), kVocab.special(Special::AnswerAudio));
  }
  EXPECT_EQ(b.input_len(), l.input_len());
  EXPECT_TRUE(validate_layout(b, kVocab).empty());
}

TEST(Layout, TextAdvanceShiftsAudioTargets) {
  std::mt19937_64 rng(8);
  grammar::GrammarSpec g;
  auto ex = grammar::make_example(TaskKind::Tts, rng, g);
  auto l0 = build_layout(ex, kVocab, DelayPattern::standard(), 0);
  auto l3 = build_layout(ex, kVocab, DelayPattern::standard(), 3);
  EXPECT_EQ(l3.target_ids.n_steps(), l0.target_ids.n_steps() + 3);
  for (int layer = 1; layer < kSeqLayers; ++layer)
    for (int t = 0; t < l0.target_ids.n_steps(); ++t) EXPECT_EQ(l3.target_ids.at(layer, t + 3), l0.target_ids.at(layer, t));
}

TEST(Grammar, SynthesisIsAFunctionOfTextForEveryFullExample) {
  grammar::GrammarSpec g;
  auto corpus = grammar::gen_data(g, kVocab, 2000, 17);
  int full = 0;
  for (auto& ex : corpus) {
    if (ex.task != TaskKind::AudioQaFull) continue;
    ++full;
    auto grid = codec::encode_signal(ex.signal_out, codec::CodecConfig{8});
    ASSERT_EQ(codec::decode_grid(grid, codec::CodecConfig{8}), grammar::synthesize(ex.text_out, g));
    ASSERT_EQ(ex.text_out, grammar::answer(grammar::transcribe(ex.signal_in, g)));
  }
  EXPECT_EQ(full, 400);
}

TEST(Grammar, AnswersAndParsing) {
  grammar::GrammarSpec g;
  EXPECT_EQ(grammar::answer(grammar::parse_text("3 + 4", g)), (std::vector<TokenId>{7}));
  EXPECT_EQ(grammar::answer(grammar::parse_text("9 + 9", g)), (std::vector<TokenId>{1, 8}));
  EXPECT_EQ(grammar::answer(grammar::parse_text("7 - 2", g)), (std::vector<TokenId>{5}));
  EXPECT_EQ(grammar::render(grammar::answer(grammar::parse_text("echo w1 w5", g))), "w1 w5");
  EXPECT_THROW(grammar::answer(grammar::parse_text("2 - 7", g)), Error);
  EXPECT_THROW(grammar::parse_text("banana", g), Error);
  EXPECT_THROW(grammar::parse_text("w40", g), Error);
}

TEST(Grammar, GenDataIsDeterministicAndRejectsZero) {
  grammar::GrammarSpec g;
  EXPECT_EQ(grammar::gen_data(g, kVocab, 50, 4), grammar::gen_data(g, kVocab, 50, 4));
  EXPECT_NE(grammar::gen_data(g, kVocab, 50, 4), grammar::gen_data(g, kVocab, 50, 5));
  EXPECT_THROW(grammar::gen_data(g, kVocab, 0, 4), Error);
  EXPECT_THROW(grammar::gen_data(g, build_vocab(31, 8), 10, 4), Error);
}
