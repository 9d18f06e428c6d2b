#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "omni/grad_check.hpp"
#include "omni/grammar.hpp"
#include "omni/model.hpp"
#include "support.hpp"

using namespace omni;
using omni::testing::tiny_config;

namespace {

InputLayout sample_layout(TaskKind task, std::uint64_t seed, const VocabSpec& vocab, int n = 0) {
  std::mt19937_64 rng(seed);
  grammar::GrammarSpec g;
  return build_layout(grammar::make_example(task, rng, g), vocab, DelayPattern::standard(), n);
}

// Independent recomputation of -log softmax(z)[y] in long double.
long double nll_oracle(const float* z, int n, TokenId y) {
  long double m = -INFINITY;
  for (int i = 0; i < n; ++i)
    if (std::isfinite(z[i])) m = std::max<long double>(m, z[i]);
  long double s = 0;
  for (int i = 0; i < n; ++i)
    if (std::isfinite(z[i])) s += std::exp(static_cast<long double>(z[i]) - m);
  return std::log(s) + m - z[y];
}

}  // namespace

TEST(EmbedFuse, IdenticalEmbeddingsFuseToThatEmbedding) {
  auto cfg = tiny_config();
  auto p = Parameters<float>::init(cfg);
  const auto& ix = p.index();
  const TokenId id = cfg.vocab.pad();
  for (int l = 1; l < kSeqLayers; ++l)
    for (int k = 0; k < cfg.d_model; ++k)
      p[ix.emb[l]].data[static_cast<std::size_t>(id) * cfg.d_model + k] = p[ix.emb[0]].data[static_cast<std::size_t>(id) * cfg.d_model + k];
  std::array<TokenId, kSeqLayers> ids;
  ids.fill(id);
  auto fused = embed_fuse(p, ids, static_cast<const std::vector<float>*>(nullptr));
  for (int k = 0; k < cfg.d_model; ++k)
    EXPECT_NEAR(fused[k], p[ix.emb[0]].data[static_cast<std::size_t>(id) * cfg.d_model + k], 1e-7);
}

TEST(EmbedFuse, PermutingLookedUpVectorsLeavesMeanUnchanged) {
  auto cfg = tiny_config();
  auto p = Parameters<float>::init(cfg);
  auto q = p;
  const auto& ix = p.index();
  const auto& v = cfg.vocab;
  std::array<TokenId, kSeqLayers> ids{v.text_id(3)};
  for (int l = 1; l < kSeqLayers; ++l) ids[l] = v.audio_id(l, static_cast<TokenId>(l % 8));
  // swap the vectors looked up on layers 2 and 5 in q
  const int d = cfg.d_model;
  for (int k = 0; k < d; ++k)
    std::swap(q[ix.emb[2]].data[static_cast<std::size_t>(ids[2]) * d + k], q[ix.emb[5]].data[static_cast<std::size_t>(ids[5]) * d + k]);
  auto a = embed_fuse(p, ids, static_cast<const std::vector<float>*>(nullptr));
  auto b = embed_fuse(q, ids, static_cast<const std::vector<float>*>(nullptr));
  for (int k = 0; k < d; ++k) EXPECT_NEAR(a[k], b[k], 1e-7);
}

TEST(EmbedFuse, MatchesSummationOracleWithAndWithoutFeatures) {
  auto cfg = tiny_config(5);
  auto p = Parameters<double>::init(cfg);
  const auto& ix = p.index();
  const int d = cfg.d_model;
  const auto& v = cfg.vocab;
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::array<TokenId, kSeqLayers> ids{static_cast<TokenId>(rng() % 32)};
    for (int l = 1; l < kSeqLayers; ++l) ids[l] = v.audio_id(l, static_cast<TokenId>(rng() % 8));
    std::vector<double> want(d, 0);
    for (int l = 0; l < kSeqLayers; ++l)
      for (int k = 0; k < d; ++k) want[k] += p[ix.emb[l]].data[static_cast<std::size_t>(ids[l]) * d + k];
    auto got = embed_fuse(p, ids, static_cast<const std::vector<double>*>(nullptr));
    for (int k = 0; k < d; ++k) ASSERT_NEAR(got[k], want[k] / 8.0, 1e-6);

    // adapter path as a 9th summand: 2-layer GELU MLP recomputed here
    std::vector<double> f(cfg.feature_dim);
    for (auto& x : f) x = static_cast<double>(rng() % 1000) / 1000.0;
    std::vector<double> h(d), proj(d);
    for (int j = 0; j < d; ++j) {
      double s = p[ix.ad_b1].data[j];
      for (int i = 0; i < cfg.feature_dim; ++i) s += f[i] * p[ix.ad_w1].data[static_cast<std::size_t>(i) * d + j];
      h[j] = 0.5 * s * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (s + 0.044715 * s * s * s)));
    }
    for (int j = 0; j < d; ++j) {
      double s = p[ix.ad_b2].data[j];
      for (int i = 0; i < d; ++i) s += h[i] * p[ix.ad_w2].data[static_cast<std::size_t>(i) * d + j];
      proj[j] = s;
    }
    auto got9 = embed_fuse(p, ids, &f);
    for (int k = 0; k < d; ++k) ASSERT_NEAR(got9[k], (want[k] + proj[k]) / 9.0, 1e-6);
  }
}

TEST(EmbedFuse, RejectsIdInvalidForLayer) {
  auto cfg = tiny_config();
  auto p = Parameters<float>::init(cfg);
  std::array<TokenId, kSeqLayers> ids;
  ids.fill(cfg.vocab.pad());
  ids[3] = cfg.vocab.audio_id(4, 0);
  EXPECT_THROW(embed_fuse(p, ids, static_cast<const std::vector<float>*>(nullptr)), Error);
}

TEST(Forward, ShapeAndHeadMasking) {
  auto cfg = tiny_config();
  auto p = Parameters<float>::init(cfg);
  auto l = sample_layout(TaskKind::AudioQaFull, 3, cfg.vocab);
  auto lg = forward(p, l, l.target_ids);
  EXPECT_EQ(lg.steps, l.target_ids.n_steps());
  EXPECT_EQ(lg.vocab, static_cast<int>(cfg.vocab.total_size()));
  for (int layer = 0; layer < kSeqLayers; ++layer)
    for (int t = 0; t < lg.steps; ++t)
      for (TokenId id = 0; id < cfg.vocab.total_size(); ++id)
        ASSERT_EQ(std::isfinite(lg.at(layer, t)[id]), cfg.vocab.legal_output(layer, id)) << layer << "," << t << "," << id;
}

TEST(Forward, CausalityUnderPerturbation) {
  auto cfg = tiny_config(2);
  auto p = Parameters<float>::init(cfg);
  auto l = sample_layout(TaskKind::AudioQaFull, 4, cfg.vocab);
  auto base = forward(p, l, l.target_ids);
  for (int t = 0; t + 1 < l.target_ids.n_steps(); t += 3) {
    auto teacher = l.target_ids;
    teacher.at(0, t) = teacher.at(0, t) == 5 ? 6 : 5;
    auto pert = forward(p, l, teacher);
    bool later_changed = false;
    for (int layer = 0; layer < kSeqLayers; ++layer)
      for (int k = 0; k < base.steps; ++k)
        for (int id = 0; id < base.vocab; ++id) {
          const float a = base.at(layer, k)[id], b = pert.at(layer, k)[id];
          if (k <= t) {
            ASSERT_TRUE(a == b || (std::isinf(a) && std::isinf(b))) << "step " << k << " changed after perturbing " << t;
          } else if (std::isfinite(a) && a != b) {
            later_changed = true;
          }
        }
    EXPECT_TRUE(later_changed);
  }
}

TEST(Forward, OverlengthIsAnError) {
  auto cfg = tiny_config();
  cfg.max_seq_len = 10;
  auto p = Parameters<float>::init(cfg);
  auto l = sample_layout(TaskKind::Asr, 1, cfg.vocab);
  EXPECT_THROW(forward(p, l, l.target_ids), Error);
}

TEST(Loss, CertainPredictionsGiveZero) {
  auto v = build_vocab(4, 2);
  TokenGrid targets(kSeqLayers, 2, IdSpace::Global, v.pad());
  MaskGrid mask(kSeqLayers, 2);
  LogitGrid<float> lg(2, static_cast<int>(v.total_size()));
  targets.at(0, 0) = 1;
  targets.at(0, 1) = 3;
  mask.set(0, 0, true);
  mask.set(0, 1, true);
  lg.at(0, 0)[1] = 0.0f;
  lg.at(0, 1)[3] = 0.0f;
  EXPECT_EQ(loss(lg, targets, mask), 0.0);
}

TEST(Loss, UniformTwoWayHeadIsLn2) {
  LogitGrid<float> lg(1, 2);
  lg.at(0, 0)[0] = 0.25f;
  lg.at(0, 0)[1] = 0.25f;
  TokenGrid targets(kSeqLayers, 1, IdSpace::Global, 0);
  targets.at(0, 0) = 1;
  MaskGrid mask(kSeqLayers, 1);
  mask.set(0, 0, true);
  EXPECT_NEAR(loss(lg, targets, mask), std::log(2.0), 1e-7);
}

TEST(Loss, EmptyMaskIsAnError) {
  LogitGrid<float> lg(1, 2);
  EXPECT_THROW(loss(lg, TokenGrid(kSeqLayers, 1), MaskGrid(kSeqLayers, 1)), Error);
}

TEST(Loss, MatchesSoftmaxNllOracle) {
  auto cfg = tiny_config(9);
  auto p = Parameters<float>::init(cfg);
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto l = sample_layout(kAllTasks[s % 5], s, cfg.vocab);
    auto lg = forward(p, l, l.target_ids);
    long double sum = 0;
    int cells = 0;
    for (int layer = 0; layer < kSeqLayers; ++layer)
      for (int t = 0; t < lg.steps; ++t)
        if (l.loss_mask.at(layer, t)) {
          sum += nll_oracle(lg.at(layer, t), lg.vocab, l.target_ids.at(layer, t));
          ++cells;
        }
    const double want = static_cast<double>(sum / cells);
    EXPECT_NEAR(loss(lg, l.target_ids, l.loss_mask), want, 1e-6);
    EXPECT_NEAR(loss_and_grad(p, l, GroupSet::none(), nullptr, 1.0f).loss, want, 1e-5);
  }
}

TEST(GradCheck, TinyModelAllTasks) {
  auto cfg = tiny_config(3);
  auto p = Parameters<float>::init(cfg);
  for (auto task : kAllTasks) {
    auto r = grad_check(p, sample_layout(task, 21, cfg.vocab), 1e-4, 60, 5);
    EXPECT_LT(r.max_rel_error, 1e-4) << task_name(task) << " worst " << r.worst;
    EXPECT_EQ(r.checked, 60);
  }
}

TEST(GradCheck, EpsilonOutsideRangeIsAnError) {
  auto cfg = tiny_config();
  auto p = Parameters<float>::init(cfg);
  auto l = sample_layout(TaskKind::TextQa, 1, cfg.vocab);
  EXPECT_THROW(grad_check(p, l, 1e-7), Error);
  EXPECT_THROW(grad_check(p, l, 2e-3), Error);
}

TEST(GradCheck, FrozenGroupsGetExactlyZeroGradient) {
  auto cfg = tiny_config(4);
  auto p = Parameters<float>::init(cfg);
  auto l = sample_layout(TaskKind::AudioQaFull, 2, cfg.vocab);
  const auto trainable = GroupSet::of({Group::InputAdapter, Group::OutputExtension});
  Parameters<float> g(cfg);
  loss_and_grad(p, l, trainable, &g, 1.0f);
  double frozen_abs = 0, trained_abs = 0;
  for (auto& t : g.tensors())
    for (float x : t.data) (trainable.has(t.group) ? trained_abs : frozen_abs) += std::abs(x);
  EXPECT_EQ(frozen_abs, 0.0);
  EXPECT_GT(trained_abs, 0.0);
}

TEST(Parameters, EveryTensorHasOneGroupAndCountsAddUp) {
  auto cfg = ModelConfig{};
  Parameters<float> p(cfg);
  std::size_t sum = 0;
  for (int g = 0; g < kNumGroups; ++g) sum += p.count(static_cast<Group>(g));
  EXPECT_EQ(sum, p.count());
  EXPECT_NE(p.find("trunk.0.attn.w_qkv"), nullptr);
  EXPECT_NE(p.find("ext.1.mlp.w_down"), nullptr);
  EXPECT_EQ(p.find("trunk.0.attn.w_qkv")->group, Group::Trunk);
  EXPECT_EQ(p.find("ext.0.ln1.g")->group, Group::OutputExtension);
  EXPECT_EQ(p.find("adapter.w1")->group, Group::InputAdapter);
  EXPECT_EQ(p.find("head.3.w")->group, Group::Heads);
  EXPECT_EQ(p.find("emb.0")->group, Group::Embeddings);
}

TEST(ModelConfig, KeyValueRoundTripAndValidation) {
  ModelConfig c = tiny_config(42);
  c.pattern = DelayPattern{{0, 2, 2, 3, 4, 5, 6, 9}};
  c.fusion = Fusion::Sum;
  EXPECT_EQ(ModelConfig::from_kv(c.to_kv()), c);
  auto kv = c.to_kv();
  kv.set("model.n_heads", "5");
  EXPECT_THROW(ModelConfig::from_kv(kv), Error);
  kv = c.to_kv();
  kv.set("model.pattern", "0,1,2");
  EXPECT_THROW(ModelConfig::from_kv(kv), Error);
}

TEST(StepModel, IncrementalMatchesFullForwardBitwise) {
  auto cfg = tiny_config(6);
  auto p = Parameters<float>::init(cfg);
  StepModel<float> m(p);
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto l = sample_layout(kAllTasks[s], s + 30, cfg.vocab);
    auto full = forward(p, l, l.target_ids);
    auto sess = m.new_session();
    auto lg = m.prefill(sess, l);
    for (int k = 0; k < full.steps; ++k) {
      for (int layer = 0; layer < kSeqLayers; ++layer)
        for (int id = 0; id < full.vocab; ++id) {
          const float a = full.at(layer, k)[id], b = lg[layer][id];
          ASSERT_TRUE(a == b || (std::isinf(a) && std::isinf(b))) << "step " << k << " layer " << layer;
        }
      if (k + 1 == full.steps) break;
      std::array<TokenId, kSeqLayers> col;
      for (int layer = 0; layer < kSeqLayers; ++layer) col[layer] = l.target_ids.at(layer, k);
      StepModel<float>::Session* sp = &sess;
      lg = m.step(std::span<StepModel<float>::Session* const>(&sp, 1), std::span<const std::array<TokenId, kSeqLayers>>(&col, 1))[0];
    }
  }
}

TEST(StepModel, BatchedStepEqualsSeparateSteps) {
  auto cfg = tiny_config(7);
  auto p = Parameters<float>::init(cfg);
  StepModel<float> m(p);
  auto la = sample_layout(TaskKind::AudioQaFull, 1, cfg.vocab);
  auto lb = text_only_variant(la, cfg.vocab);
  auto a1 = m.new_session(), b1 = m.new_session(), a2 = m.new_session(), b2 = m.new_session();
  m.prefill(a1, la);
  m.prefill(b1, lb);
  m.prefill(a2, la);
  m.prefill(b2, lb);
  std::array<TokenId, kSeqLayers> col;
  for (int l = 0; l < kSeqLayers; ++l) col[l] = la.target_ids.at(l, 0);
  std::array<StepModel<float>::Session*, 2> both{&a1, &b1};
  std::array<std::array<TokenId, kSeqLayers>, 2> cols{col, col};
  auto batched = m.step(std::span<StepModel<float>::Session* const>(both), std::span<const std::array<TokenId, kSeqLayers>>(cols));
  StepModel<float>::Session* sa = &a2;
  StepModel<float>::Session* sb = &b2;
  auto ra = m.step(std::span<StepModel<float>::Session* const>(&sa, 1), std::span<const std::array<TokenId, kSeqLayers>>(&col, 1))[0];
  auto rb = m.step(std::span<StepModel<float>::Session* const>(&sb, 1), std::span<const std::array<TokenId, kSeqLayers>>(&col, 1))[0];
  EXPECT_EQ(batched[0], ra);
  EXPECT_EQ(batched[1], rb);
}
