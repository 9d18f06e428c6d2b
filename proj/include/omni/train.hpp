#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "omni/config.hpp"
#include "omni/error.hpp"
#include "omni/layout.hpp"
#include "omni/model.hpp"

namespace omni {

// Which groups learn and which tasks feed one training stage.
struct StagePlan {
  int stage = 3;
  GroupSet trainable = GroupSet::all();
  std::vector<TaskKind> tasks{kAllTasks.begin(), kAllTasks.end()};

  // 1: modality alignment, adapters only, ASR + TTS.
  // 2: adaption, adapters frozen, ASR + text QA + audio QA with text output.
  // 3: holistic fine-tuning, everything, all tasks.
  static StagePlan standard(int stage) {
    StagePlan p;
    p.stage = stage;
    switch (stage) {
      case 1:
        p.trainable = GroupSet::of({Group::InputAdapter, Group::OutputExtension});
        p.tasks = {TaskKind::Asr, TaskKind::Tts};
        break;
      case 2:
        p.trainable = GroupSet::of({Group::Trunk, Group::Embeddings, Group::Heads});
        p.tasks = {TaskKind::Asr, TaskKind::TextQa, TaskKind::AudioQaTextOut};
        break;
      case 3:
        p.trainable = GroupSet::all();
        p.tasks = {kAllTasks.begin(), kAllTasks.end()};
        break;
      default:
        fail("stage must be 1, 2 or 3");
    }
    return p;
  }

  bool accepts(TaskKind k) const { return std::find(tasks.begin(), tasks.end(), k) != tasks.end(); }
};

enum class Optimizer : std::uint8_t { Sgd = 0, Adam = 1 };

struct TrainSchedule {
  int epochs = 1;
  int batch_size = 16;
  double lr_max = 3e-3;
  double lr_min = 3e-5;
  Optimizer optimizer = Optimizer::Adam;
  double momentum = 0.9;  // SGD
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables
  int shards = 4;          // fixed gradient partition; results do not depend on `threads`
  int threads = 1;
  std::uint64_t seed = 1;

  // Cosine annealing from lr_max at step 0 to lr_min at the last step.
  double lr_at(long step, long total) const {
    if (total <= 1) return lr_max;
    const double frac = static_cast<double>(step) / static_cast<double>(total - 1);
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
  }

  void validate() const {
    require(epochs >= 0, "train epochs must be >= 0");
    require(batch_size >= 1, "batch size must be >= 1");
    require(lr_max >= lr_min && lr_min >= 0, "need lr_max >= lr_min >= 0");
    require(shards >= 1 && threads >= 1, "shards and threads must be >= 1");
  }
};

struct EpochMetrics {
  int epoch = 0;
  double loss = 0;
  double token_accuracy = 0;
  double lr_end = 0;
};

struct StageMetrics {
  int stage = 0;
  int examples = 0;
  long steps = 0;
  std::vector<EpochMetrics> epochs;
};

struct EvalMetrics {
  double loss = 0;  // mean of per-example losses
  double token_accuracy = 0;
  int examples = 0;
};

namespace detail {

// Sums shard gradients in shard order; shards are evaluated on up to
// `threads` workers but the reduction order is fixed.
inline void accumulate_batch(const Parameters<float>& p, const std::vector<const InputLayout*>& batch, const GroupSet& trainable,
                             std::vector<Parameters<float>>& shard_grads, Parameters<float>& grad, int threads,
                             double& loss_sum, long& cells, long& correct) {
  const int shards = static_cast<int>(shard_grads.size());
  std::vector<double> s_loss(shards, 0);
  std::vector<long> s_cells(shards, 0), s_correct(shards, 0);
  const float scale = 1.0f / static_cast<float>(batch.size());
  auto run_shard = [&](int s) {
    auto& g = shard_grads[s];
    g.zero();
    const std::size_t lo = batch.size() * s / shards, hi = batch.size() * (s + 1) / shards;
    for (std::size_t i = lo; i < hi; ++i) {
      auto st = loss_and_grad(p, *batch[i], trainable, &g, scale);
      s_loss[s] += st.loss;
      s_cells[s] += st.cells;
      s_correct[s] += st.correct;
    }
  };
  if (threads <= 1) {
    for (int s = 0; s < shards; ++s) run_shard(s);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < std::min(threads, shards); ++w) {
      pool.emplace_back([&, w] {
        for (int s = w; s < shards; s += threads) run_shard(s);
      });
    }
    for (auto& t : pool) t.join();
  }
  grad.zero();
  for (int s = 0; s < shards; ++s) {
    for (std::size_t t = 0; t < grad.tensors().size(); ++t) {
      if (!trainable.has(grad[static_cast<int>(t)].group)) continue;
      auto& dst = grad[static_cast<int>(t)].data;
      const auto& src = shard_grads[s][static_cast<int>(t)].data;
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
    loss_sum += s_loss[s];
    cells += s_cells[s];
    correct += s_correct[s];
  }
}

}  // namespace detail

class Trainer {
 public:
  Trainer(Parameters<float>& params, const TrainSchedule& sched) : p_(params), sched_(sched) { sched.validate(); }

  // Runs one stage over pre-built layouts. Tensors outside plan.trainable are
  // never written.
  StageMetrics run(const StagePlan& plan, const std::vector<InputLayout>& layouts,
                   const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
    std::vector<const InputLayout*> pool;
    for (auto& l : layouts)
      if (plan.accepts(l.task)) pool.push_back(&l);
    require(!pool.empty(), "stage " + std::to_string(plan.stage) + ": corpus is empty after the task filter");
    require(plan.trainable.any(), "stage has no trainable groups");

    StageMetrics m;
    m.stage = plan.stage;
    m.examples = static_cast<int>(pool.size());
    const long per_epoch = static_cast<long>((pool.size() + sched_.batch_size - 1) / sched_.batch_size);
    const long total = per_epoch * sched_.epochs;

    Parameters<float> grad(p_.config());
    std::vector<Parameters<float>> shard_grads(sched_.shards, Parameters<float>(p_.config()));
    Parameters<float> m1(p_.config()), m2(p_.config());  // optimizer state, fresh per stage
    std::mt19937_64 rng(sched_.seed * 1000003ULL + static_cast<std::uint64_t>(plan.stage));

    long step = 0;
    for (int e = 0; e < sched_.epochs; ++e) {
      std::shuffle(pool.begin(), pool.end(), rng);
      double loss_sum = 0;
      long cells = 0, correct = 0;
      double lr = sched_.lr_max;
      for (std::size_t b = 0; b < pool.size(); b += sched_.batch_size) {
        std::vector<const InputLayout*> batch(pool.begin() + b, pool.begin() + std::min(pool.size(), b + sched_.batch_size));
        detail::accumulate_batch(p_, batch, plan.trainable, shard_grads, grad, sched_.threads, loss_sum, cells, correct);
        lr = sched_.lr_at(step, total);
        apply_update(plan.trainable, grad, m1, m2, lr, step + 1);
        ++step;
      }
      EpochMetrics em{e + 1, loss_sum / static_cast<double>(pool.size()),
                      cells ? static_cast<double>(correct) / static_cast<double>(cells) : 0.0, lr};
      m.epochs.push_back(em);
      if (on_epoch) on_epoch(em);
    }
    m.steps = step;
    return m;
  }

 private:
  void apply_update(const GroupSet& trainable, Parameters<float>& grad, Parameters<float>& m1, Parameters<float>& m2,
                    double lr, long t) {
    double scale = 1.0;
    if (sched_.clip_norm > 0) {
      double sq = 0;
      for (auto& g : grad.tensors())
        if (trainable.has(g.group))
          for (float x : g.data) sq += static_cast<double>(x) * x;
      const double norm = std::sqrt(sq);
      if (norm > sched_.clip_norm) scale = sched_.clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(sched_.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(sched_.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < p_.tensors().size(); ++i) {
      auto& w = p_[static_cast<int>(i)];
      if (!trainable.has(w.group)) continue;
      auto& g = grad[static_cast<int>(i)].data;
      auto& a = m1[static_cast<int>(i)].data;
      auto& v = m2[static_cast<int>(i)].data;
      for (std::size_t k = 0; k < w.data.size(); ++k) {
        const double gk = g[k] * scale;
        if (sched_.optimizer == Optimizer::Sgd) {
          a[k] = static_cast<float>(sched_.momentum * a[k] + gk);
          w.data[k] -= static_cast<float>(lr * a[k]);
        } else {
          a[k] = static_cast<float>(sched_.beta1 * a[k] + (1 - sched_.beta1) * gk);
          v[k] = static_cast<float>(sched_.beta2 * v[k] + (1 - sched_.beta2) * gk * gk);
          const double mh = a[k] / bc1, vh = v[k] / bc2;
          w.data[k] -= static_cast<float>(lr * mh / (std::sqrt(vh) + sched_.adam_eps));
        }
      }
    }
  }

  Parameters<float>& p_;
  TrainSchedule sched_;
};

inline std::vector<InputLayout> build_layouts(const Corpus& corpus, const VocabSpec& vocab, const DelayPattern& pattern,
                                              int text_advance) {
  std::vector<InputLayout> out;
  out.reserve(corpus.size());
  for (auto& ex : corpus) out.push_back(build_layout(ex, vocab, pattern, text_advance));
  return out;
}

inline StageMetrics train_stage(Parameters<float>& params, const StagePlan& plan, const Corpus& corpus, const TrainSchedule& sched,
                                int text_advance = 0, const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  auto layouts = build_layouts(corpus, params.config().vocab, params.config().pattern, text_advance);
  return Trainer(params, sched).run(plan, layouts, on_epoch);
}

// Teacher-forced loss and token accuracy, no gradients.
template <class T>
EvalMetrics evaluate(const Parameters<T>& p, const std::vector<InputLayout>& layouts, std::function<bool(const InputLayout&)> filter = {}) {
  EvalMetrics m;
  long cells = 0, correct = 0;
  for (auto& l : layouts) {
    if (filter && !filter(l)) continue;
    auto st = loss_and_grad(p, l, GroupSet::none(), nullptr, T(1));
    m.loss += st.loss;
    cells += st.cells;
    correct += st.correct;
    ++m.examples;
  }
  if (m.examples) m.loss /= m.examples;
  m.token_accuracy = cells ? static_cast<double>(correct) / static_cast<double>(cells) : 0.0;
  return m;
}

}  // namespace omni
