#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "omni/config.hpp"
#include "omni/delay.hpp"
#include "omni/error.hpp"
#include "omni/kernels.hpp"
#include "omni/layout.hpp"
#include "omni/token_grid.hpp"
#include "omni/vocab.hpp"

namespace omni {

enum class Fusion : std::uint8_t { Mean = 0, Sum = 1 };

struct ModelConfig {
  int d_model = 128;
  int n_trunk_blocks = 4;
  int n_extension_blocks = 2;
  int n_heads = 4;  // attention heads
  int max_seq_len = 96;
  int feature_dim = kFeatureDim;
  int mlp_mult = 4;
  Fusion fusion = Fusion::Mean;
  std::uint64_t seed = 1;
  VocabSpec vocab = build_vocab(32, 8);
  DelayPattern pattern;

  int n_blocks() const { return n_trunk_blocks + n_extension_blocks; }
  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    require(d_model > 0 && n_heads > 0, "d_model and n_heads must be positive");
    require(d_model % n_heads == 0, "d_model must be divisible by the attention head count");
    require(n_trunk_blocks >= 0 && n_extension_blocks >= 0, "block counts must be non-negative");
    require(max_seq_len > 0, "max_seq_len must be positive");
    require(feature_dim > 0, "feature_dim must be positive");
    require(mlp_mult > 0, "mlp_mult must be positive");
    require(vocab.total_size() > 0, "model needs a vocabulary");
    pattern.validate();
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("model.d_model", std::to_string(d_model));
    kv.set("model.n_trunk_blocks", std::to_string(n_trunk_blocks));
    kv.set("model.n_extension_blocks", std::to_string(n_extension_blocks));
    kv.set("model.n_heads", std::to_string(n_heads));
    kv.set("model.max_seq_len", std::to_string(max_seq_len));
    kv.set("model.feature_dim", std::to_string(feature_dim));
    kv.set("model.mlp_mult", std::to_string(mlp_mult));
    kv.set("model.fusion", fusion == Fusion::Mean ? "mean" : "sum");
    kv.set("model.seed", std::to_string(seed));
    kv.set("model.pattern", pattern.to_string());
    kv.set("vocab.text_size", std::to_string(vocab.text_size()));
    std::string sizes;
    for (int l = 1; l <= kAudioLayers; ++l) sizes += (l > 1 ? "," : "") + std::to_string(vocab.audio_layer_size(l));
    kv.set("vocab.audio_layer_sizes", sizes);
    return kv;
  }

  static ModelConfig from_kv(const KeyValues& kv) {
    ModelConfig c;
    c.d_model = kv.number<int>("model.d_model", c.d_model);
    c.n_trunk_blocks = kv.number<int>("model.n_trunk_blocks", c.n_trunk_blocks);
    c.n_extension_blocks = kv.number<int>("model.n_extension_blocks", c.n_extension_blocks);
    c.n_heads = kv.number<int>("model.n_heads", c.n_heads);
    c.max_seq_len = kv.number<int>("model.max_seq_len", c.max_seq_len);
    c.feature_dim = kv.number<int>("model.feature_dim", c.feature_dim);
    c.mlp_mult = kv.number<int>("model.mlp_mult", c.mlp_mult);
    const auto fusion = kv.get("model.fusion", "mean");
    require(fusion == "mean" || fusion == "sum", "model.fusion must be mean or sum");
    c.fusion = fusion == "mean" ? Fusion::Mean : Fusion::Sum;
    c.seed = kv.number<std::uint64_t>("model.seed", c.seed);
    auto offs = kv.list<int>("model.pattern", {0, 1, 2, 3, 4, 5, 6, 7});
    require(offs.size() == kSeqLayers, "model.pattern needs 8 offsets");
    std::copy(offs.begin(), offs.end(), c.pattern.offsets.begin());
    auto sizes = kv.list<std::uint32_t>("vocab.audio_layer_sizes", {8, 8, 8, 8, 8, 8, 8});
    c.vocab = build_vocab(kv.number<std::uint32_t>("vocab.text_size", 32), sizes);
    c.validate();
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Freezing unit. Every tensor belongs to exactly one group.
enum class Group : std::uint8_t { Embeddings = 0, InputAdapter, Trunk, OutputExtension, Heads };
inline constexpr int kNumGroups = 5;
inline constexpr std::array<std::string_view, kNumGroups> kGroupNames = {"embeddings", "input_adapter", "trunk",
                                                                        "output_extension", "heads"};
inline std::string_view group_name(Group g) { return kGroupNames[static_cast<int>(g)]; }

struct GroupSet {
  std::array<bool, kNumGroups> on{};
  static GroupSet all() { return GroupSet{{true, true, true, true, true}}; }
  static GroupSet none() { return GroupSet{}; }
  static GroupSet of(std::initializer_list<Group> gs) {
    GroupSet s;
    for (auto g : gs) s.on[static_cast<int>(g)] = true;
    return s;
  }
  bool has(Group g) const { return on[static_cast<int>(g)]; }
  bool any() const {
    for (bool b : on)
      if (b) return true;
    return false;
  }
  friend bool operator==(const GroupSet&, const GroupSet&) = default;
};

template <class T>
struct Tensor {
  std::string name;
  Group group;
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }
};

struct BlockIndex {
  int ln1_g, ln1_b, w_qkv, w_o, b_o, ln2_g, ln2_b, w_up, b_up, w_down, b_down;
};

// Tensor positions inside Parameters::tensors plus per-head vocabularies.
struct ParamIndex {
  std::array<int, kSeqLayers> emb{};
  int pos = -1;
  int ad_w1 = -1, ad_b1 = -1, ad_w2 = -1, ad_b2 = -1;
  std::vector<BlockIndex> blocks;
  int lnf_g = -1, lnf_b = -1;
  std::array<int, kSeqLayers> head_w{}, head_b{};
  std::array<std::vector<TokenId>, kSeqLayers> head_ids;   // local index -> global id
  std::array<std::vector<int>, kSeqLayers> head_local;     // global id -> local index or -1
};

template <class T>
class Parameters {
 public:
  Parameters() = default;

  // Shapes only, all zeros.
  explicit Parameters(const ModelConfig& cfg) : config_(cfg) {
    cfg.validate();
    const int d = cfg.d_model;
    const int V = static_cast<int>(cfg.vocab.total_size());
    auto add = [&](std::string name, Group g, int r, int c) {
      tensors_.push_back(Tensor<T>{std::move(name), g, r, c, std::vector<T>(static_cast<std::size_t>(r) * c, T(0))});
      return static_cast<int>(tensors_.size()) - 1;
    };
    for (int l = 0; l < kSeqLayers; ++l) index_.emb[l] = add("emb." + std::to_string(l), Group::Embeddings, V, d);
    index_.pos = add("pos", Group::Embeddings, cfg.max_seq_len, d);
    index_.ad_w1 = add("adapter.w1", Group::InputAdapter, cfg.feature_dim, d);
    index_.ad_b1 = add("adapter.b1", Group::InputAdapter, 1, d);
    index_.ad_w2 = add("adapter.w2", Group::InputAdapter, d, d);
    index_.ad_b2 = add("adapter.b2", Group::InputAdapter, 1, d);
    const int hidden = cfg.mlp_mult * d;
    for (int b = 0; b < cfg.n_blocks(); ++b) {
      const bool trunk = b < cfg.n_trunk_blocks;
      const Group g = trunk ? Group::Trunk : Group::OutputExtension;
      const std::string p = trunk ? "trunk." + std::to_string(b) + "." : "ext." + std::to_string(b - cfg.n_trunk_blocks) + ".";
      BlockIndex bi{};
      bi.ln1_g = add(p + "ln1.g", g, 1, d);
      bi.ln1_b = add(p + "ln1.b", g, 1, d);
      bi.w_qkv = add(p + "attn.w_qkv", g, d, 3 * d);
      bi.w_o = add(p + "attn.w_o", g, d, d);
      bi.b_o = add(p + "attn.b_o", g, 1, d);
      bi.ln2_g = add(p + "ln2.g", g, 1, d);
      bi.ln2_b = add(p + "ln2.b", g, 1, d);
      bi.w_up = add(p + "mlp.w_up", g, d, hidden);
      bi.b_up = add(p + "mlp.b_up", g, 1, hidden);
      bi.w_down = add(p + "mlp.w_down", g, hidden, d);
      bi.b_down = add(p + "mlp.b_down", g, 1, d);
      index_.blocks.push_back(bi);
    }
    index_.lnf_g = add("final_ln.g", Group::Heads, 1, d);
    index_.lnf_b = add("final_ln.b", Group::Heads, 1, d);
    for (int l = 0; l < kSeqLayers; ++l) {
      index_.head_ids[l] = cfg.vocab.legal_outputs(l);
      index_.head_local[l].assign(V, -1);
      for (std::size_t i = 0; i < index_.head_ids[l].size(); ++i) index_.head_local[l][index_.head_ids[l][i]] = static_cast<int>(i);
      const int n = static_cast<int>(index_.head_ids[l].size());
      index_.head_w[l] = add("head." + std::to_string(l) + ".w", Group::Heads, d, n);
      index_.head_b[l] = add("head." + std::to_string(l) + ".b", Group::Heads, 1, n);
    }
  }

  // Seeded initialisation: N(0, 0.02) weights, residual projections scaled by
  // 1/sqrt(2 * blocks), zero biases, unit layer-norm gains.
  static Parameters init(const ModelConfig& cfg) {
    Parameters p(cfg);
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double resid = 0.02 / std::sqrt(2.0 * std::max(1, cfg.n_blocks()));
    for (auto& t : p.tensors_) {
      const auto& n = t.name;
      auto ends_with = [&](std::string_view s) { return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0; };
      if (ends_with(".g")) {
        std::fill(t.data.begin(), t.data.end(), T(1));
      } else if (t.rows == 1) {
        // biases stay zero
      } else {
        const double sd = (ends_with("w_o") || ends_with("w_down")) ? resid : 0.02;
        for (auto& x : t.data) x = static_cast<T>(sd * normal(rng));
      }
    }
    return p;
  }

  template <class U>
  Parameters<U> cast() const {
    Parameters<U> out(config_);
    for (std::size_t i = 0; i < tensors_.size(); ++i)
      for (std::size_t j = 0; j < tensors_[i].data.size(); ++j)
        out.tensors()[i].data[j] = static_cast<U>(tensors_[i].data[j]);
    return out;
  }

  const ModelConfig& config() const { return config_; }
  const ParamIndex& index() const { return index_; }
  std::vector<Tensor<T>>& tensors() { return tensors_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }
  Tensor<T>& operator[](int i) { return tensors_[i]; }
  const Tensor<T>& operator[](int i) const { return tensors_[i]; }

  const Tensor<T>* find(std::string_view name) const {
    for (auto& t : tensors_)
      if (t.name == name) return &t;
    return nullptr;
  }

  std::size_t count(Group g) const {
    std::size_t n = 0;
    for (auto& t : tensors_)
      if (t.group == g) n += t.data.size();
    return n;
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto& t : tensors_) n += t.data.size();
    return n;
  }

  void zero() {
    for (auto& t : tensors_) std::fill(t.data.begin(), t.data.end(), T(0));
  }

 private:
  ModelConfig config_;
  std::vector<Tensor<T>> tensors_;
  ParamIndex index_;
};

// Per-head logits over the full vocabulary; ids a head may not emit are -inf.
using HeadLogits = std::array<std::vector<float>, kSeqLayers>;

// Logits for a run of predicted steps: [layer][step][vocab].
template <class T>
struct LogitGrid {
  int steps = 0;
  int vocab = 0;
  std::vector<T> data;

  LogitGrid() = default;
  LogitGrid(int s, int v) : steps(s), vocab(v), data(static_cast<std::size_t>(kSeqLayers) * s * v, -std::numeric_limits<T>::infinity()) {}
  T* at(int layer, int step) { return data.data() + (static_cast<std::size_t>(layer) * steps + step) * vocab; }
  const T* at(int layer, int step) const { return data.data() + (static_cast<std::size_t>(layer) * steps + step) * vocab; }
};

template <class T>
struct KvCache {
  int d = 0;
  int capacity = 0;
  int len = 0;
  std::vector<std::vector<T>> k, v;  // per block, capacity x d

  KvCache() = default;
  KvCache(int n_blocks, int cap, int dim) : d(dim), capacity(cap), k(n_blocks), v(n_blocks) {
    for (int b = 0; b < n_blocks; ++b) {
      k[b].assign(static_cast<std::size_t>(cap) * dim, T(0));
      v[b].assign(static_cast<std::size_t>(cap) * dim, T(0));
    }
  }
};

// Activations kept for the backward pass of one sequence.
template <class T>
struct BlockActivations {
  std::vector<T> x_in, ln1_hat, ln1_rstd, a1, qkv, probs, ctx, x2, ln2_hat, ln2_rstd, a2, u, gu;
};

template <class T>
struct Activations {
  int n = 0;
  std::vector<std::array<TokenId, kSeqLayers>> ids;
  std::vector<int> feat_rows;       // rows that carry a feature frame
  std::vector<T> feat_in, ad_pre, ad_h;  // per featured row
  std::vector<BlockActivations<T>> blocks;
  std::vector<T> x_final, lnf_hat, lnf_rstd, hf;
};

namespace detail {

template <class T>
void check_ids(const VocabSpec& vocab, const std::array<TokenId, kSeqLayers>& ids) {
  for (int l = 0; l < kSeqLayers; ++l) {
    if (!vocab.valid_input(l, ids[l])) {
      fail("token id " + std::to_string(ids[l]) + " is not valid input for layer " + std::to_string(l));
    }
  }
}

// One causal attention row: out = softmax(q.K[0..n)/sqrt(hd)) V, per head.
// `probs` (optional) receives n probabilities per head, heads `stride` apart.
template <class T>
void attend_row(const T* q, const T* keys, const T* values, int n, int d, int n_heads, T* out, T* probs, int stride,
                std::vector<T>& scratch) {
  const int hd = d / n_heads;
  const T scale = T(1) / std::sqrt(T(hd));
  scratch.resize(n);
  for (int h = 0; h < n_heads; ++h) {
    const T* qh = q + h * hd;
    for (int j = 0; j < n; ++j) {
      const T* kj = keys + static_cast<std::size_t>(j) * d + h * hd;
      T s = 0;
      for (int e = 0; e < hd; ++e) s += qh[e] * kj[e];
      scratch[j] = s * scale;
    }
    kernels::softmax(scratch.data(), n);
    T* oh = out + h * hd;
    std::fill(oh, oh + hd, T(0));
    for (int j = 0; j < n; ++j) {
      const T p = scratch[j];
      const T* vj = values + static_cast<std::size_t>(j) * d + h * hd;
      for (int e = 0; e < hd; ++e) oh[e] += p * vj[e];
    }
    if (probs) std::copy(scratch.begin(), scratch.begin() + n, probs + static_cast<std::size_t>(h) * stride);
  }
}

}  // namespace detail

// Mean (or sum) of the 8 per-layer embeddings, with the input-adapter
// projection of a feature frame as an extra summand when present. Position
// embeddings are not included.
template <class T>
std::vector<T> embed_fuse(const Parameters<T>& p, const std::array<TokenId, kSeqLayers>& ids, const std::vector<T>* feature,
                          std::vector<T>* ad_pre = nullptr, std::vector<T>* ad_h = nullptr) {
  const auto& cfg = p.config();
  const auto& ix = p.index();
  const int d = cfg.d_model;
  detail::check_ids<T>(cfg.vocab, ids);
  std::vector<T> out(d, T(0));
  for (int l = 0; l < kSeqLayers; ++l) {
    const T* e = p[ix.emb[l]].ptr() + static_cast<std::size_t>(ids[l]) * d;
    for (int k = 0; k < d; ++k) out[k] += e[k];
  }
  int summands = kSeqLayers;
  if (feature && !feature->empty()) {
    require(static_cast<int>(feature->size()) == cfg.feature_dim, "feature frame has wrong dimension");
    std::vector<T> pre(d), h(d), proj(d);
    kernels::linear(feature->data(), 1, cfg.feature_dim, p[ix.ad_w1].ptr(), p[ix.ad_b1].ptr(), d, pre.data());
    for (int k = 0; k < d; ++k) h[k] = kernels::gelu(pre[k]);
    kernels::linear(h.data(), 1, d, p[ix.ad_w2].ptr(), p[ix.ad_b2].ptr(), d, proj.data());
    for (int k = 0; k < d; ++k) out[k] += proj[k];
    if (ad_pre) *ad_pre = std::move(pre);
    if (ad_h) *ad_h = std::move(h);
    ++summands;
  }
  if (cfg.fusion == Fusion::Mean)
    for (auto& x : out) x /= T(summands);
  return out;
}

// A row fed through the transformer: its cache and absolute position.
template <class T>
struct RowRef {
  KvCache<T>* cache;
  int pos;
};

// Runs the block stack over `n` rows whose fused inputs are in x (n x d,
// position embedding already added). Each row's K/V are written to its cache
// before attention, so rows of one sequence must be passed in position order.
// Returns final-layer-normed hidden states (n x d).
template <class T>
std::vector<T> run_blocks(const Parameters<T>& p, std::span<const RowRef<T>> rows, std::vector<T> x, Activations<T>* act) {
  const auto& cfg = p.config();
  const auto& ix = p.index();
  const int d = cfg.d_model;
  const int n = static_cast<int>(rows.size());
  const int hidden = cfg.mlp_mult * d;
  std::vector<T> hat(static_cast<std::size_t>(n) * d), rstd(n), a(static_cast<std::size_t>(n) * d);
  std::vector<T> qkv(static_cast<std::size_t>(n) * 3 * d), ctx(static_cast<std::size_t>(n) * d), tmp(static_cast<std::size_t>(n) * d);
  std::vector<T> u(static_cast<std::size_t>(n) * hidden), gu(static_cast<std::size_t>(n) * hidden);
  std::vector<T> scratch;
  if (act) act->blocks.resize(cfg.n_blocks());

  for (int b = 0; b < cfg.n_blocks(); ++b) {
    const auto& bi = ix.blocks[b];
    BlockActivations<T>* ba = act ? &act->blocks[b] : nullptr;
    if (ba) ba->x_in = x;
    kernels::layer_norm(x.data(), n, d, p[bi.ln1_g].ptr(), p[bi.ln1_b].ptr(), a.data(), hat.data(), rstd.data());
    if (ba) {
      ba->ln1_hat = hat;
      ba->ln1_rstd = rstd;
      ba->a1 = a;
    }
    kernels::linear(a.data(), n, d, p[bi.w_qkv].ptr(), static_cast<const T*>(nullptr), 3 * d, qkv.data());
    for (int i = 0; i < n; ++i) {
      auto& c = *rows[i].cache;
      require(rows[i].pos < c.capacity, "sequence exceeds cache capacity");
      const T* r = qkv.data() + static_cast<std::size_t>(i) * 3 * d;
      std::copy(r + d, r + 2 * d, c.k[b].data() + static_cast<std::size_t>(rows[i].pos) * d);
      std::copy(r + 2 * d, r + 3 * d, c.v[b].data() + static_cast<std::size_t>(rows[i].pos) * d);
    }
    if (ba) ba->probs.assign(static_cast<std::size_t>(cfg.n_heads) * n * n, T(0));
    for (int i = 0; i < n; ++i) {
      auto& c = *rows[i].cache;
      const int len = rows[i].pos + 1;
      T* probs = ba ? ba->probs.data() + static_cast<std::size_t>(i) * cfg.n_heads * n : nullptr;
      detail::attend_row(qkv.data() + static_cast<std::size_t>(i) * 3 * d, c.k[b].data(), c.v[b].data(), len, d, cfg.n_heads,
                         ctx.data() + static_cast<std::size_t>(i) * d, probs, n, scratch);
    }
    if (ba) {
      ba->qkv = qkv;
      ba->ctx = ctx;
    }
    kernels::linear(ctx.data(), n, d, p[bi.w_o].ptr(), p[bi.b_o].ptr(), d, tmp.data());
    for (std::size_t k = 0; k < x.size(); ++k) x[k] += tmp[k];
    if (ba) ba->x2 = x;
    kernels::layer_norm(x.data(), n, d, p[bi.ln2_g].ptr(), p[bi.ln2_b].ptr(), a.data(), hat.data(), rstd.data());
    if (ba) {
      ba->ln2_hat = hat;
      ba->ln2_rstd = rstd;
      ba->a2 = a;
    }
    kernels::linear(a.data(), n, d, p[bi.w_up].ptr(), p[bi.b_up].ptr(), hidden, u.data());
    for (std::size_t k = 0; k < u.size(); ++k) gu[k] = kernels::gelu(u[k]);
    if (ba) {
      ba->u = u;
      ba->gu = gu;
    }
    kernels::linear(gu.data(), n, hidden, p[bi.w_down].ptr(), p[bi.b_down].ptr(), d, tmp.data());
    for (std::size_t k = 0; k < x.size(); ++k) x[k] += tmp[k];
  }
  for (int i = 0; i < n; ++i) rows[i].cache->len = std::max(rows[i].cache->len, rows[i].pos + 1);
  std::vector<T> hf(static_cast<std::size_t>(n) * d);
  kernels::layer_norm(x.data(), n, d, p[ix.lnf_g].ptr(), p[ix.lnf_b].ptr(), hf.data(), hat.data(), rstd.data());
  if (act) {
    act->x_final = x;
    act->lnf_hat = hat;
    act->lnf_rstd = rstd;
    act->hf = hf;
  }
  return hf;
}

// Head-local logits (one entry per legal id) for one hidden row.
template <class T>
void head_local_logits(const Parameters<T>& p, int layer, const T* h, std::vector<T>& out) {
  const auto& ix = p.index();
  const auto& w = p[ix.head_w[layer]];
  out.resize(w.cols);
  kernels::linear(h, 1, w.rows, w.ptr(), p[ix.head_b[layer]].ptr(), w.cols, out.data());
}

template <class T>
void expand_logits(const Parameters<T>& p, int layer, const std::vector<T>& local, T* full) {
  const auto& ids = p.index().head_ids[layer];
  std::fill(full, full + p.config().vocab.total_size(), -std::numeric_limits<T>::infinity());
  for (std::size_t i = 0; i < ids.size(); ++i) full[ids[i]] = local[i];
}

// Fused step inputs for a sequence of 8-token columns (plus optional
// features), position embeddings added for positions start..start+n.
template <class T>
std::vector<T> fuse_sequence(const Parameters<T>& p, const std::vector<std::array<TokenId, kSeqLayers>>& cols,
                             const std::vector<std::vector<T>>& features, std::span<const int> positions, Activations<T>* act) {
  const auto& cfg = p.config();
  const int d = cfg.d_model;
  const int n = static_cast<int>(cols.size());
  std::vector<T> x(static_cast<std::size_t>(n) * d);
  if (act) {
    act->n = n;
    act->ids = cols;
    act->feat_rows.clear();
    act->feat_in.clear();
    act->ad_pre.clear();
    act->ad_h.clear();
  }
  for (int i = 0; i < n; ++i) {
    require(positions[i] < cfg.max_seq_len, "sequence length exceeds max_seq_len (" + std::to_string(cfg.max_seq_len) + ")");
    const std::vector<T>* f = (i < static_cast<int>(features.size()) && !features[i].empty()) ? &features[i] : nullptr;
    std::vector<T> pre, h;
    auto fused = embed_fuse(p, cols[i], f, &pre, &h);
    if (act && f) {
      act->feat_rows.push_back(i);
      act->feat_in.insert(act->feat_in.end(), f->begin(), f->end());
      act->ad_pre.insert(act->ad_pre.end(), pre.begin(), pre.end());
      act->ad_h.insert(act->ad_h.end(), h.begin(), h.end());
    }
    const T* pe = p[p.index().pos].ptr() + static_cast<std::size_t>(positions[i]) * d;
    for (int k = 0; k < d; ++k) x[static_cast<std::size_t>(i) * d + k] = fused[k] + pe[k];
  }
  return x;
}

// The teacher-forced input sequence for a layout: the input columns followed
// by the first n_pred-1 target columns. Predictions for target step k come
// from row input_len-1+k.
template <class T>
struct SequenceInput {
  std::vector<std::array<TokenId, kSeqLayers>> cols;
  std::vector<std::vector<T>> features;
  int first_pred_row = 0;
  int n_pred = 0;
};

template <class T>
SequenceInput<T> teacher_sequence(const InputLayout& layout, const TokenGrid& teacher, int n_pred) {
  require(layout.input_len() > 0, "layout has no input positions");
  require(teacher.n_layers() == kSeqLayers, "teacher grid must have 8 layers");
  require(n_pred >= 0 && n_pred <= teacher.n_steps(), "n_pred outside teacher grid");
  SequenceInput<T> s;
  const int tin = layout.input_len();
  for (int t = 0; t < tin; ++t) {
    std::array<TokenId, kSeqLayers> c;
    for (int l = 0; l < kSeqLayers; ++l) c[l] = layout.input_ids.at(l, t);
    s.cols.push_back(c);
    std::vector<T> f;
    if (t < static_cast<int>(layout.features.size())) f.assign(layout.features[t].begin(), layout.features[t].end());
    s.features.push_back(std::move(f));
  }
  for (int k = 0; k + 1 < n_pred; ++k) {
    std::array<TokenId, kSeqLayers> c;
    for (int l = 0; l < kSeqLayers; ++l) c[l] = teacher.at(l, k);
    s.cols.push_back(c);
    s.features.emplace_back();
  }
  s.first_pred_row = tin - 1;
  s.n_pred = n_pred;
  return s;
}

// Full (non-incremental) evaluation. Returns logits for every teacher step:
// logits(l, k) is the distribution of head l for target column k.
template <class T>
LogitGrid<T> forward(const Parameters<T>& p, const InputLayout& layout, const TokenGrid& teacher) {
  const auto& cfg = p.config();
  auto seq = teacher_sequence<T>(layout, teacher, teacher.n_steps());
  const int n = static_cast<int>(seq.cols.size());
  require(n <= cfg.max_seq_len, "sequence of " + std::to_string(n) + " steps exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  std::vector<int> pos(n);
  for (int i = 0; i < n; ++i) pos[i] = i;
  KvCache<T> cache(cfg.n_blocks(), n, cfg.d_model);
  std::vector<RowRef<T>> rows(n);
  for (int i = 0; i < n; ++i) rows[i] = {&cache, i};
  auto x = fuse_sequence(p, seq.cols, seq.features, pos, static_cast<Activations<T>*>(nullptr));
  auto hf = run_blocks(p, std::span<const RowRef<T>>(rows), std::move(x), static_cast<Activations<T>*>(nullptr));
  LogitGrid<T> out(seq.n_pred, static_cast<int>(cfg.vocab.total_size()));
  std::vector<T> local;
  for (int k = 0; k < seq.n_pred; ++k) {
    const T* h = hf.data() + static_cast<std::size_t>(seq.first_pred_row + k) * cfg.d_model;
    for (int l = 0; l < kSeqLayers; ++l) {
      head_local_logits(p, l, h, local);
      expand_logits(p, l, local, out.at(l, k));
    }
  }
  return out;
}

// Mean over masked cells of -log softmax(logits)[target].
template <class T>
double loss(const LogitGrid<T>& logits, const TokenGrid& targets, const MaskGrid& mask) {
  require(targets.n_layers() == kSeqLayers && mask.n_layers() == kSeqLayers, "loss expects 8-layer grids");
  require(logits.steps == targets.n_steps() && mask.n_steps() == targets.n_steps(), "loss shape mismatch");
  double sum = 0;
  int cells = 0;
  for (int l = 0; l < kSeqLayers; ++l) {
    for (int t = 0; t < targets.n_steps(); ++t) {
      if (!mask.at(l, t)) continue;
      const T* z = logits.at(l, t);
      const TokenId y = targets.at(l, t);
      require(static_cast<int>(y) < logits.vocab, "target id outside logit range");
      sum += static_cast<double>(kernels::log_sum_exp(z, logits.vocab)) - static_cast<double>(z[y]);
      ++cells;
    }
  }
  require(cells > 0, "loss over an empty mask is undefined");
  return sum / cells;
}

struct LossStats {
  double loss = 0;  // mean over masked cells of this example
  int cells = 0;
  int correct = 0;  // argmax == target
};

// Last target step that carries a loss cell, +1.
inline int prediction_span(const MaskGrid& mask) {
  int last = 0;
  for (int l = 0; l < mask.n_layers(); ++l)
    for (int t = 0; t < mask.n_steps(); ++t)
      if (mask.at(l, t)) last = std::max(last, t + 1);
  return last;
}

// Teacher-forced loss for one layout; when `grad` is non-null, adds
// scale * dloss/dtheta into it for tensors whose group is trainable.
template <class T>
LossStats loss_and_grad(const Parameters<T>& p, const InputLayout& layout, const GroupSet& trainable,
                        std::type_identity_t<Parameters<T>>* grad, std::type_identity_t<T> scale) {
  const auto& cfg = p.config();
  const auto& ix = p.index();
  const int d = cfg.d_model;
  const int hidden = cfg.mlp_mult * d;
  const int n_pred = prediction_span(layout.loss_mask);
  require(n_pred > 0, "loss over an empty mask is undefined");
  auto seq = teacher_sequence<T>(layout, layout.target_ids, n_pred);
  const int n = static_cast<int>(seq.cols.size());
  require(n <= cfg.max_seq_len, "sequence of " + std::to_string(n) + " steps exceeds max_seq_len " + std::to_string(cfg.max_seq_len));

  std::vector<int> pos(n);
  for (int i = 0; i < n; ++i) pos[i] = i;
  KvCache<T> cache(cfg.n_blocks(), n, d);
  std::vector<RowRef<T>> rows(n);
  for (int i = 0; i < n; ++i) rows[i] = {&cache, i};
  Activations<T> act;
  Activations<T>* ap = grad ? &act : nullptr;
  auto x0 = fuse_sequence(p, seq.cols, seq.features, pos, ap);
  auto hf = run_blocks(p, std::span<const RowRef<T>>(rows), std::move(x0), ap);

  LossStats st;
  for (int l = 0; l < kSeqLayers; ++l) st.cells += layout.loss_mask.count(l);
  std::vector<T> dhf(grad ? static_cast<std::size_t>(n) * d : 0, T(0));
  std::vector<T> local;
  double total = 0;
  const T cell_scale = scale / T(st.cells);
  for (int k = 0; k < n_pred; ++k) {
    const int row = seq.first_pred_row + k;
    const T* h = hf.data() + static_cast<std::size_t>(row) * d;
    for (int l = 0; l < kSeqLayers; ++l) {
      if (!layout.loss_mask.at(l, k)) continue;
      head_local_logits(p, l, h, local);
      const int y = ix.head_local[l][layout.target_ids.at(l, k)];
      require(y >= 0, "target is not a legal output of head " + std::to_string(l));
      const int nv = static_cast<int>(local.size());
      int arg = 0;
      for (int j = 1; j < nv; ++j)
        if (local[j] > local[arg]) arg = j;
      st.correct += arg == y;
      const T lse = kernels::log_sum_exp(local.data(), nv);
      total += static_cast<double>(lse - local[y]);
      if (!grad) continue;
      // dz = softmax - onehot
      std::vector<T> dz(nv);
      for (int j = 0; j < nv; ++j) dz[j] = std::exp(local[j] - lse) * cell_scale;
      dz[y] -= cell_scale;
      const auto& w = p[ix.head_w[l]];
      if (trainable.has(Group::Heads)) {
        kernels::linear_backward_params(h, dz.data(), 1, d, nv, (*grad)[ix.head_w[l]].ptr(), (*grad)[ix.head_b[l]].ptr());
      }
      T* dh = dhf.data() + static_cast<std::size_t>(row) * d;
      for (int kk = 0; kk < d; ++kk) {
        const T* wr = w.ptr() + static_cast<std::size_t>(kk) * nv;
        T s = 0;
        for (int j = 0; j < nv; ++j) s += wr[j] * dz[j];
        dh[kk] += s;
      }
    }
  }
  st.loss = total / st.cells;
  if (!grad) return st;

  auto G = [&](int idx, Group g) -> T* { return trainable.has(g) ? (*grad)[idx].ptr() : nullptr; };

  // final layer norm
  std::vector<T> dx(static_cast<std::size_t>(n) * d, T(0));
  kernels::layer_norm_backward(dhf.data(), act.lnf_hat.data(), act.lnf_rstd.data(), p[ix.lnf_g].ptr(), n, d, dx.data(),
                               G(ix.lnf_g, Group::Heads), G(ix.lnf_b, Group::Heads));

  std::vector<T> wt, dtmp, dgu(static_cast<std::size_t>(n) * hidden), dqkv(static_cast<std::size_t>(n) * 3 * d);
  std::vector<T> dctx(static_cast<std::size_t>(n) * d), da(static_cast<std::size_t>(n) * d);
  const int hd = cfg.head_dim();
  const T att_scale = T(1) / std::sqrt(T(hd));
  for (int b = cfg.n_blocks() - 1; b >= 0; --b) {
    const auto& bi = ix.blocks[b];
    const auto& ba = act.blocks[b];
    const Group g = b < cfg.n_trunk_blocks ? Group::Trunk : Group::OutputExtension;
    const bool tr = trainable.has(g);

    // x3 = x2 + mlp(ln2(x2)); dx holds dx3
    std::fill(dgu.begin(), dgu.end(), T(0));
    wt.resize(static_cast<std::size_t>(hidden) * d);
    kernels::transpose(p[bi.w_down].ptr(), hidden, d, wt.data());
    kernels::linear_backward_input(dx.data(), n, d, wt.data(), hidden, dgu.data());
    if (tr) kernels::linear_backward_params(ba.gu.data(), dx.data(), n, hidden, d, G(bi.w_down, g), G(bi.b_down, g));
    for (std::size_t k = 0; k < dgu.size(); ++k) dgu[k] *= kernels::gelu_grad(ba.u[k]);
    std::fill(da.begin(), da.end(), T(0));
    wt.resize(static_cast<std::size_t>(d) * hidden);
    kernels::transpose(p[bi.w_up].ptr(), d, hidden, wt.data());
    kernels::linear_backward_input(dgu.data(), n, hidden, wt.data(), d, da.data());
    if (tr) kernels::linear_backward_params(ba.a2.data(), dgu.data(), n, d, hidden, G(bi.w_up, g), G(bi.b_up, g));
    kernels::layer_norm_backward(da.data(), ba.ln2_hat.data(), ba.ln2_rstd.data(), p[bi.ln2_g].ptr(), n, d, dx.data(),
                                 G(bi.ln2_g, g), G(bi.ln2_b, g));

    // x2 = x_in + attn(ln1(x_in)); dx holds dx2
    std::fill(dctx.begin(), dctx.end(), T(0));
    wt.resize(static_cast<std::size_t>(d) * d);
    kernels::transpose(p[bi.w_o].ptr(), d, d, wt.data());
    kernels::linear_backward_input(dx.data(), n, d, wt.data(), d, dctx.data());
    if (tr) kernels::linear_backward_params(ba.ctx.data(), dx.data(), n, d, d, G(bi.w_o, g), G(bi.b_o, g));

    std::fill(dqkv.begin(), dqkv.end(), T(0));
    std::vector<T> dp(n);
    for (int i = 0; i < n; ++i) {
      const int len = i + 1;
      const T* qi = ba.qkv.data() + static_cast<std::size_t>(i) * 3 * d;
      T* dqi = dqkv.data() + static_cast<std::size_t>(i) * 3 * d;
      for (int h = 0; h < cfg.n_heads; ++h) {
        const T* P = ba.probs.data() + (static_cast<std::size_t>(i) * cfg.n_heads + h) * n;
        const T* dc = dctx.data() + static_cast<std::size_t>(i) * d + h * hd;
        T dot = 0;
        for (int j = 0; j < len; ++j) {
          const T* vj = ba.qkv.data() + static_cast<std::size_t>(j) * 3 * d + 2 * d + h * hd;
          T s = 0;
          for (int e = 0; e < hd; ++e) s += dc[e] * vj[e];
          dp[j] = s;
          dot += P[j] * s;
          T* dvj = dqkv.data() + static_cast<std::size_t>(j) * 3 * d + 2 * d + h * hd;
          for (int e = 0; e < hd; ++e) dvj[e] += P[j] * dc[e];
        }
        for (int j = 0; j < len; ++j) {
          const T ds = P[j] * (dp[j] - dot) * att_scale;
          const T* kj = ba.qkv.data() + static_cast<std::size_t>(j) * 3 * d + d + h * hd;
          T* dkj = dqkv.data() + static_cast<std::size_t>(j) * 3 * d + d + h * hd;
          for (int e = 0; e < hd; ++e) {
            dqi[h * hd + e] += ds * kj[e];
            dkj[e] += ds * qi[h * hd + e];
          }
        }
      }
    }
    std::fill(da.begin(), da.end(), T(0));
    wt.resize(static_cast<std::size_t>(3) * d * d);
    kernels::transpose(p[bi.w_qkv].ptr(), d, 3 * d, wt.data());
    kernels::linear_backward_input(dqkv.data(), n, 3 * d, wt.data(), d, da.data());
    if (tr) kernels::linear_backward_params(ba.a1.data(), dqkv.data(), n, d, 3 * d, G(bi.w_qkv, g), static_cast<T*>(nullptr));
    kernels::layer_norm_backward(da.data(), ba.ln1_hat.data(), ba.ln1_rstd.data(), p[bi.ln1_g].ptr(), n, d, dx.data(),
                                 G(bi.ln1_g, g), G(bi.ln1_b, g));
  }

  // dx now holds d(fused + pos)
  if (trainable.has(Group::Embeddings)) {
    T* dpos = (*grad)[ix.pos].ptr();
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < d; ++k) dpos[static_cast<std::size_t>(i) * d + k] += dx[static_cast<std::size_t>(i) * d + k];
  }
  std::size_t fi = 0;
  for (int i = 0; i < n; ++i) {
    const bool has_feat = fi < act.feat_rows.size() && act.feat_rows[fi] == i;
    const int summands = kSeqLayers + (has_feat ? 1 : 0);
    const T inv = cfg.fusion == Fusion::Mean ? T(1) / T(summands) : T(1);
    const T* dxi = dx.data() + static_cast<std::size_t>(i) * d;
    if (trainable.has(Group::Embeddings)) {
      for (int l = 0; l < kSeqLayers; ++l) {
        T* de = (*grad)[ix.emb[l]].ptr() + static_cast<std::size_t>(act.ids[i][l]) * d;
        for (int k = 0; k < d; ++k) de[k] += dxi[k] * inv;
      }
    }
    if (has_feat) {
      if (trainable.has(Group::InputAdapter)) {
        std::vector<T> dproj(d), dh(d, T(0));
        for (int k = 0; k < d; ++k) dproj[k] = dxi[k] * inv;
        const T* h = act.ad_h.data() + fi * d;
        const T* pre = act.ad_pre.data() + fi * d;
        const T* f = act.feat_in.data() + fi * cfg.feature_dim;
        kernels::linear_backward_params(h, dproj.data(), 1, d, d, (*grad)[ix.ad_w2].ptr(), (*grad)[ix.ad_b2].ptr());
        const T* w2 = p[ix.ad_w2].ptr();
        for (int k = 0; k < d; ++k) {
          T s = 0;
          for (int j = 0; j < d; ++j) s += w2[static_cast<std::size_t>(k) * d + j] * dproj[j];
          dh[k] = s * kernels::gelu_grad(pre[k]);
        }
        kernels::linear_backward_params(f, dh.data(), 1, cfg.feature_dim, d, (*grad)[ix.ad_w1].ptr(), (*grad)[ix.ad_b1].ptr());
      }
      ++fi;
    }
  }
  return st;
}

// Incremental evaluation against one parameter set. Sessions own their KV
// cache; the parameter set is read-only and may be shared between sessions.
template <class T>
class StepModel {
 public:
  struct Session {
    KvCache<T> cache;
    int next_pos = 0;
  };

  explicit StepModel(const Parameters<T>& p) : p_(&p) {}

  const Parameters<T>& params() const { return *p_; }
  const VocabSpec& vocab() const { return p_->config().vocab; }
  int max_seq_len() const { return p_->config().max_seq_len; }

  Session new_session() const {
    const auto& c = p_->config();
    return Session{KvCache<T>(c.n_blocks(), c.max_seq_len, c.d_model), 0};
  }

  // Feeds the layout's input positions; returns logits for decode step 0.
  HeadLogits prefill(Session& s, const InputLayout& layout) const {
    auto seq = teacher_sequence<T>(layout, TokenGrid(kSeqLayers, 0), 0);
    const int n = static_cast<int>(seq.cols.size());
    require(s.next_pos + n <= max_seq_len(), "prompt exceeds max_seq_len");
    std::vector<int> pos(n);
    std::vector<RowRef<T>> rows(n);
    for (int i = 0; i < n; ++i) {
      pos[i] = s.next_pos + i;
      rows[i] = {&s.cache, pos[i]};
    }
    auto x = fuse_sequence(*p_, seq.cols, seq.features, pos, static_cast<Activations<T>*>(nullptr));
    auto hf = run_blocks(*p_, std::span<const RowRef<T>>(rows), std::move(x), static_cast<Activations<T>*>(nullptr));
    s.next_pos += n;
    return logits_for(hf.data() + static_cast<std::size_t>(n - 1) * p_->config().d_model);
  }

  // One decode step for a batch of sessions, evaluated as one batched pass.
  std::vector<HeadLogits> step(std::span<Session* const> sessions, std::span<const std::array<TokenId, kSeqLayers>> cols) const {
    require(sessions.size() == cols.size(), "one column per session");
    const int n = static_cast<int>(sessions.size());
    std::vector<std::array<TokenId, kSeqLayers>> c(cols.begin(), cols.end());
    std::vector<int> pos(n);
    std::vector<RowRef<T>> rows(n);
    for (int i = 0; i < n; ++i) {
      require(sessions[i]->next_pos < max_seq_len(), "decode exceeds max_seq_len");
      pos[i] = sessions[i]->next_pos;
      rows[i] = {&sessions[i]->cache, pos[i]};
    }
    auto x = fuse_sequence(*p_, c, std::vector<std::vector<T>>{}, pos, static_cast<Activations<T>*>(nullptr));
    auto hf = run_blocks(*p_, std::span<const RowRef<T>>(rows), std::move(x), static_cast<Activations<T>*>(nullptr));
    std::vector<HeadLogits> out;
    for (int i = 0; i < n; ++i) {
      sessions[i]->next_pos += 1;
      out.push_back(logits_for(hf.data() + static_cast<std::size_t>(i) * p_->config().d_model));
    }
    return out;
  }

  // From-scratch evaluation of the whole prefix (input + emitted columns);
  // returns the logits for the next step. Used as the caching oracle.
  HeadLogits reevaluate(const InputLayout& layout, const TokenGrid& emitted) const {
    TokenGrid teacher(kSeqLayers, emitted.n_steps() + 1, IdSpace::Global, vocab().pad());
    for (int l = 0; l < kSeqLayers; ++l)
      for (int t = 0; t < emitted.n_steps(); ++t) teacher.at(l, t) = emitted.at(l, t);
    auto lg = forward(*p_, layout, teacher);
    HeadLogits out;
    for (int l = 0; l < kSeqLayers; ++l) {
      const T* z = lg.at(l, emitted.n_steps());
      out[l].assign(z, z + lg.vocab);
    }
    return out;
  }

 private:
  HeadLogits logits_for(const T* h) const {
    HeadLogits out;
    std::vector<T> local, full(vocab().total_size());
    for (int l = 0; l < kSeqLayers; ++l) {
      head_local_logits(*p_, l, h, local);
      expand_logits(*p_, l, local, full.data());
      out[l].assign(full.begin(), full.end());
    }
    return out;
  }

  const Parameters<T>* p_;
};

}  // namespace omni
