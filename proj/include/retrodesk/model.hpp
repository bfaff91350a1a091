#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "retrodesk/chunk_index.hpp"
#include "retrodesk/config.hpp"
#include "retrodesk/graph.hpp"
#include "retrodesk/params.hpp"
#include "retrodesk/relpos.hpp"

namespace retrodesk {

inline constexpr float kMaskValue = -1e30f;

// Retrieved token values for one sequence: [l][k][r] ids, r = 2m (N then F).
struct RetrievedTokens {
  uint32_t l = 0, k = 0, r = 0;
  std::vector<TokenId> tokens;

  const TokenId* at(uint32_t u, uint32_t j) const {
    return tokens.data() + (static_cast<size_t>(u) * k + j) * r;
  }
  TokenId* at(uint32_t u, uint32_t j) {
    return tokens.data() + (static_cast<size_t>(u) * k + j) * r;
  }
  static RetrievedTokens zeros(uint32_t l, uint32_t k, uint32_t r) {
    RetrievedTokens rt;
    rt.l = l;
    rt.k = k;
    rt.r = r;
    rt.tokens.assign(static_cast<size_t>(l) * k * r, kPadToken);
    return rt;
  }
};

// Flattens a NeighborFile sequence into [l][k][2m] values, truncated to
// k_use neighbours.
inline RetrievedTokens retrieved_from_file(const NeighborFile& file,
                                           size_t seq_idx, uint32_t k_use) {
  const auto& seq = file.sequences[seq_idx];
  if (k_use == 0 || k_use > file.k)
    throw std::invalid_argument("retrieved_from_file: bad k");
  uint32_t l = static_cast<uint32_t>(seq.records.size() / file.k);
  RetrievedTokens rt = RetrievedTokens::zeros(l, k_use, 2 * file.m);
  for (uint32_t u = 0; u < l; ++u)
    for (uint32_t j = 0; j < k_use; ++j) {
      const auto& rec = seq.records[static_cast<size_t>(u) * file.k + j];
      TokenId* dst = rt.at(u, j);
      std::copy(rec.neighbor_tokens.begin(), rec.neighbor_tokens.end(), dst);
      std::copy(rec.continuation_tokens.begin(),
                rec.continuation_tokens.end(), dst + file.m);
    }
  return rt;
}

// E, the full encoded neighbour set of shape (l, k, r, d'), stored flat as
// ((l k r), d') with k-major neighbour blocks inside each chunk.
template <typename S>
struct EncodedNeighbors {
  uint32_t l = 0, k = 0, r = 0, d_prime = 0;
  Tensor<S> flat;
};

struct LossResult {
  std::vector<double> token_nats;  // per token position, 0 where unscored
  std::vector<char> scored;
  double total_nats = 0.0;
  double total_bits = 0.0;
};

template <typename S>
class RetroModel {
 public:
  RetroModel(const ModelConfig& config, ParameterStore<S>* params)
      : cfg_(config), ps_(params) {
    cfg_.validate();
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<S>& params() { return *ps_; }

  // Fresh parameters. Retrieval-path tensors are created unless the config
  // has neighbor_mode == off.
  static ParameterStore<S> init_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ParameterStore<S> ps;
    SplitMix64 rng(seed);
    add_decoder_params(cfg, ps, rng, /*with_cca=*/cfg.neighbor_mode !=
                                         NeighborMode::kOff);
    if (cfg.neighbor_mode != NeighborMode::kOff)
      add_encoder_params(cfg, ps, rng, /*zero_values=*/false);
    return ps;
  }

  // Adds freshly initialised retrieval weights (encoder + CCA) to a
  // retrieval-off parameter set; value projections start at zero so the
  // extended model reproduces the base forward exactly.
  static void add_retrieval_params(const ModelConfig& cfg,
                                   ParameterStore<S>& ps, uint64_t seed) {
    SplitMix64 rng(seed ^ 0x2e7202f17ull);
    for (uint32_t p : cfg.cca_layers) {
      std::string base = "dec.l" + std::to_string(p) + ".cca.";
      add_gain(ps, base + "norm", cfg.d);
      add_weight(ps, base + "wq", cfg.d, cfg.heads * cfg.head_dim, rng);
      add_weight(ps, base + "wk", cfg.d_prime, cfg.heads * cfg.head_dim, rng);
      add_zero(ps, base + "wv", cfg.d_prime, cfg.heads * cfg.head_dim);
      add_weight(ps, base + "wo", cfg.heads * cfg.head_dim, cfg.d, rng);
      add_weight(ps, base + "rel_w", cfg.rel_basis, cfg.heads, rng);
    }
    add_encoder_params(cfg, ps, rng, /*zero_values=*/true);
  }

  // ---- building blocks (also exercised directly by tests) ----

  // Residual multi-head attention: h + Attn(rmsnorm(h), Y). Queries come
  // from the pre-normed h; keys and values from Y, or from the same normed
  // activations when y == nullptr (self-attention). Relative positional
  // logits of the given kind are added pre-softmax. add_mask, when present,
  // is an additive (Tq, Tk) constant shared across heads. rel_tile
  // horizontally repeats the relative logit table (used by CCA over k merged
  // neighbours).
  Tensor<S> ca(Graph<S>& g, const Tensor<S>& h, const Tensor<S>* y,
               const std::string& prefix, RelKind kind,
               const Tensor<S>* add_mask = nullptr, int rel_tile = 1,
               uint32_t heads = 0, int64_t blocks = 1) const {
    if (heads == 0) heads = cfg_.heads;
    Tensor<S> x = g.rmsnorm(h, ps_->get(prefix + "norm"));
    const Tensor<S>& kv = y ? *y : x;
    Tensor<S> q = g.matmul(x, ps_->get(prefix + "wq"));
    Tensor<S> k = g.matmul(kv, ps_->get(prefix + "wk"));
    Tensor<S> v = g.matmul(kv, ps_->get(prefix + "wv"));
    Tensor<S> attn = attn_core_pre(g, q, k, v, ps_->get(prefix + "rel_w"),
                                   kind, add_mask, rel_tile, heads, blocks);
    Tensor<S> out = g.matmul(attn, ps_->get(prefix + "wo"));
    return g.add(h, out);
  }

  // Chunked cross-attention: identity on the first m-1 positions, then each
  // attending chunk (shifted by m-1) attends the time-and-neighbour merged
  // encoding of its chunk. Residual operator.
  Tensor<S> cca(Graph<S>& g, const Tensor<S>& h,
                const EncodedNeighbors<S>& enc, uint32_t layer,
                NeighborMode mode) const {
    const int64_t t = h.dims[0];
    const uint32_t m = cfg_.m;
    const int64_t l = t / m;
    if (enc.l != static_cast<uint32_t>(l))
      throw std::invalid_argument("cca: chunk count mismatch between H and E");
    if (enc.r != 2 * m) throw std::invalid_argument("cca: r != 2m");
    std::string prefix = "dec.l" + std::to_string(layer) + ".cca.";
    Tensor<S> x = g.rmsnorm(h, ps_->get(prefix + "norm"));

    // Attending chunks: row p of the shifted view is position p + m - 1.
    std::vector<int64_t> shift_idx(static_cast<size_t>(l) * m);
    for (int64_t p = 0; p < l * m; ++p)
      shift_idx[p] = p + m - 1 < t ? p + m - 1 : -1;
    Tensor<S> shifted = g.gather_rows(x, shift_idx);

    Tensor<S> q_all = g.matmul(shifted, ps_->get(prefix + "wq"));
    Tensor<S> k_all = g.matmul(enc.flat, ps_->get(prefix + "wk"));
    Tensor<S> v_all = g.matmul(enc.flat, ps_->get(prefix + "wv"));

    std::optional<Tensor<S>> dead_mask = half_mask(m, enc.k, enc.r, mode);
    Tensor<S> merged = attn_core_pre(
        g, q_all, k_all, v_all, ps_->get(prefix + "rel_w"), RelKind::kCca,
        dead_mask ? &*dead_mask : nullptr, static_cast<int>(enc.k),
        cfg_.heads, /*blocks=*/l);
    Tensor<S> proj = g.matmul(merged, ps_->get(prefix + "wo"));

    // Un-shift: position p takes attending row p - (m-1); the first m-1
    // positions take none and stay identical through the residual.
    std::vector<int64_t> unshift_idx(t);
    for (int64_t p = 0; p < t; ++p)
      unshift_idx[p] = p >= m - 1 ? p - (m - 1) : -1;
    Tensor<S> contrib = g.gather_rows(proj, unshift_idx);
    return g.add(h, contrib);
  }

  // Bi-directional encoder over every (chunk, neighbour) pair, conditioned
  // on the decoder activations h_cond (taken at layer min(P), post-Attn).
  // All l*k neighbour sequences run as one batched block-diagonal stack;
  // each pair is still encoded independently and identically parameterized.
  EncodedNeighbors<S> encode_neighbors(Graph<S>& g,
                                       const RetrievedTokens& ret,
                                       const Tensor<S>& h_cond,
                                       NeighborMode mode) const {
    const uint32_t m = cfg_.m;
    if (ret.r != 2 * m)
      throw std::invalid_argument("encode_neighbors: r != 2m");
    if (h_cond.dims[0] != static_cast<int64_t>(ret.l) * m)
      throw std::invalid_argument("encode_neighbors: H/Ret length mismatch");
    const Tensor<S>& emb =
        ps_->get(cfg_.shared_embeddings ? "dec.embed" : "enc.embed");
    std::optional<Tensor<S>> self_mask =
        half_mask(ret.r, 1, ret.r, mode);  // (r, r) dead-key mask

    const int64_t lk = static_cast<int64_t>(ret.l) * ret.k;
    // ret.tokens is already (u, j)-block-major.
    Tensor<S> x = g.embedding(emb, ret.tokens);  // (l*k*r, d')
    // Replication map: neighbour block (u, j) attends chunk u's rows.
    std::vector<int64_t> rep_idx(static_cast<size_t>(lk) * m);
    for (int64_t u = 0; u < ret.l; ++u)
      for (int64_t j = 0; j < ret.k; ++j)
        for (int64_t i = 0; i < m; ++i)
          rep_idx[(u * ret.k + j) * m + i] = u * m + i;

    for (uint32_t p = 1; p <= cfg_.enc_layers; ++p) {
      std::string lp = "enc.l" + std::to_string(p) + ".";
      x = ca(g, x, nullptr, lp + "attn.", RelKind::kEncoderSelf,
             self_mask ? &*self_mask : nullptr, 1, cfg_.enc_heads, lk);
      if (std::find(cfg_.enc_ca_layers.begin(), cfg_.enc_ca_layers.end(),
                    p) != cfg_.enc_ca_layers.end()) {
        Tensor<S> h_n = g.rmsnorm(h_cond, ps_->get(lp + "ca.h_norm"));
        Tensor<S> k_all = g.matmul(h_n, ps_->get(lp + "ca.wk"));
        Tensor<S> v_all = g.matmul(h_n, ps_->get(lp + "ca.wv"));
        Tensor<S> k_rep = g.gather_rows(k_all, rep_idx);
        Tensor<S> v_rep = g.gather_rows(v_all, rep_idx);
        Tensor<S> xq = g.rmsnorm(x, ps_->get(lp + "ca.norm"));
        Tensor<S> q = g.matmul(xq, ps_->get(lp + "ca.wq"));
        Tensor<S> attn = attn_core_pre(g, q, k_rep, v_rep,
                                       ps_->get(lp + "ca.rel_w"),
                                       RelKind::kEncoderCross, nullptr, 1,
                                       cfg_.enc_heads, lk);
        x = g.add(x, g.matmul(attn, ps_->get(lp + "ca.wo")));
      }
      x = ffw(g, x, lp + "ffw.");
    }
    EncodedNeighbors<S> out;
    out.l = ret.l;
    out.k = ret.k;
    out.r = ret.r;
    out.d_prime = cfg_.d_prime;
    out.flat = g.rmsnorm(x, ps_->get("enc.final_norm"));
    return out;
  }

  // Full decoder pass over t tokens (t a multiple of m, pads allowed at the
  // tail). Returns (t, vocab) logits. With mode off the retrieval pathway is
  // skipped entirely and `ret` may be null.
  Tensor<S> decoder_forward(Graph<S>& g, const std::vector<TokenId>& tokens,
                            const RetrievedTokens* ret,
                            std::optional<NeighborMode> mode_override =
                                std::nullopt,
                            SplitMix64* dropout_rng = nullptr) const {
    NeighborMode mode = mode_override.value_or(cfg_.neighbor_mode);
    const int64_t t = static_cast<int64_t>(tokens.size());
    if (t == 0 || t % cfg_.m != 0)
      throw std::invalid_argument(
          "decoder_forward: length must be a positive multiple of m");
    const bool retrieval = mode != NeighborMode::kOff;
    if (retrieval) {
      if (ret == nullptr)
        throw std::invalid_argument("decoder_forward: neighbours required");
      if (ret->l != static_cast<uint32_t>(t / cfg_.m))
        throw std::invalid_argument("decoder_forward: neighbour l mismatch");
    }
    const uint32_t min_p =
        cfg_.cca_layers.empty()
            ? 0
            : *std::min_element(cfg_.cca_layers.begin(), cfg_.cca_layers.end());

    Tensor<S> causal = causal_mask(t);
    Tensor<S> h = g.embedding(ps_->get("dec.embed"), tokens);
    h = maybe_dropout(g, h, dropout_rng);
    EncodedNeighbors<S> enc;
    for (uint32_t p = 1; p <= cfg_.layers; ++p) {
      std::string lp = "dec.l" + std::to_string(p) + ".";
      h = ca(g, h, nullptr, lp + "attn.", RelKind::kDecoderSelf, &causal, 1,
             cfg_.heads);
      if (retrieval && p == min_p)
        enc = encode_neighbors(g, *ret, h, mode);
      if (retrieval &&
          std::find(cfg_.cca_layers.begin(), cfg_.cca_layers.end(), p) !=
              cfg_.cca_layers.end())
        h = cca(g, h, enc, p, mode);
      h = ffw(g, h, lp + "ffw.");
      h = maybe_dropout(g, h, dropout_rng);
    }
    h = g.rmsnorm(h, ps_->get("dec.final_norm"));
    return g.matmul(h, ps_->get("dec.readout"));
  }

  // Scalar mean loss over scored positions, for training.
  Tensor<S> loss_graph(Graph<S>& g, const std::vector<TokenId>& tokens,
                       const RetrievedTokens* ret,
                       std::optional<NeighborMode> mode_override = std::nullopt,
                       SplitMix64* dropout_rng = nullptr,
                       uint32_t scored_from = 1) const {
    Tensor<S> logits = decoder_forward(g, tokens, ret, mode_override,
                                       dropout_rng);
    auto [targets, mask] = shift_targets(tokens, scored_from);
    Tensor<S> losses = g.cross_entropy_rows(logits, targets, mask);
    return g.masked_mean(losses, mask);
  }

  // Per-token losses in nats plus the bit total (the evaluation quantity).
  LossResult log_likelihood(const std::vector<TokenId>& tokens,
                            const RetrievedTokens* ret,
                            std::optional<NeighborMode> mode_override =
                                std::nullopt,
                            uint32_t scored_from = 1) const {
    Graph<S> g;
    g.grad_enabled = false;
    Tensor<S> logits = decoder_forward(g, tokens, ret, mode_override);
    auto [targets, mask] = shift_targets(tokens, scored_from);
    Tensor<S> losses = g.cross_entropy_rows(logits, targets, mask);
    LossResult res;
    const int64_t t = static_cast<int64_t>(tokens.size());
    res.token_nats.assign(t, 0.0);
    res.scored.assign(t, 0);
    const S* lp = losses.ptr();
    for (int64_t p = 0; p + 1 < t; ++p) {
      if (!mask[p]) continue;
      res.token_nats[p + 1] = static_cast<double>(lp[p]);
      res.scored[p + 1] = 1;
      res.total_nats += lp[p];
    }
    res.total_bits = res.total_nats / std::log(2.0);
    return res;
  }

  // (targets, mask) for next-token prediction; pads and the unscored prefix
  // are masked out.
  std::pair<std::vector<TokenId>, std::vector<char>> shift_targets(
      const std::vector<TokenId>& tokens, uint32_t scored_from = 1) const {
    const size_t t = tokens.size();
    std::vector<TokenId> targets(t, 0);
    std::vector<char> mask(t, 0);
    for (size_t p = 0; p + 1 < t; ++p) {
      targets[p] = tokens[p + 1];
      mask[p] = tokens[p + 1] != kPadToken && (p + 1) >= scored_from ? 1 : 0;
    }
    return {targets, mask};
  }

 private:
  ModelConfig cfg_;
  ParameterStore<S>* ps_;
  mutable std::mutex cache_mu_;
  mutable std::map<std::tuple<int, int64_t, int64_t>, Tensor<S>> basis_cache_;

  Tensor<S> maybe_dropout(Graph<S>& g, const Tensor<S>& x,
                          SplitMix64* rng) const {
    if (rng == nullptr || cfg_.dropout <= 0.0) return x;
    return g.dropout(x, cfg_.dropout, *rng);
  }

  Tensor<S> causal_mask(int64_t t) const {
    Tensor<S> mask = make_tensor<S>({t, t});
    S* p = mask.ptr();
    for (int64_t i = 0; i < t; ++i)
      for (int64_t j = i + 1; j < t; ++j) p[i * t + j] = S(kMaskValue);
    return mask;
  }

  // Additive key mask that hides the neighbour half (F) or the continuation
  // half (N) of each r-length value block. cols = blocks * r.
  std::optional<Tensor<S>> half_mask(int64_t rows_count, uint32_t blocks,
                                     uint32_t r, NeighborMode mode) const {
    if (mode != NeighborMode::kNeighborsOnly &&
        mode != NeighborMode::kContinuationsOnly)
      return std::nullopt;
    const uint32_t m = cfg_.m;
    Tensor<S> mask = make_tensor<S>({rows_count,
                                     static_cast<int64_t>(blocks) * r});
    S* p = mask.ptr();
    const int64_t cols = static_cast<int64_t>(blocks) * r;
    for (int64_t i = 0; i < rows_count; ++i)
      for (uint32_t b = 0; b < blocks; ++b)
        for (uint32_t c = 0; c < r; ++c) {
          bool dead = mode == NeighborMode::kNeighborsOnly ? c >= m : c < m;
          if (dead) p[i * cols + b * r + c] = S(kMaskValue);
        }
    return mask;
  }

  // The frequency schedule of the positional features is anchored to the
  // full configured geometry per attention kind, so a prefix-length forward
  // encodes a given distance identically to the full-length one.
  int64_t rel_span(RelKind kind) const {
    switch (kind) {
      case RelKind::kDecoderSelf:
        return rel_distance_span(cfg_.n, cfg_.n, kind, cfg_.m);
      case RelKind::kEncoderSelf:
        return rel_distance_span(cfg_.r(), cfg_.r(), kind, cfg_.m);
      case RelKind::kCca:
        return rel_distance_span(cfg_.m, cfg_.r(), kind, cfg_.m);
      case RelKind::kEncoderCross:
        return rel_distance_span(cfg_.r(), cfg_.m, kind, cfg_.m);
    }
    return 1;
  }

  // Cached positional feature tables: constant tensors shared across
  // forwards, keyed by geometry. Safe to share between graphs (never
  // written, never differentiated).
  const Tensor<S>& cached_basis(RelKind kind, int64_t q_len,
                                int64_t rel_cols) const {
    std::lock_guard<std::mutex> lock(cache_mu_);
    auto key = std::make_tuple(static_cast<int>(kind), q_len, rel_cols);
    auto it = basis_cache_.find(key);
    if (it == basis_cache_.end())
      it = basis_cache_
               .emplace(key, rel_basis_table<S>(q_len, rel_cols, kind, cfg_.m,
                                                cfg_.rel_basis,
                                                rel_span(kind)))
               .first;
    return it->second;
  }

  // Multi-head attention over pre-projected q/k/v column blocks, block-
  // diagonal over `blocks` equal row groups.
  Tensor<S> attn_core_pre(Graph<S>& g, const Tensor<S>& q, const Tensor<S>& k,
                          const Tensor<S>& v, const Tensor<S>& rel_w,
                          RelKind kind, const Tensor<S>* add_mask,
                          int rel_tile, uint32_t heads,
                          int64_t blocks = 1) const {
    const int64_t hd = q.dims[1] / heads;
    const S scale = S(1.0 / std::sqrt(static_cast<double>(hd)));
    const int64_t tq = q.dims[0] / blocks;
    const int64_t tk = k.dims[0] / blocks;
    const int64_t rel_cols = tk / rel_tile;
    Tensor<S> rel =
        g.matmul(cached_basis(kind, tq, rel_cols), rel_w);  // (tq*rc, H)
    return g.fused_attention(q, k, v, rel, add_mask, blocks, heads, scale);
  }

  Tensor<S> ffw(Graph<S>& g, const Tensor<S>& h,
                const std::string& prefix) const {
    Tensor<S> x = g.rmsnorm(h, ps_->get(prefix + "norm"));
    Tensor<S> u = g.gelu(g.matmul(x, ps_->get(prefix + "w1")));
    Tensor<S> out = g.matmul(u, ps_->get(prefix + "w2"));
    return g.add(h, out);
  }

  static void add_weight(ParameterStore<S>& ps, const std::string& name,
                         int64_t rows_count, int64_t cols_count,
                         SplitMix64& rng) {
    Tensor<S> t = make_tensor<S>({rows_count, cols_count});
    fill_gaussian(t, rng, 0.02);
    ps.add(name, std::move(t));
  }
  static void add_zero(ParameterStore<S>& ps, const std::string& name,
                       int64_t rows_count, int64_t cols_count) {
    ps.add(name, make_tensor<S>({rows_count, cols_count}));
  }
  static void add_gain(ParameterStore<S>& ps, const std::string& name,
                       int64_t dim) {
    Tensor<S> t = make_tensor<S>({dim});
    std::fill(t.data->begin(), t.data->end(), S(1));
    ps.add(name, std::move(t));
  }

  static void add_decoder_params(const ModelConfig& cfg, ParameterStore<S>& ps,
                                 SplitMix64& rng, bool with_cca) {
    add_weight(ps, "dec.embed", cfg.vocab, cfg.d, rng);
    const int64_t hh = static_cast<int64_t>(cfg.heads) * cfg.head_dim;
    for (uint32_t p = 1; p <= cfg.layers; ++p) {
      std::string lp = "dec.l" + std::to_string(p) + ".";
      add_gain(ps, lp + "attn.norm", cfg.d);
      add_weight(ps, lp + "attn.wq", cfg.d, hh, rng);
      add_weight(ps, lp + "attn.wk", cfg.d, hh, rng);
      add_weight(ps, lp + "attn.wv", cfg.d, hh, rng);
      add_weight(ps, lp + "attn.wo", hh, cfg.d, rng);
      add_weight(ps, lp + "attn.rel_w", cfg.rel_basis, cfg.heads, rng);
      if (with_cca &&
          std::find(cfg.cca_layers.begin(), cfg.cca_layers.end(), p) !=
              cfg.cca_layers.end()) {
        add_gain(ps, lp + "cca.norm", cfg.d);
        add_weight(ps, lp + "cca.wq", cfg.d, hh, rng);
        add_weight(ps, lp + "cca.wk", cfg.d_prime, hh, rng);
        add_weight(ps, lp + "cca.wv", cfg.d_prime, hh, rng);
        add_weight(ps, lp + "cca.wo", hh, cfg.d, rng);
        add_weight(ps, lp + "cca.rel_w", cfg.rel_basis, cfg.heads, rng);
      }
      add_gain(ps, lp + "ffw.norm", cfg.d);
      add_weight(ps, lp + "ffw.w1", cfg.d, cfg.d_ffw, rng);
      add_weight(ps, lp + "ffw.w2", cfg.d_ffw, cfg.d, rng);
    }
    add_gain(ps, "dec.final_norm", cfg.d);
    add_weight(ps, "dec.readout", cfg.d, cfg.vocab, rng);
  }

  static void add_encoder_params(const ModelConfig& cfg, ParameterStore<S>& ps,
                                 SplitMix64& rng, bool zero_values) {
    if (!cfg.shared_embeddings)
      add_weight(ps, "enc.embed", cfg.vocab, cfg.d_prime, rng);
    const int64_t ee = static_cast<int64_t>(cfg.enc_heads) *
                       (cfg.d_prime / cfg.enc_heads);
    const int64_t enc_ffw = static_cast<int64_t>(cfg.d_prime) * 4;
    for (uint32_t p = 1; p <= cfg.enc_layers; ++p) {
      std::string lp = "enc.l" + std::to_string(p) + ".";
      add_gain(ps, lp + "attn.norm", cfg.d_prime);
      add_weight(ps, lp + "attn.wq", cfg.d_prime, ee, rng);
      add_weight(ps, lp + "attn.wk", cfg.d_prime, ee, rng);
      add_weight(ps, lp + "attn.wv", cfg.d_prime, ee, rng);
      add_weight(ps, lp + "attn.wo", ee, cfg.d_prime, rng);
      add_weight(ps, lp + "attn.rel_w", cfg.rel_basis, cfg.enc_heads, rng);
      if (std::find(cfg.enc_ca_layers.begin(), cfg.enc_ca_layers.end(), p) !=
          cfg.enc_ca_layers.end()) {
        add_gain(ps, lp + "ca.norm", cfg.d_prime);
        add_gain(ps, lp + "ca.h_norm", cfg.d);
        add_weight(ps, lp + "ca.wq", cfg.d_prime, ee, rng);
        add_weight(ps, lp + "ca.wk", cfg.d, ee, rng);
        if (zero_values)
          add_zero(ps, lp + "ca.wv", cfg.d, ee);
        else
          add_weight(ps, lp + "ca.wv", cfg.d, ee, rng);
        add_weight(ps, lp + "ca.wo", ee, cfg.d_prime, rng);
        add_weight(ps, lp + "ca.rel_w", cfg.rel_basis, cfg.enc_heads, rng);
      }
      add_gain(ps, lp + "ffw.norm", cfg.d_prime);
      add_weight(ps, lp + "ffw.w1", cfg.d_prime, enc_ffw, rng);
      add_weight(ps, lp + "ffw.w2", enc_ffw, cfg.d_prime, rng);
    }
    add_gain(ps, "enc.final_norm", cfg.d_prime);
  }
};

}  // namespace retrodesk
