#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "retrodesk/chunk_index.hpp"
#include "retrodesk/model.hpp"

namespace retrodesk {

// Per evaluation chunk: total loss in bits, bytes encoded, and the overlap
// score r(C) against the training retriever.
struct EvalRecord {
  uint64_t doc_id = 0;
  uint32_t window_index = 0;
  uint32_t chunk_index = 0;
  double loss_bits = 0.0;
  uint32_t byte_count = 0;
  double overlap = 0.0;  // r(C) in [0, 1]
};

// Longest-suffix streaming matcher (suffix automaton). Build over the
// reference token stream, then feed a query stream; after each fed symbol it
// reports the longest suffix of the query so far that occurs contiguously in
// the reference.
class SuffixAutomaton {
 public:
  SuffixAutomaton();
  void extend(uint32_t symbol);
  void reset_stream();
  uint32_t feed(uint32_t symbol);  // returns current match length

 private:
  struct State {
    int32_t link = -1;
    uint32_t len = 0;
    std::vector<std::pair<uint32_t, int32_t>> next;  // tiny maps, linear scan
    int32_t find(uint32_t c) const {
      for (const auto& [sym, to] : next)
        if (sym == c) return to;
      return -1;
    }
  };
  std::vector<State> states_;
  int32_t last_ = 0;
  int32_t cur_ = 0;
  uint32_t cur_len_ = 0;
};

// Length of the longest token run shared by the chunk and any neighbour.
// Neighbours are isolated with unique separator symbols so runs cannot span
// them.
uint32_t longest_common_run(const std::vector<TokenId>& chunk,
                            const std::vector<std::vector<TokenId>>& neighbors);

// r(C) = s / norm_len where s is the longest shared run; norm_len is the
// nominal chunk length m, or the actual token count for short tail chunks.
double chunk_overlap(const std::vector<TokenId>& chunk,
                     const std::vector<std::vector<TokenId>>& neighbors,
                     uint32_t norm_len);

struct BpbPoint {
  double alpha = 1.0;
  double bpb = 0.0;
  uint64_t chunks = 0;
  uint64_t bytes = 0;
  bool defined = false;  // false when no chunk passes the filter
};

// Eq.-5 style filtered bits-per-byte over chunks with r(C) <= alpha.
BpbPoint filtered_bpb(const std::vector<EvalRecord>& records, double alpha);

// Counts over the 8 bins [0,0.125), ..., [0.875, 1].
std::vector<uint64_t> overlap_histogram(const std::vector<EvalRecord>& records);

struct KnnLmParams {
  double lambda = 0.118;
  double alpha = 0.00785;
  uint32_t k = 10;
};

// p = lambda * p_kNN + (1 - lambda) * p_LM with p_kNN(token) proportional to
// the exp(-alpha * d) mass of that token's hits. With no hits and lambda > 0
// the LM distribution is returned and *fell_back is set.
std::vector<double> knnlm_mix(const std::vector<double>& lm_probs,
                              const std::vector<std::pair<TokenId, float>>& hits,
                              const KnnLmParams& params,
                              bool* fell_back = nullptr);

// One validation position for kNN-LM tuning.
struct KnnPoint {
  double lm_prob_target = 0.0;
  TokenId target = 0;
  std::vector<std::pair<TokenId, float>> hits;  // (token, distance)
};

double knnlm_perplexity(const std::vector<KnnPoint>& points, double lambda,
                        double alpha);

// Coordinate search mirroring the tuning recipe: sweep lambda at a fixed
// starting alpha, then sweep alpha at the best lambda. Trace lines are JSONL.
KnnLmParams tune_knnlm(const std::vector<KnnPoint>& points, uint32_t k,
                       double alpha0 = 0.0, std::ostream* trace = nullptr);

// Token-level datastore for the kNN-LM baseline: keys are frozen embeddings
// of the m-token window ending at position t, values the next token.
class TokenDatastore {
 public:
  TokenDatastore(const std::vector<Document>& docs,
                 const FrozenEmbedder& embedder, uint32_t stride = 1,
                 uint32_t centroids = 0);

  std::vector<std::pair<TokenId, float>> query(const std::vector<float>& q,
                                               uint32_t k,
                                               uint32_t nprobe = 8) const;
  size_t size() const { return values_.size(); }
  double key_norm_stddev() const;  // the alpha0 heuristic

 private:
  uint32_t dim_;
  std::vector<float> keys_;
  std::vector<TokenId> values_;
  std::vector<float> centroids_;
  std::vector<std::vector<uint32_t>> postings_;
  uint32_t centroid_count_ = 0;
};

// Runs the model over evaluation windows and produces one record per chunk.
// Overlap scores r(C) are computed against `overlap_index` with
// `overlap_k` nearest neighbours when it is provided, else left at 0.
template <typename S>
std::vector<EvalRecord> evaluate_windows(
    RetroModel<S>& model, const std::vector<Window>& windows,
    const NeighborFile* neighbors, uint32_t k_use,
    std::optional<NeighborMode> mode, const ChunkIndex* overlap_index,
    const FrozenEmbedder* embedder, uint32_t overlap_k = 10) {
  const uint32_t m = model.config().m;
  std::vector<EvalRecord> out;
  for (size_t w = 0; w < windows.size(); ++w) {
    const Window& win = windows[w];
    RetrievedTokens ret;
    const RetrievedTokens* ret_ptr = nullptr;
    if (neighbors) {
      ret = retrieved_from_file(*neighbors, w, k_use);
      ret_ptr = &ret;
    }
    LossResult loss =
        model.log_likelihood(win.tokens, ret_ptr, mode, win.scored_from);
    const uint32_t l = static_cast<uint32_t>(win.tokens.size() / m);
    for (uint32_t u = 0; u < l; ++u) {
      EvalRecord rec;
      rec.doc_id = win.doc_id;
      rec.window_index = win.window_index;
      rec.chunk_index = u;
      std::vector<TokenId> chunk_tokens;
      for (uint32_t i = 0; i < m; ++i) {
        size_t p = static_cast<size_t>(u) * m + i;
        if (win.tokens[p] != kPadToken) chunk_tokens.push_back(win.tokens[p]);
        if (loss.scored[p]) {
          rec.loss_bits += loss.token_nats[p] / std::log(2.0);
          ++rec.byte_count;
        }
      }
      if (rec.byte_count == 0) continue;  // fully padded or unscored chunk
      if (overlap_index && embedder && !chunk_tokens.empty()) {
        std::vector<TokenId> padded(chunk_tokens);
        padded.resize(m, kPadToken);
        auto q = embedder->embed_chunk(padded);
        auto res = overlap_index->query(q, overlap_k, std::nullopt,
                                        SearchMode::kExact);
        std::vector<std::vector<TokenId>> nb;
        nb.reserve(res.records.size());
        for (auto& r : res.records) {
          std::vector<TokenId> joined;
          for (TokenId t : r.neighbor_tokens)
            if (t != kPadToken) joined.push_back(t);
          for (TokenId t : r.continuation_tokens)
            if (t != kPadToken) joined.push_back(t);
          nb.push_back(std::move(joined));
        }
        // Tail chunks normalise by their actual length; full chunks by m.
        rec.overlap = chunk_overlap(chunk_tokens, nb,
                                    static_cast<uint32_t>(chunk_tokens.size()));
      }
      out.push_back(rec);
    }
  }
  return out;
}

}  // namespace retrodesk
