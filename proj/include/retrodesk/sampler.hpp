#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "retrodesk/chunk_index.hpp"
#include "retrodesk/evaluation.hpp"
#include "retrodesk/model.hpp"
#include "retrodesk/tokenizer.hpp"

namespace retrodesk {

enum class SampleMode { kGreedy, kTemperature };

struct SampleResult {
  std::vector<TokenId> tokens;  // prompt + generated (incl. seed pad if any)
  std::string text;
  size_t prompt_len = 0;
  size_t retrieval_calls = 0;
  std::vector<std::vector<NeighborRecord>> per_chunk;  // Ret(C_u) per chunk
  std::vector<double> generated_logprob;  // ln p of each generated token
  std::vector<uint32_t> lcp_depths;       // per token of the final sequence
  RetrievedTokens retrieved_padded;       // neighbours as the model saw them
};

// Per-token longest-suffix overlap against the neighbours of the preceding
// chunk: token i of chunk u gets the length of the longest suffix of
// (x_0..x_i) that occurs contiguously in Ret(C_{u-1}). First chunk: 0.
inline std::vector<uint32_t> annotate_overlap(
    const std::vector<TokenId>& tokens, uint32_t m,
    const std::vector<std::vector<NeighborRecord>>& per_chunk) {
  std::vector<uint32_t> depths(tokens.size(), 0);
  const size_t l = (tokens.size() + m - 1) / m;
  for (size_t u = 1; u < l; ++u) {
    if (u - 1 >= per_chunk.size() || per_chunk[u - 1].empty()) continue;
    SuffixAutomaton sa;
    uint32_t sep = 0x40000000u;
    for (const auto& rec : per_chunk[u - 1]) {
      for (TokenId t : rec.neighbor_tokens)
        if (t != kPadToken) sa.extend(t);
      for (TokenId t : rec.continuation_tokens)
        if (t != kPadToken) sa.extend(t);
      sa.extend(sep++);
    }
    sa.reset_stream();
    const size_t begin = u * m;
    const size_t end = std::min(tokens.size(), (u + 1) * m);
    for (size_t i = 0; i < end; ++i) {
      uint32_t len = sa.feed(tokens[i]);
      if (i >= begin) depths[i] = len;
    }
  }
  return depths;
}

// Chunk-wise autoregressive generation: the neighbours of chunk u are
// retrieved exactly once, when the first prediction they may condition is
// made. Greedy mode is deterministic; retrieval never sees the generated
// sequence's (nonexistent) document, so no exclusion applies.
template <typename S>
SampleResult sample(RetroModel<S>& model, const ChunkIndex& index,
                    const FrozenEmbedder& embedder,
                    const std::vector<TokenId>& prompt, uint32_t steps,
                    SampleMode mode = SampleMode::kGreedy,
                    double temperature = 1.0, uint64_t seed = 0,
                    uint32_t k = 0, SearchMode search = SearchMode::kExact,
                    uint32_t nprobe = 8) {
  const ModelConfig& cfg = model.config();
  const uint32_t m = cfg.m;
  if (k == 0) k = cfg.k;
  SampleResult res;
  res.tokens = prompt;
  if (res.tokens.empty()) res.tokens.push_back(kPadToken);  // BOS-free seed
  res.prompt_len = res.tokens.size();
  if (res.prompt_len >= cfg.n)
    throw std::invalid_argument("sample: prompt must be shorter than n");
  if (steps + res.prompt_len > cfg.n) steps = cfg.n - res.prompt_len;

  SplitMix64 rng(seed);
  const bool retrieval = cfg.neighbor_mode != NeighborMode::kOff;
  std::vector<TokenId> chunk(m);

  for (uint32_t g = 0; g < steps; ++g) {
    const size_t t = res.tokens.size();
    // Retrieve for every chunk whose conditioning window has opened.
    if (retrieval && t >= m) {
      const size_t need = (t - m) / m;
      while (res.per_chunk.size() <= need) {
        const size_t u = res.per_chunk.size();
        std::copy_n(res.tokens.begin() + u * m, m, chunk.begin());
        auto q = embedder.embed_chunk(chunk);
        auto qr = index.query(q, k, std::nullopt, search, nprobe);
        while (qr.records.size() < k) {
          NeighborRecord pad;
          pad.neighbor_tokens.assign(m, kPadToken);
          pad.continuation_tokens.assign(m, kPadToken);
          qr.records.push_back(std::move(pad));
        }
        res.per_chunk.push_back(std::move(qr.records));
        ++res.retrieval_calls;
      }
    }

    // Forward over the prefix padded to a chunk multiple.
    const size_t padded_len = (t + m - 1) / m * m;
    std::vector<TokenId> padded(res.tokens);
    padded.resize(padded_len, kPadToken);
    RetrievedTokens ret;
    if (retrieval) {
      ret = RetrievedTokens::zeros(static_cast<uint32_t>(padded_len / m), k,
                                   2 * m);
      for (size_t u = 0; u < res.per_chunk.size() && u < ret.l; ++u)
        for (uint32_t j = 0; j < k; ++j) {
          const auto& rec = res.per_chunk[u][j];
          TokenId* dst = ret.at(static_cast<uint32_t>(u), j);
          std::copy(rec.neighbor_tokens.begin(), rec.neighbor_tokens.end(),
                    dst);
          std::copy(rec.continuation_tokens.begin(),
                    rec.continuation_tokens.end(), dst + m);
        }
    }
    Graph<S> graph;
    graph.grad_enabled = false;
    Tensor<S> logits = model.decoder_forward(graph, padded,
                                             retrieval ? &ret : nullptr);
    const int64_t V = logits.dims[1];
    const S* row = logits.ptr() + (t - 1) * V;

    // Softmax over the last row (base temperature applied for sampling).
    double tau = mode == SampleMode::kTemperature ? temperature : 1.0;
    double mx = row[0];
    for (int64_t j = 1; j < V; ++j) mx = std::max<double>(mx, row[j]);
    std::vector<double> probs(V);
    double z = 0.0;
    for (int64_t j = 0; j < V; ++j) {
      probs[j] = std::exp((static_cast<double>(row[j]) - mx) / tau);
      z += probs[j];
    }
    for (auto& p : probs) p /= z;

    TokenId next = 0;
    if (mode == SampleMode::kGreedy) {
      for (int64_t j = 1; j < V; ++j)
        if (probs[j] > probs[next]) next = static_cast<TokenId>(j);
    } else {
      double u = rng.next_double();
      double acc = 0.0;
      next = static_cast<TokenId>(V - 1);
      for (int64_t j = 0; j < V; ++j) {
        acc += probs[j];
        if (u < acc) {
          next = static_cast<TokenId>(j);
          break;
        }
      }
    }
    // Log-probability under the untempered distribution, for consistency
    // with the training likelihood.
    {
      double z1 = 0.0;
      for (int64_t j = 0; j < V; ++j)
        z1 += std::exp(static_cast<double>(row[j]) - mx);
      res.generated_logprob.push_back(static_cast<double>(row[next]) - mx -
                                      std::log(z1));
    }
    res.tokens.push_back(next);
  }

  // Final padded retrieval view (for likelihood replay and the dump).
  {
    const size_t t = res.tokens.size();
    const size_t padded_len = (t + m - 1) / m * m;
    res.retrieved_padded = RetrievedTokens::zeros(
        static_cast<uint32_t>(padded_len / m), k, 2 * m);
    for (size_t u = 0; u < res.per_chunk.size() && u < res.retrieved_padded.l;
         ++u)
      for (uint32_t j = 0; j < k; ++j) {
        const auto& rec = res.per_chunk[u][j];
        TokenId* dst = res.retrieved_padded.at(static_cast<uint32_t>(u), j);
        std::copy(rec.neighbor_tokens.begin(), rec.neighbor_tokens.end(), dst);
        std::copy(rec.continuation_tokens.begin(),
                  rec.continuation_tokens.end(), dst + m);
      }
  }
  res.text = decode_document(res.tokens);
  res.lcp_depths = annotate_overlap(res.tokens, m, res.per_chunk);
  return res;
}

}  // namespace retrodesk
