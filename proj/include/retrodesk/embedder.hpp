#pragma once

#include <cstdint>
#include <vector>

#include "retrodesk/common.hpp"

namespace retrodesk {

// Self-describing embedder parameters, persisted in index headers so an
// index carries everything needed to reproduce its keys.
struct EmbedderSpec {
  uint64_t seed = 0xe3bedde5ull;
  uint32_t d_emb = 64;
  uint32_t m = 64;  // chunk length the embedder accepts

  bool operator==(const EmbedderSpec&) const = default;
};

// Frozen chunk embedder: a fixed Gaussian projection table indexed by
// (token, position), mean-pooled over the chunk. Immutable after
// construction; concurrent reads are safe.
class FrozenEmbedder {
 public:
  explicit FrozenEmbedder(const EmbedderSpec& spec);

  // Mean over positions of the per-(token, position) table rows.
  // Throws std::invalid_argument unless tokens.size() == m.
  std::vector<float> embed_chunk(const std::vector<TokenId>& tokens) const;

  const EmbedderSpec& spec() const { return spec_; }

  // Direct table access (row for one token at one position); used by the
  // mean-pooling oracle checks.
  const float* table_row(TokenId token, uint32_t position) const;

 private:
  EmbedderSpec spec_;
  std::vector<float> table_;  // [vocab][m][d_emb]
};

inline double squared_l2(const float* a, const float* b, size_t d) {
  double acc = 0.0;
  for (size_t i = 0; i < d; ++i) {
    double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += diff * diff;
  }
  return acc;
}

}  // namespace retrodesk
