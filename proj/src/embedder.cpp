#include "retrodesk/embedder.hpp"

#include <cmath>
#include <stdexcept>

namespace retrodesk {

FrozenEmbedder::FrozenEmbedder(const EmbedderSpec& spec) : spec_(spec) {
  size_t total =
      static_cast<size_t>(kVocabSize) * spec.m * spec.d_emb;
  table_.resize(total);
  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(spec.d_emb));
  // Counter-based generation: entry (t, p, j) depends only on the seed and
  // its own coordinates, never on fill order.
  parallel_for(static_cast<int64_t>(kVocabSize), [&](int64_t t) {
    for (uint32_t p = 0; p < spec_.m; ++p) {
      uint64_t cell = (static_cast<uint64_t>(t) << 32) | p;
      SplitMix64 rng(hash_mix(spec_.seed, cell));
      float* row = table_.data() +
                   (static_cast<size_t>(t) * spec_.m + p) * spec_.d_emb;
      for (uint32_t j = 0; j < spec_.d_emb; ++j)
        row[j] = static_cast<float>(rng.next_gaussian() * inv_sqrt_d);
    }
  });
}

const float* FrozenEmbedder::table_row(TokenId token, uint32_t position) const {
  return table_.data() +
         (static_cast<size_t>(token) * spec_.m + position) * spec_.d_emb;
}

std::vector<float> FrozenEmbedder::embed_chunk(
    const std::vector<TokenId>& tokens) const {
  if (tokens.size() != spec_.m)
    throw std::invalid_argument("embed_chunk: expected exactly m tokens");
  std::vector<double> acc(spec_.d_emb, 0.0);
  for (uint32_t p = 0; p < spec_.m; ++p) {
    if (tokens[p] >= kVocabSize)
      throw std::invalid_argument("embed_chunk: token id out of range");
    const float* row = table_row(tokens[p], p);
    for (uint32_t j = 0; j < spec_.d_emb; ++j) acc[j] += row[j];
  }
  std::vector<float> out(spec_.d_emb);
  double inv_m = 1.0 / spec_.m;
  for (uint32_t j = 0; j < spec_.d_emb; ++j)
    out[j] = static_cast<float>(acc[j] * inv_m);
  return out;
}

}  // namespace retrodesk
