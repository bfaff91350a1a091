#pragma once

#include <cstdint>
#include <unordered_set>
#include <vector>

#include "retrodesk/corpus.hpp"

namespace retrodesk {

struct MinHashSignature {
  uint32_t num_hashes = 0;
  uint64_t seed = 0;
  bool empty_shingles = false;   // document shorter than the shingle width
  std::vector<uint64_t> values;  // per-hash minima, length == num_hashes
};

// H independent multiply-shift hash families with fixed seeds. Shingles are
// token 13-grams hashed to 64 bits.
class MinHasher {
 public:
  explicit MinHasher(uint32_t num_hashes = 256, uint32_t shingle_k = 13,
                     uint64_t seed = 0x5eed5eed5eed5eedull);

  MinHashSignature signature(const std::vector<TokenId>& tokens) const;
  MinHashSignature signature(const Document& doc) const {
    return signature(doc.tokens);
  }

  // Shingle hash set, the ground truth for the Jaccard estimate.
  std::unordered_set<uint64_t> shingle_set(
      const std::vector<TokenId>& tokens) const;

  // Value of the i-th hash family on one shingle; signature components are
  // the per-family minima over the shingle set.
  uint64_t family_hash(uint32_t i, uint64_t shingle) const {
    return mul_[i] * shingle + add_[i];
  }

  uint32_t num_hashes() const { return num_hashes_; }
  uint32_t shingle_k() const { return shingle_k_; }
  uint64_t seed() const { return seed_; }

 private:
  uint32_t num_hashes_;
  uint32_t shingle_k_;
  uint64_t seed_;
  std::vector<uint64_t> mul_;  // odd multipliers
  std::vector<uint64_t> add_;
};

// Fraction of agreeing components; 0 if either side has no shingles.
// Throws std::invalid_argument on mismatched (H, seed).
double estimate_jaccard(const MinHashSignature& a, const MinHashSignature& b);

double exact_jaccard(const std::unordered_set<uint64_t>& a,
                     const std::unordered_set<uint64_t>& b);

// Keeps the train documents whose estimated Jaccard against every eval
// document is below the threshold.
std::vector<Document> dedup_filter(const std::vector<Document>& train,
                                   const std::vector<Document>& eval_docs,
                                   const MinHasher& hasher,
                                   double threshold = 0.8);

}  // namespace retrodesk
