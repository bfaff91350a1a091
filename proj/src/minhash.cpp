#include "retrodesk/minhash.hpp"

#include <limits>
#include <stdexcept>

namespace retrodesk {

MinHasher::MinHasher(uint32_t num_hashes, uint32_t shingle_k, uint64_t seed)
    : num_hashes_(num_hashes), shingle_k_(shingle_k), seed_(seed) {
  SplitMix64 rng(seed);
  mul_.resize(num_hashes);
  add_.resize(num_hashes);
  for (uint32_t i = 0; i < num_hashes; ++i) {
    mul_[i] = rng.next() | 1ull;
    add_[i] = rng.next();
  }
}

namespace {
// Rolling-free shingle hash: SplitMix chain over the k token ids.
uint64_t shingle_hash(const TokenId* tokens, uint32_t k) {
  uint64_t h = 0x9e3779b97f4a7c15ull;
  for (uint32_t i = 0; i < k; ++i) {
    h ^= tokens[i] + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    SplitMix64 mix(h);
    h = mix.next();
  }
  return h;
}
}  // namespace

std::unordered_set<uint64_t> MinHasher::shingle_set(
    const std::vector<TokenId>& tokens) const {
  std::unordered_set<uint64_t> out;
  if (tokens.size() < shingle_k_) return out;
  size_t count = tokens.size() - shingle_k_ + 1;
  out.reserve(count);
  for (size_t i = 0; i < count; ++i)
    out.insert(shingle_hash(tokens.data() + i, shingle_k_));
  return out;
}

MinHashSignature MinHasher::signature(const std::vector<TokenId>& tokens) const {
  MinHashSignature sig;
  sig.num_hashes = num_hashes_;
  sig.seed = seed_;
  sig.values.assign(num_hashes_, std::numeric_limits<uint64_t>::max());
  if (tokens.size() < shingle_k_) {
    sig.empty_shingles = true;
    return sig;
  }
  size_t count = tokens.size() - shingle_k_ + 1;
  for (size_t i = 0; i < count; ++i) {
    uint64_t s = shingle_hash(tokens.data() + i, shingle_k_);
    for (uint32_t h = 0; h < num_hashes_; ++h) {
      uint64_t v = mul_[h] * s + add_[h];
      if (v < sig.values[h]) sig.values[h] = v;
    }
  }
  return sig;
}

double estimate_jaccard(const MinHashSignature& a, const MinHashSignature& b) {
  if (a.num_hashes != b.num_hashes || a.seed != b.seed)
    throw std::invalid_argument("estimate_jaccard: mismatched signature config");
  if (a.empty_shingles || b.empty_shingles) return 0.0;
  uint32_t agree = 0;
  for (uint32_t i = 0; i < a.num_hashes; ++i)
    if (a.values[i] == b.values[i]) ++agree;
  return static_cast<double>(agree) / a.num_hashes;
}

double exact_jaccard(const std::unordered_set<uint64_t>& a,
                     const std::unordered_set<uint64_t>& b) {
  if (a.empty() || b.empty()) return 0.0;
  const auto& small = a.size() <= b.size() ? a : b;
  const auto& big = a.size() <= b.size() ? b : a;
  size_t inter = 0;
  for (uint64_t v : small)
    if (big.count(v)) ++inter;
  return static_cast<double>(inter) /
         static_cast<double>(a.size() + b.size() - inter);
}

std::vector<Document> dedup_filter(const std::vector<Document>& train,
                                   const std::vector<Document>& eval_docs,
                                   const MinHasher& hasher, double threshold) {
  std::vector<MinHashSignature> eval_sigs(eval_docs.size());
  parallel_for(static_cast<int64_t>(eval_docs.size()), [&](int64_t i) {
    eval_sigs[i] = hasher.signature(eval_docs[i]);
  });
  std::vector<MinHashSignature> train_sigs(train.size());
  parallel_for(static_cast<int64_t>(train.size()), [&](int64_t i) {
    train_sigs[i] = hasher.signature(train[i]);
  });

  std::vector<char> keep(train.size(), 1);
  parallel_for(static_cast<int64_t>(train.size()), [&](int64_t i) {
    for (const auto& es : eval_sigs) {
      if (estimate_jaccard(train_sigs[i], es) >= threshold) {
        keep[i] = 0;
        break;
      }
    }
  });

  std::vector<Document> out;
  out.reserve(train.size());
  for (size_t i = 0; i < train.size(); ++i)
    if (keep[i]) out.push_back(train[i]);
  return out;
}

}  // namespace retrodesk
