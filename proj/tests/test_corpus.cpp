#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "retrodesk/corpus.hpp"
#include "retrodesk/minhash.hpp"
#include "retrodesk/tokenizer.hpp"

using namespace retrodesk;

namespace {

std::string random_bytes(SplitMix64& rng, size_t len) {
  std::string s(len, '\0');
  for (auto& c : s) c = static_cast<char>(rng.next_below(256));
  return s;
}

Document make_doc(uint64_t id, std::vector<TokenId> tokens) {
  Document d;
  d.doc_id = id;
  d.name = "doc" + std::to_string(id);
  d.tokens = std::move(tokens);
  return d;
}

std::vector<TokenId> random_tokens(SplitMix64& rng, size_t len) {
  std::vector<TokenId> t(len);
  for (auto& v : t) v = 1 + static_cast<TokenId>(rng.next_below(256));
  return t;
}

}  // namespace

TEST_CASE("tokenize is the byte identity") {
  CHECK(tokenize("").empty());
  auto t = tokenize("Ab");
  REQUIRE(t.size() == 2);
  CHECK(t[0] == 65);
  CHECK(t[1] == 98);
}

TEST_CASE("tokenize round-trips arbitrary byte strings") {
  SplitMix64 rng(99);
  for (int i = 0; i < 1000; ++i) {
    std::string s = random_bytes(rng, rng.next_below(200));
    CHECK(detokenize(tokenize(s)) == s);
    CHECK(decode_document(encode_document(s)) == s);
  }
}

TEST_CASE("document encoding reserves id 0 for padding") {
  auto t = encode_document("Ab");
  REQUIRE(t.size() == 2);
  CHECK(t[0] == 66);
  CHECK(t[1] == 99);
  for (TokenId v : encode_document(std::string(1, '\0'))) CHECK(v != kPadToken);
}

TEST_CASE("split_into_chunks basic shapes") {
  SplitMix64 rng(5);
  SUBCASE("n=12, m=4 gives 3 chunks") {
    auto chunks = split_into_chunks(random_tokens(rng, 12), 4);
    CHECK(chunks.size() == 3);
  }
  SUBCASE("n=2048, m=64 gives 32 chunks") {
    auto chunks = split_into_chunks(random_tokens(rng, 2048), 64);
    CHECK(chunks.size() == 32);
  }
  SUBCASE("n == m gives one chunk equal to the input") {
    auto tokens = random_tokens(rng, 16);
    auto chunks = split_into_chunks(tokens, 16);
    REQUIRE(chunks.size() == 1);
    CHECK(chunks[0].tokens == tokens);
    CHECK(chunks[0].byte_len == 16);
  }
  SUBCASE("m == 0 is rejected") {
    CHECK_THROWS_AS(split_into_chunks(random_tokens(rng, 4), 0),
                    std::invalid_argument);
  }
}

TEST_CASE("chunking preserves content for random (len, m)") {
  SplitMix64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    size_t len = 1 + rng.next_below(300);
    uint32_t m = 1 + static_cast<uint32_t>(rng.next_below(40));
    auto tokens = random_tokens(rng, len);
    auto chunks = split_into_chunks(tokens, m);
    CHECK(chunks.size() == (len + m - 1) / m);
    std::vector<TokenId> flat;
    for (size_t u = 0; u < chunks.size(); ++u) {
      CHECK(chunks[u].chunk_index == u);
      CHECK(chunks[u].tokens.size() == m);
      for (TokenId t : chunks[u].tokens)
        if (t != kPadToken) flat.push_back(t);
    }
    CHECK(flat == tokens);
  }
}

TEST_CASE("minhash identical and disjoint documents") {
  MinHasher hasher(256);
  SplitMix64 rng(11);
  auto tokens = random_tokens(rng, 120);
  auto a = hasher.signature(tokens);
  auto b = hasher.signature(tokens);
  CHECK(a.values == b.values);
  CHECK(estimate_jaccard(a, b) == 1.0);

  // Token-disjoint documents: tokens drawn from disjoint ranges.
  std::vector<TokenId> lo(150), hi(150);
  for (size_t i = 0; i < lo.size(); ++i) {
    lo[i] = 1 + static_cast<TokenId>(rng.next_below(100));
    hi[i] = 120 + static_cast<TokenId>(rng.next_below(100));
  }
  CHECK(estimate_jaccard(hasher.signature(lo), hasher.signature(hi)) == 0.0);
}

TEST_CASE("minhash components are per-family minima over the shingle set") {
  MinHasher hasher(64);
  SplitMix64 rng(19);
  auto tokens = random_tokens(rng, 90);
  auto sig = hasher.signature(tokens);
  auto shingles = hasher.shingle_set(tokens);
  REQUIRE(!shingles.empty());
  for (uint32_t i = 0; i < 64; ++i) {
    uint64_t want = std::numeric_limits<uint64_t>::max();
    for (uint64_t s : shingles) want = std::min(want, hasher.family_hash(i, s));
    CHECK(sig.values[i] == want);
  }
}

TEST_CASE("minhash signals short documents") {
  MinHasher hasher(64);
  auto sig = hasher.signature(std::vector<TokenId>{1, 2, 3});
  CHECK(sig.empty_shingles);
  CHECK(sig.values.size() == 64);
  auto other = hasher.signature(std::vector<TokenId>(50, 7));
  CHECK(estimate_jaccard(sig, other) == 0.0);
}

TEST_CASE("minhash rejects mismatched configurations") {
  MinHasher a(64), b(128);
  SplitMix64 rng(3);
  auto tokens = random_tokens(rng, 60);
  CHECK_THROWS_AS(estimate_jaccard(a.signature(tokens), b.signature(tokens)),
                  std::invalid_argument);
}

TEST_CASE("minhash estimate tracks the exact Jaccard oracle") {
  const uint32_t H = 256;
  MinHasher hasher(H);
  SplitMix64 rng(13);
  // Two 200-token documents sharing roughly half their shingles.
  auto a = random_tokens(rng, 200);
  auto b = a;
  for (size_t i = 100; i < b.size(); ++i)
    b[i] = 1 + static_cast<TokenId>(rng.next_below(256));
  double exact = exact_jaccard(hasher.shingle_set(a), hasher.shingle_set(b));
  CHECK(exact > 0.1);
  CHECK(exact < 0.9);
  double est = estimate_jaccard(hasher.signature(a), hasher.signature(b));
  double sigma = std::sqrt(exact * (1 - exact) / H);
  CHECK(std::abs(est - exact) <= 3 * sigma);
}

TEST_CASE("minhash unbiasedness over 1000 random pairs") {
  const uint32_t H = 256;
  MinHasher hasher(H);
  SplitMix64 rng(17);
  double err_sum = 0.0;
  double var_sum = 0.0;
  for (int i = 0; i < 1000; ++i) {
    size_t len = 60 + rng.next_below(120);
    auto a = random_tokens(rng, len);
    auto b = a;
    size_t keep = rng.next_below(len + 1);
    for (size_t j = keep; j < b.size(); ++j)
      b[j] = 1 + static_cast<TokenId>(rng.next_below(256));
    double exact = exact_jaccard(hasher.shingle_set(a), hasher.shingle_set(b));
    double est = estimate_jaccard(hasher.signature(a), hasher.signature(b));
    err_sum += est - exact;
    var_sum += exact * (1 - exact) / H;
  }
  double mean_err = err_sum / 1000.0;
  double sigma_mean = std::sqrt(var_sum) / 1000.0;
  CHECK(std::abs(mean_err) <= 3 * sigma_mean + 1e-6);
}

TEST_CASE("dedup removes verbatim copies and keeps disjoint corpora") {
  MinHasher hasher(128);
  SplitMix64 rng(23);
  std::vector<Document> train, eval_docs;
  for (uint64_t i = 0; i < 10; ++i)
    train.push_back(make_doc(i, random_tokens(rng, 150)));
  eval_docs.push_back(make_doc(100, train[4].tokens));  // verbatim copy

  auto kept = dedup_filter(train, eval_docs, hasher, 0.8);
  REQUIRE(kept.size() == 9);
  for (const auto& d : kept) CHECK(d.doc_id != 4);

  // Disjoint evaluation set leaves training untouched.
  std::vector<Document> fresh_eval;
  fresh_eval.push_back(make_doc(200, random_tokens(rng, 150)));
  CHECK(dedup_filter(train, fresh_eval, hasher, 0.8).size() == train.size());
}

TEST_CASE("dedup agrees with the exact-Jaccard oracle on planted overlaps") {
  const double threshold = 0.8;
  MinHasher hasher(256);
  SplitMix64 rng(29);
  std::vector<Document> eval_docs;
  for (uint64_t i = 0; i < 5; ++i)
    eval_docs.push_back(make_doc(1000 + i, random_tokens(rng, 180)));

  // 50 train docs: verbatim/near copies of eval docs, and fresh ones.
  std::vector<Document> train;
  for (uint64_t i = 0; i < 50; ++i) {
    if (i % 5 == 0) {
      auto tokens = eval_docs[i / 5 % eval_docs.size()].tokens;
      size_t mutate = (i % 10 == 0) ? 0 : 4;  // exact copy or near copy
      for (size_t jm = 0; jm < mutate; ++jm)
        tokens[tokens.size() - 1 - jm] =
            1 + static_cast<TokenId>(rng.next_below(256));
      train.push_back(make_doc(i, tokens));
    } else {
      train.push_back(make_doc(i, random_tokens(rng, 180)));
    }
  }

  // Oracle removal set by exact Jaccard over explicit shingle sets.
  std::set<uint64_t> oracle_removed;
  bool any_in_noise_band = false;
  for (const auto& t : train) {
    for (const auto& e : eval_docs) {
      double j = exact_jaccard(hasher.shingle_set(t.tokens),
                               hasher.shingle_set(e.tokens));
      if (j > threshold - 0.05 && j < threshold + 0.05) any_in_noise_band = true;
      if (j >= threshold) oracle_removed.insert(t.doc_id);
    }
  }
  REQUIRE_FALSE(any_in_noise_band);  // construction stays clear of the band

  auto kept = dedup_filter(train, eval_docs, hasher, threshold);
  std::set<uint64_t> removed;
  for (const auto& t : train) removed.insert(t.doc_id);
  for (const auto& kcopy : kept) removed.erase(kcopy.doc_id);
  CHECK(removed == oracle_removed);
}

TEST_CASE("jsonl and token cache round-trip") {
  SplitMix64 rng(31);
  std::vector<Document> docs;
  for (uint64_t i = 0; i < 5; ++i) {
    Document d;
    d.doc_id = i;
    d.name = "doc_" + std::to_string(i);
    d.text = "text with bytes #" + std::to_string(rng.next());
    d.tokens = encode_document(d.text);
    docs.push_back(d);
  }
  save_jsonl("corpus_test.jsonl", docs);
  auto loaded = load_jsonl("corpus_test.jsonl");
  REQUIRE(loaded.size() == docs.size());
  for (size_t i = 0; i < docs.size(); ++i) {
    CHECK(loaded[i].name == docs[i].name);
    CHECK(loaded[i].text == docs[i].text);
    CHECK(loaded[i].tokens == docs[i].tokens);
  }

  save_tokens("corpus_test.bin", docs);
  auto cached = load_tokens("corpus_test.bin");
  REQUIRE(cached.size() == docs.size());
  for (size_t i = 0; i < docs.size(); ++i) {
    CHECK(cached[i].doc_id == docs[i].doc_id);
    CHECK(cached[i].name == docs[i].name);
    CHECK(cached[i].tokens == docs[i].tokens);
    CHECK(cached[i].text == docs[i].text);
  }
}

TEST_CASE("token cache rejects a corrupt header") {
  {
    auto os = open_out("corpus_bad.bin");
    os << "NOPE garbage";
  }
  CHECK_THROWS_AS(load_tokens("corpus_bad.bin"), FormatError);
}

TEST_CASE("windows split documents without crossing them") {
  SplitMix64 rng(37);
  std::vector<Document> docs;
  docs.push_back(make_doc(0, random_tokens(rng, 100)));
  docs.push_back(make_doc(1, random_tokens(rng, 64)));
  auto windows = make_windows(docs, 64);
  REQUIRE(windows.size() == 3);
  CHECK(windows[0].doc_id == 0);
  CHECK(windows[0].real_len == 64);
  CHECK(windows[1].real_len == 36);
  CHECK(windows[1].tokens[36] == kPadToken);
  CHECK(windows[2].doc_id == 1);

  // Sliding windows score each token exactly once.
  auto slid = make_windows(docs, 64, 32);
  size_t scored = 0;
  for (const auto& w : slid)
    for (size_t p = w.scored_from; p < w.tokens.size(); ++p)
      if (w.tokens[p] != kPadToken) ++scored;
  CHECK(scored == 100 + 64 - 2);  // every token except each doc's first
}
