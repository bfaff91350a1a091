#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <thread>

#include "retrodesk/chunk_index.hpp"

using namespace retrodesk;

namespace {

// Independent full-scan reference with the same tie order contract.
struct BruteEntry {
  double dist;
  uint64_t doc;
  uint32_t chunk;
  size_t idx;
};

std::vector<BruteEntry> brute_force_knn(const ChunkIndex& index,
                                        const std::vector<float>& q,
                                        uint32_t k,
                                        std::optional<uint64_t> exclude) {
  std::vector<BruteEntry> all;
  for (size_t i = 0; i < index.size(); ++i) {
    NeighborRecord r = index.entry(i);
    if (exclude && r.source_doc_id == *exclude) continue;
    double d = squared_l2(q.data(), index.key(i), index.dim());
    all.push_back({d, r.source_doc_id, r.source_chunk_index, i});
  }
  std::sort(all.begin(), all.end(), [](const BruteEntry& a, const BruteEntry& b) {
    if (a.dist != b.dist) return a.dist < b.dist;
    if (a.doc != b.doc) return a.doc < b.doc;
    return a.chunk < b.chunk;
  });
  if (all.size() > k) all.resize(k);
  return all;
}

std::vector<Chunk> synthetic_chunks(SplitMix64& rng, size_t docs,
                                    size_t chunks_per_doc, uint32_t m,
                                    uint32_t alphabet = 256) {
  std::vector<Chunk> out;
  for (size_t d = 0; d < docs; ++d) {
    std::vector<TokenId> tokens(chunks_per_doc * m);
    for (auto& t : tokens)
      t = 1 + static_cast<TokenId>(rng.next_below(alphabet));
    auto chunks = split_into_chunks(tokens, m);
    for (auto& c : chunks) {
      c.doc_id = d;
      out.push_back(std::move(c));
    }
  }
  return out;
}

}  // namespace

TEST_CASE("build wires continuations from the next chunk") {
  FrozenEmbedder emb(EmbedderSpec{.seed = 1, .d_emb = 16, .m = 4});
  std::vector<TokenId> tokens;
  for (TokenId t = 1; t <= 12; ++t) tokens.push_back(t);
  auto chunks = split_into_chunks(tokens, 4);
  for (auto& c : chunks) c.doc_id = 9;
  auto index = ChunkIndex::build(chunks, emb);
  REQUIRE(index.size() == 3);

  auto e0 = index.entry(0);
  CHECK(e0.neighbor_tokens == std::vector<TokenId>{1, 2, 3, 4});
  CHECK(e0.continuation_tokens == std::vector<TokenId>{5, 6, 7, 8});
  auto e2 = index.entry(2);
  CHECK(e2.continuation_tokens == std::vector<TokenId>(4, kPadToken));
}

TEST_CASE("empty input is rejected") {
  FrozenEmbedder emb(EmbedderSpec{.seed = 1, .d_emb = 8, .m = 4});
  CHECK_THROWS_AS(ChunkIndex::build({}, emb), std::invalid_argument);
}

TEST_CASE("posting lists partition the entries") {
  SplitMix64 rng(21);
  FrozenEmbedder emb(EmbedderSpec{.seed = 2, .d_emb = 16, .m = 8});
  auto chunks = synthetic_chunks(rng, 125, 8, 8);
  REQUIRE(chunks.size() == 1000);
  auto index = ChunkIndex::build(chunks, emb);
  std::set<uint32_t> seen;
  size_t total = 0;
  for (const auto& list : index.posting_lists()) {
    total += list.size();
    for (uint32_t e : list) CHECK(seen.insert(e).second);
  }
  CHECK(total == 1000);
}

TEST_CASE("self-match and same-document exclusion") {
  SplitMix64 rng(22);
  FrozenEmbedder emb(EmbedderSpec{.seed = 3, .d_emb = 24, .m = 8});
  auto chunks = synthetic_chunks(rng, 20, 4, 8);
  auto index = ChunkIndex::build(chunks, emb);

  auto q = emb.embed_chunk(chunks[10].tokens);
  auto res = index.query(q, 3);
  REQUIRE(!res.records.empty());
  CHECK(res.records[0].distance == 0.0f);
  CHECK(res.records[0].source_doc_id == chunks[10].doc_id);
  CHECK(res.records[0].source_chunk_index == chunks[10].chunk_index);

  auto excl = index.query(q, static_cast<uint32_t>(index.size()),
                          chunks[10].doc_id);
  for (const auto& r : excl.records)
    CHECK(r.source_doc_id != chunks[10].doc_id);
  CHECK(excl.short_of_k);  // the excluded document's entries are missing
}

TEST_CASE("exact queries equal brute force including tie order") {
  SplitMix64 rng(23);
  // Small token alphabet forces duplicate chunks, hence distance ties.
  FrozenEmbedder emb(EmbedderSpec{.seed = 4, .d_emb = 16, .m = 4});
  auto chunks = synthetic_chunks(rng, 250, 8, 4, 3);
  REQUIRE(chunks.size() == 2000);
  auto index = ChunkIndex::build(chunks, emb);

  for (int trial = 0; trial < 500; ++trial) {
    std::vector<TokenId> probe(4);
    for (auto& t : probe) t = 1 + static_cast<TokenId>(rng.next_below(3));
    auto q = emb.embed_chunk(probe);
    std::optional<uint64_t> exclude;
    if (trial % 3 == 0) exclude = rng.next_below(250);
    auto got = index.query(q, 10, exclude);
    auto want = brute_force_knn(index, q, 10, exclude);
    REQUIRE(got.records.size() == want.size());
    for (size_t i = 0; i < want.size(); ++i) {
      CHECK(got.records[i].source_doc_id == want[i].doc);
      CHECK(got.records[i].source_chunk_index == want[i].chunk);
      CHECK(got.records[i].distance ==
            doctest::Approx(want[i].dist).epsilon(1e-12));
    }
    // Monotone distances.
    for (size_t i = 1; i < got.records.size(); ++i)
      CHECK(got.records[i - 1].distance <= got.records[i].distance);
  }
}

TEST_CASE("dimension mismatch is rejected") {
  SplitMix64 rng(24);
  FrozenEmbedder emb(EmbedderSpec{.seed = 5, .d_emb = 8, .m = 4});
  auto chunks = synthetic_chunks(rng, 4, 2, 4);
  auto index = ChunkIndex::build(chunks, emb);
  std::vector<float> bad(7, 0.0f);
  CHECK_THROWS_AS(index.query(bad, 1), std::invalid_argument);
}

TEST_CASE("ivf recall on separated clusters") {
  // 8 well-separated Gaussian clusters in embedding space, built by planting
  // 8 distinct chunk contents and jittering tokens slightly.
  SplitMix64 rng(25);
  const uint32_t m = 8;
  FrozenEmbedder emb(EmbedderSpec{.seed = 6, .d_emb = 16, .m = m});
  std::vector<Chunk> chunks;
  std::vector<std::vector<TokenId>> protos(8);
  for (auto& p : protos) {
    p.resize(m);
    for (auto& t : p) t = 1 + static_cast<TokenId>(rng.next_below(256));
  }
  for (size_t i = 0; i < 800; ++i) {
    Chunk c;
    c.doc_id = i;
    c.chunk_index = 0;
    c.tokens = protos[i % 8];
    c.tokens[rng.next_below(m)] = 1 + static_cast<TokenId>(rng.next_below(4));
    c.byte_len = m;
    chunks.push_back(std::move(c));
  }
  auto index = ChunkIndex::build(chunks, emb, /*centroids=*/8);
  REQUIRE(index.centroid_count() == 8);

  std::vector<std::vector<float>> queries;
  for (int i = 0; i < 64; ++i) {
    auto probe = protos[i % 8];
    probe[rng.next_below(m)] = 1 + static_cast<TokenId>(rng.next_below(4));
    queries.push_back(emb.embed_chunk(probe));
  }
  CHECK(recall_at_k(index, queries, 10, 1) >= 0.9);
  CHECK(recall_at_k(index, queries, 10, index.centroid_count()) == 1.0);
}

TEST_CASE("k beyond posting list sizes still merges correctly") {
  SplitMix64 rng(26);
  FrozenEmbedder emb(EmbedderSpec{.seed = 7, .d_emb = 8, .m = 4});
  auto chunks = synthetic_chunks(rng, 10, 3, 4);
  auto index = ChunkIndex::build(chunks, emb, /*centroids=*/5);
  std::vector<TokenId> probe{1, 2, 3, 4};
  auto q = emb.embed_chunk(probe);
  uint32_t k = static_cast<uint32_t>(index.size());
  double r = recall_at_k(index, {q}, k, index.centroid_count());
  CHECK(r == 1.0);
}

TEST_CASE("index file round-trips") {
  SplitMix64 rng(27);
  FrozenEmbedder emb(EmbedderSpec{.seed = 8, .d_emb = 12, .m = 4});
  auto chunks = synthetic_chunks(rng, 12, 4, 4);
  auto index = ChunkIndex::build(chunks, emb);
  index.save("index_test.rchx");
  auto loaded = ChunkIndex::load("index_test.rchx");
  REQUIRE(loaded.size() == index.size());
  CHECK(loaded.embedder_spec() == index.embedder_spec());
  CHECK(loaded.centroid_count() == index.centroid_count());
  CHECK(loaded.default_k() == index.default_k());
  std::vector<TokenId> probe{5, 6, 7, 8};
  auto q = emb.embed_chunk(probe);
  auto a = index.query(q, 7);
  auto b = loaded.query(q, 7);
  REQUIRE(a.records.size() == b.records.size());
  for (size_t i = 0; i < a.records.size(); ++i)
    CHECK(a.records[i] == b.records[i]);

  // Stored keys equal the frozen embedding of their N tokens.
  for (size_t i = 0; i < loaded.size(); i += 7) {
    auto rec = loaded.entry(i);
    auto want = emb.embed_chunk(rec.neighbor_tokens);
    for (uint32_t j = 0; j < loaded.dim(); ++j)
      CHECK(loaded.key(i)[j] == want[j]);
  }
}

TEST_CASE("precomputed neighbours exclude the window's own document") {
  SplitMix64 rng(28);
  const uint32_t m = 4, n = 16;
  FrozenEmbedder emb(EmbedderSpec{.seed = 9, .d_emb = 12, .m = m});
  std::vector<Document> docs;
  for (uint64_t i = 0; i < 10; ++i) {
    Document d;
    d.doc_id = i;
    d.name = "d" + std::to_string(i);
    d.tokens.resize(48);
    for (auto& t : d.tokens) t = 1 + static_cast<TokenId>(rng.next_below(6));
    docs.push_back(std::move(d));
  }
  std::vector<Chunk> chunks;
  for (const auto& d : docs)
    for (auto& c : split_into_chunks(d, m)) chunks.push_back(std::move(c));
  auto index = ChunkIndex::build(chunks, emb);
  auto windows = make_windows(docs, n);
  REQUIRE(windows.size() == 30);

  auto file = precompute_neighbors(windows, index, emb, 2,
                                   SearchMode::kExact);
  REQUIRE(file.sequences.size() == windows.size());
  size_t records = 0;
  for (size_t w = 0; w < windows.size(); ++w) {
    const auto& seq = file.sequences[w];
    CHECK(seq.doc_id == windows[w].doc_id);
    records += seq.records.size();
    for (const auto& r : seq.records)
      CHECK(r.source_doc_id != windows[w].doc_id);
  }
  CHECK(records == windows.size() * (n / m) * 2);

  save_neighbors("neighbors_test.rnbr", file);
  auto loaded = load_neighbors("neighbors_test.rnbr");
  REQUIRE(loaded.sequences.size() == file.sequences.size());
  CHECK(loaded.k == file.k);
  CHECK(loaded.m == file.m);
  for (size_t w = 0; w < file.sequences.size(); ++w) {
    CHECK(loaded.sequences[w].doc_id == file.sequences[w].doc_id);
    CHECK(loaded.sequences[w].window_index == file.sequences[w].window_index);
    REQUIRE(loaded.sequences[w].records.size() ==
            file.sequences[w].records.size());
    for (size_t i = 0; i < file.sequences[w].records.size(); ++i)
      CHECK(loaded.sequences[w].records[i] == file.sequences[w].records[i]);
  }
}

TEST_CASE("the built index is immutable and safe for concurrent queries") {
  SplitMix64 rng(30);
  FrozenEmbedder emb(EmbedderSpec{.seed = 11, .d_emb = 16, .m = 4});
  auto chunks = synthetic_chunks(rng, 50, 4, 4);
  auto index = ChunkIndex::build(chunks, emb);
  std::vector<std::vector<float>> queries;
  for (int i = 0; i < 16; ++i) {
    std::vector<TokenId> probe(4);
    for (auto& t : probe) t = 1 + static_cast<TokenId>(rng.next_below(256));
    queries.push_back(emb.embed_chunk(probe));
  }
  std::vector<QueryResult> serial;
  for (const auto& q : queries) serial.push_back(index.query(q, 5));

  std::vector<QueryResult> threaded(queries.size());
  std::vector<std::thread> pool;
  for (int w = 0; w < 4; ++w)
    pool.emplace_back([&, w] {
      for (size_t i = w; i < queries.size(); i += 4)
        threaded[i] = index.query(queries[i], 5);
    });
  for (auto& t : pool) t.join();
  for (size_t i = 0; i < queries.size(); ++i) {
    REQUIRE(threaded[i].records.size() == serial[i].records.size());
    for (size_t j = 0; j < serial[i].records.size(); ++j)
      CHECK(threaded[i].records[j] == serial[i].records[j]);
  }
}

TEST_CASE("fuzzed exclusion soundness") {
  SplitMix64 rng(29);
  FrozenEmbedder emb(EmbedderSpec{.seed = 10, .d_emb = 8, .m = 4});
  auto chunks = synthetic_chunks(rng, 30, 4, 4, 8);
  auto index = ChunkIndex::build(chunks, emb);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<TokenId> probe(4);
    for (auto& t : probe) t = 1 + static_cast<TokenId>(rng.next_below(8));
    uint64_t excl = rng.next_below(30);
    auto mode = trial % 2 == 0 ? SearchMode::kExact : SearchMode::kApproximate;
    auto res = index.query(emb.embed_chunk(probe), 5, excl, mode, 2);
    for (const auto& r : res.records) CHECK(r.source_doc_id != excl);
  }
}
