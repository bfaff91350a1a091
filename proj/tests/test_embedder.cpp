#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "retrodesk/embedder.hpp"

using namespace retrodesk;

namespace {
std::vector<TokenId> random_chunk(SplitMix64& rng, uint32_t m) {
  std::vector<TokenId> t(m);
  for (auto& v : t) v = 1 + static_cast<TokenId>(rng.next_below(256));
  return t;
}
}  // namespace

TEST_CASE("embedding is deterministic and frozen") {
  EmbedderSpec spec{.seed = 0xfeed, .d_emb = 32, .m = 16};
  FrozenEmbedder a(spec), b(spec);
  SplitMix64 rng(1);
  auto chunk = random_chunk(rng, 16);
  auto e1 = a.embed_chunk(chunk);
  auto e2 = a.embed_chunk(chunk);
  auto e3 = b.embed_chunk(chunk);
  CHECK(e1 == e2);
  CHECK(e1 == e3);
  for (float v : e1) CHECK(std::isfinite(v));
}

TEST_CASE("wrong chunk length is rejected") {
  FrozenEmbedder emb(EmbedderSpec{.seed = 1, .d_emb = 8, .m = 4});
  CHECK_THROWS_AS(emb.embed_chunk({1, 2, 3}), std::invalid_argument);
}

TEST_CASE("mean pooling matches the explicit loop oracle") {
  EmbedderSpec spec{.seed = 0xabc, .d_emb = 24, .m = 8};
  FrozenEmbedder emb(spec);
  SplitMix64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto chunk = random_chunk(rng, spec.m);
    auto got = emb.embed_chunk(chunk);
    for (uint32_t j = 0; j < spec.d_emb; ++j) {
      double acc = 0.0;
      for (uint32_t p = 0; p < spec.m; ++p)
        acc += emb.table_row(chunk[p], p)[j];
      CHECK(got[j] == static_cast<float>(acc / spec.m));
    }
  }
}

TEST_CASE("constant chunk equals the position-summed row pattern") {
  EmbedderSpec spec{.seed = 0x123, .d_emb = 16, .m = 6};
  FrozenEmbedder emb(spec);
  std::vector<TokenId> chunk(spec.m, 65);
  auto got = emb.embed_chunk(chunk);
  for (uint32_t j = 0; j < spec.d_emb; ++j) {
    double acc = 0.0;
    for (uint32_t p = 0; p < spec.m; ++p) acc += emb.table_row(65, p)[j];
    CHECK(got[j] == static_cast<float>(acc / spec.m));
  }
}

TEST_CASE("single-token changes move the embedding") {
  EmbedderSpec spec{.seed = 0x77, .d_emb = 48, .m = 12};
  FrozenEmbedder emb(spec);
  SplitMix64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = random_chunk(rng, spec.m);
    auto b = a;
    uint32_t pos = static_cast<uint32_t>(rng.next_below(spec.m));
    b[pos] = b[pos] == 256 ? 1 : b[pos] + 1;
    auto ea = emb.embed_chunk(a);
    auto eb = emb.embed_chunk(b);
    CHECK(squared_l2(ea.data(), eb.data(), spec.d_emb) > 0.0);
  }
}
