#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "retrodesk/train.hpp"

using namespace retrodesk;

namespace {

ModelConfig tiny_config(NeighborMode mode = NeighborMode::kBoth) {
  ModelConfig cfg;
  cfg.n = 16;
  cfg.m = 4;
  cfg.k = 2;
  cfg.d = 32;
  cfg.d_prime = 32;
  cfg.layers = 2;
  cfg.enc_layers = 1;
  cfg.cca_layers = mode == NeighborMode::kOff ? std::vector<uint32_t>{}
                                              : std::vector<uint32_t>{2};
  cfg.enc_ca_layers = {1};
  cfg.heads = 2;
  cfg.head_dim = 16;
  cfg.enc_heads = 2;
  cfg.d_ffw = 64;
  cfg.rel_basis = 8;
  cfg.neighbor_mode = mode;
  return cfg;
}

std::vector<TokenId> random_tokens(SplitMix64& rng, size_t len) {
  std::vector<TokenId> t(len);
  for (auto& v : t) v = 1 + static_cast<TokenId>(rng.next_below(200));
  return t;
}

RetrievedTokens random_retrieved(SplitMix64& rng, uint32_t l, uint32_t k,
                                 uint32_t r) {
  RetrievedTokens ret = RetrievedTokens::zeros(l, k, r);
  for (auto& t : ret.tokens)
    t = 1 + static_cast<TokenId>(rng.next_below(200));
  return ret;
}

std::vector<char> bytes_of(const ParameterStore<float>& ps,
                           const std::string& name) {
  const auto& t = ps.get(name);
  std::vector<char> out(t.numel() * sizeof(float));
  std::memcpy(out.data(), t.ptr(), out.size());
  return out;
}

}  // namespace

TEST_CASE("learning-rate schedule matches the closed form at every step") {
  TrainConfig cfg;
  cfg.warmup_steps = 50;
  cfg.lr_start = 1e-7;
  cfg.lr_peak = 2e-3;
  cfg.lr_min = 2e-4;
  cfg.cosine_steps = 400;
  cfg.validate();
  for (uint32_t s = 0; s < 500; ++s) {
    double want;
    if (s < 50) {
      want = 1e-7 + (2e-3 - 1e-7) * (double(s) / 50.0);
    } else if (s >= 400) {
      want = 2e-4;
    } else {
      double t = double(s - 50) / (400.0 - 50.0);
      want = 2e-4 + 0.5 * (2e-3 - 2e-4) * (1.0 + std::cos(t * 3.141592653589793));
    }
    CHECK(lr_at_step(cfg, s) == doctest::Approx(want).epsilon(1e-12));
  }
  CHECK(lr_at_step(cfg, 0) == doctest::Approx(1e-7));
  CHECK(lr_at_step(cfg, 50) == doctest::Approx(2e-3));
  CHECK(lr_at_step(cfg, 400) == doctest::Approx(2e-4));
  // monotone decay after the peak
  for (uint32_t s = 51; s <= 400; ++s)
    CHECK(lr_at_step(cfg, s) <= lr_at_step(cfg, s - 1) + 1e-15);
}

TEST_CASE("schedule validation") {
  TrainConfig bad;
  bad.warmup_steps = 100;
  bad.cosine_steps = 50;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  TrainConfig bad2;
  bad2.lr_min = 0.0;
  CHECK_THROWS_AS(bad2.validate(), std::invalid_argument);
}

TEST_CASE("zero learning rate moves moments but not parameters") {
  auto cfg = tiny_config();
  auto ps = RetroModel<float>::init_params(cfg, 60);
  RetroModel<float> model(cfg, &ps);
  SplitMix64 rng(61);
  auto tokens = random_tokens(rng, 16);
  auto ret = random_retrieved(rng, 4, 2, 8);

  std::vector<std::vector<char>> before;
  for (const auto& name : ps.names()) before.push_back(bytes_of(ps, name));

  AdamW<float> opt(ps);
  TrainConfig tc;
  ps.zero_grads();
  Graph<float> g;
  auto loss = model.loss_graph(g, tokens, &ret);
  g.backward(loss);
  opt.step(ps, tc, 0.0);

  for (size_t i = 0; i < ps.size(); ++i)
    CHECK(bytes_of(ps, ps.names()[i]) == before[i]);
  CHECK(opt.steps_taken() == 1);
}

TEST_CASE("freeze-all keeps the loss constant across steps") {
  auto cfg = tiny_config();
  auto ps = RetroModel<float>::init_params(cfg, 62);
  ps.freeze_all(true);
  RetroModel<float> model(cfg, &ps);
  SplitMix64 rng(63);
  std::vector<TokenId> tokens = random_tokens(rng, 16);
  auto ret = random_retrieved(rng, 4, 2, 8);
  std::vector<BatchItem<float>> batch{{&tokens, &ret}};
  AdamW<float> opt(ps);
  TrainConfig tc;
  double first = train_step(model, batch, opt, tc, 0);
  for (uint32_t s = 1; s < 5; ++s)
    CHECK(train_step(model, batch, opt, tc, s) == first);
}

TEST_CASE("two hundred steps overfit a two-sequence batch") {
  auto cfg = tiny_config(NeighborMode::kOff);
  auto ps = RetroModel<float>::init_params(cfg, 64);
  RetroModel<float> model(cfg, &ps);
  SplitMix64 rng(65);
  std::vector<TokenId> a = random_tokens(rng, 16);
  std::vector<TokenId> b = random_tokens(rng, 16);
  std::vector<BatchItem<float>> batch{{&a, nullptr}, {&b, nullptr}};
  AdamW<float> opt(ps);
  TrainConfig tc;
  tc.warmup_steps = 10;
  tc.lr_peak = 5e-3;
  tc.lr_min = 1e-3;
  tc.cosine_steps = 200;
  tc.weight_decay = 0.0;
  double loss = 0;
  for (uint32_t s = 0; s < 200; ++s)
    loss = train_step(model, batch, opt, tc, s, NeighborMode::kOff);
  CHECK(loss < 0.1);
}

TEST_CASE("dropout training stays finite and only affects training passes") {
  auto cfg = tiny_config();
  cfg.dropout = 0.2;
  auto ps = RetroModel<float>::init_params(cfg, 59);
  RetroModel<float> model(cfg, &ps);
  SplitMix64 rng(58);
  auto tokens = random_tokens(rng, 16);
  auto ret = random_retrieved(rng, 4, 2, 8);

  SplitMix64 drop_a(5), drop_b(5), drop_c(6);
  Graph<float> g1, g2, g3, g4;
  auto la = model.loss_graph(g1, tokens, &ret, std::nullopt, &drop_a);
  auto lb = model.loss_graph(g2, tokens, &ret, std::nullopt, &drop_b);
  auto lc = model.loss_graph(g3, tokens, &ret, std::nullopt, &drop_c);
  auto ld = model.loss_graph(g4, tokens, &ret);  // no rng: dropout off
  CHECK(std::isfinite(la.item()));
  CHECK(la.item() == lb.item());   // same mask stream
  CHECK(la.item() != lc.item());   // different mask stream
  // Evaluation ignores the dropout setting entirely.
  auto eval_loss = model.log_likelihood(tokens, &ret);
  CHECK(std::abs(eval_loss.total_nats / 15.0 - ld.item()) < 2e-5);
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
  auto cfg = tiny_config(NeighborMode::kOff);
  auto ps = RetroModel<float>::init_params(cfg, 66);
  auto& readout = ps.get("dec.readout");
  (*readout.data)[42] = std::numeric_limits<float>::quiet_NaN();
  RetroModel<float> model(cfg, &ps);
  SplitMix64 rng(67);
  std::vector<TokenId> tokens = random_tokens(rng, 16);
  std::vector<BatchItem<float>> batch{{&tokens, nullptr}};
  AdamW<float> opt(ps);
  TrainConfig tc;
  CHECK_THROWS_AS(train_step(model, batch, opt, tc, 3, NeighborMode::kOff),
                  NumericError);
}

TEST_CASE("retrofit: bit-exact at step zero, frozen base thereafter") {
  // Base: a retrieval-off model.
  auto base_cfg = tiny_config(NeighborMode::kOff);
  auto base_ps = RetroModel<float>::init_params(base_cfg, 68);
  RetroModel<float> base(base_cfg, &base_ps);

  RetrofitOptions opt;
  opt.cca_layers = {2};
  opt.enc_layers = 1;
  opt.k = 2;
  auto [retro_cfg, retro_ps] = retrofit(base_cfg, base_ps, opt);
  RetroModel<float> retro(retro_cfg, &retro_ps);

  SplitMix64 rng(69);
  auto tokens = random_tokens(rng, 16);
  auto ret = random_retrieved(rng, 4, 2, 8);

  // Retrieval ON == retrieval OFF == base, bit for bit, before training.
  Graph<float> g1, g2, g3;
  g1.grad_enabled = g2.grad_enabled = g3.grad_enabled = false;
  auto on = retro.decoder_forward(g1, tokens, &ret, NeighborMode::kBoth);
  auto off = retro.decoder_forward(g2, tokens, nullptr, NeighborMode::kOff);
  auto base_logits = base.decoder_forward(g3, tokens, nullptr);
  REQUIRE(on.numel() == base_logits.numel());
  CHECK(std::memcmp(on.ptr(), base_logits.ptr(),
                    sizeof(float) * on.numel()) == 0);
  CHECK(std::memcmp(off.ptr(), base_logits.ptr(),
                    sizeof(float) * off.numel()) == 0);

  // Train a few steps; frozen tensors byte-identical, new ones move.
  std::vector<std::vector<char>> frozen_before;
  for (const auto& name : base_ps.names())
    frozen_before.push_back(bytes_of(retro_ps, name));
  auto cca_before = bytes_of(retro_ps, "dec.l2.cca.wo");

  std::vector<BatchItem<float>> batch{{&tokens, &ret}};
  AdamW<float> adam(retro_ps);
  TrainConfig tc;
  tc.warmup_steps = 2;
  tc.cosine_steps = 20;
  for (uint32_t s = 0; s < 20; ++s) train_step(retro, batch, adam, tc, s);

  for (size_t i = 0; i < base_ps.names().size(); ++i) {
    CHECK(retro_ps.is_frozen(base_ps.names()[i]));
    CHECK(bytes_of(retro_ps, base_ps.names()[i]) == frozen_before[i]);
  }
  CHECK(bytes_of(retro_ps, "dec.l2.cca.wo") != cca_before);

  // After training, retrieval-off evaluation still equals the base exactly.
  Graph<float> g4;
  g4.grad_enabled = false;
  auto off_after = retro.decoder_forward(g4, tokens, nullptr,
                                         NeighborMode::kOff);
  CHECK(std::memcmp(off_after.ptr(), base_logits.ptr(),
                    sizeof(float) * off_after.numel()) == 0);
}

TEST_CASE("retrofit rejects checkpoints that already have retrieval weights") {
  auto cfg = tiny_config();
  auto ps = RetroModel<float>::init_params(cfg, 70);
  CHECK_THROWS_AS(retrofit(cfg, ps, {}), std::invalid_argument);
}

TEST_CASE("checkpoints round-trip with config and freeze mask") {
  auto cfg = tiny_config();
  cfg.dropout = 0.0;
  auto ps = RetroModel<float>::init_params(cfg, 71);
  ps.set_frozen("dec.embed", true);
  save_checkpoint("train_ckpt_test.rckp", cfg, ps);
  auto [cfg2, ps2] = load_checkpoint("train_ckpt_test.rckp");
  CHECK(cfg2.to_json() == cfg.to_json());
  REQUIRE(ps2.size() == ps.size());
  for (size_t i = 0; i < ps.size(); ++i) {
    CHECK(ps2.names()[i] == ps.names()[i]);
    CHECK(*ps2.at(i).data == *ps.at(i).data);
    CHECK(ps2.is_frozen(i) == ps.is_frozen(i));
  }
}

TEST_CASE("training is deterministic given the seed") {
  SplitMix64 rng(72);
  std::vector<Document> docs;
  for (uint64_t i = 0; i < 6; ++i) {
    Document d;
    d.doc_id = i;
    d.name = "d" + std::to_string(i);
    d.tokens = random_tokens(rng, 64);
    docs.push_back(std::move(d));
  }
  auto windows = make_windows(docs, 16);
  FrozenEmbedder emb(EmbedderSpec{.seed = 73, .d_emb = 16, .m = 4});
  std::vector<Chunk> chunks;
  for (const auto& d : docs)
    for (auto& c : split_into_chunks(d, 4)) chunks.push_back(std::move(c));
  auto index = ChunkIndex::build(chunks, emb);
  auto nbrs = precompute_neighbors(windows, index, emb, 2, SearchMode::kExact);

  auto run = [&](const std::string& path) {
    auto cfg = tiny_config();
    auto ps = RetroModel<float>::init_params(cfg, 74);
    RetroModel<float> model(cfg, &ps);
    TrainConfig tc;
    tc.max_steps = 12;
    tc.cosine_steps = 12;
    tc.warmup_steps = 2;
    tc.batch_size = 4;
    tc.seed = 75;
    std::ostringstream log;
    train_loop(model, windows, &nbrs, tc, std::nullopt, &log);
    save_checkpoint(path, cfg, ps);
    return log.str();
  };
  auto log1 = run("det_a.rckp");
  auto log2 = run("det_b.rckp");
  CHECK(log1 == log2);

  std::ifstream a("det_a.rckp", std::ios::binary),
      b("det_b.rckp", std::ios::binary);
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  CHECK(sa.str() == sb.str());
}
