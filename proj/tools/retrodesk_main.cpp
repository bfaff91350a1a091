// Command-line front end for the retrodesk pipeline:
//   gen-synthetic -> ingest -> dedup -> build-index -> precompute-neighbors
//   -> train / retrofit -> eval -> leakage-curve -> sample / knnlm-tune
//
// Exit codes: 0 ok, 2 usage, 3 file/format, 4 numeric abort.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "retrodesk/evaluation.hpp"
#include "retrodesk/minhash.hpp"
#include "retrodesk/sampler.hpp"
#include "retrodesk/synthetic.hpp"
#include "retrodesk/train.hpp"

namespace rd = retrodesk;
namespace fs = std::filesystem;

namespace {

struct ModelFlags {
  rd::ModelConfig cfg;
  std::vector<uint32_t> cca_layers;     // empty -> default placement
  std::vector<uint32_t> enc_ca_layers = {1};
  std::string neighbor_mode = "both";
};

void add_model_flags(CLI::App* cmd, ModelFlags& mf) {
  cmd->add_option("--n", mf.cfg.n, "sequence length");
  cmd->add_option("--m", mf.cfg.m, "chunk length");
  cmd->add_option("--k", mf.cfg.k, "training neighbours per chunk");
  cmd->add_option("--d", mf.cfg.d, "decoder width");
  cmd->add_option("--d-prime", mf.cfg.d_prime, "encoder width");
  cmd->add_option("--layers", mf.cfg.layers, "decoder layers");
  cmd->add_option("--enc-layers", mf.cfg.enc_layers, "encoder layers");
  cmd->add_option("--cca-layers", mf.cca_layers,
                  "decoder layers with chunked cross-attention (1-based)");
  cmd->add_option("--enc-ca-layers", mf.enc_ca_layers,
                  "encoder layers with cross-attention (1-based)");
  cmd->add_option("--heads", mf.cfg.heads, "attention heads");
  cmd->add_option("--head-dim", mf.cfg.head_dim, "per-head width");
  cmd->add_option("--enc-heads", mf.cfg.enc_heads, "encoder heads");
  cmd->add_option("--d-ffw", mf.cfg.d_ffw, "feed-forward width");
  cmd->add_option("--rel-basis", mf.cfg.rel_basis,
                  "cosine feature count for positional logits");
  cmd->add_flag("--shared-embeddings", mf.cfg.shared_embeddings,
                "share encoder and decoder token embeddings");
  cmd->add_option("--neighbor-mode", mf.neighbor_mode,
                  "both|neighbors_only|continuations_only|off");
  cmd->add_option("--dropout", mf.cfg.dropout, "dropout rate (default 0)");
}

rd::ModelConfig resolve_model_flags(ModelFlags& mf) {
  mf.cfg.neighbor_mode = rd::neighbor_mode_from_string(mf.neighbor_mode);
  mf.cfg.cca_layers = mf.cca_layers.empty() &&
                              mf.cfg.neighbor_mode != rd::NeighborMode::kOff
                          ? rd::default_cca_layers(mf.cfg.layers)
                          : mf.cca_layers;
  mf.cfg.enc_ca_layers = mf.enc_ca_layers;
  mf.cfg.validate();
  return mf.cfg;
}

struct TrainFlags {
  rd::TrainConfig cfg;
  std::string log_path;
  uint32_t checkpoint_every = 0;  // 0 disables cadence snapshots
};

void add_train_flags(CLI::App* cmd, TrainFlags& tf) {
  cmd->add_option("--steps", tf.cfg.max_steps, "optimizer steps");
  cmd->add_option("--batch", tf.cfg.batch_size, "sequences per step");
  cmd->add_option("--warmup", tf.cfg.warmup_steps, "linear warmup steps");
  cmd->add_option("--lr-start", tf.cfg.lr_start, "warmup start lr");
  cmd->add_option("--lr-peak", tf.cfg.lr_peak, "peak lr");
  cmd->add_option("--lr-min", tf.cfg.lr_min, "final lr");
  cmd->add_option("--cosine-steps", tf.cfg.cosine_steps,
                  "cosine cycle length");
  cmd->add_option("--weight-decay", tf.cfg.weight_decay, "decoupled decay");
  cmd->add_option("--seed", tf.cfg.seed, "training seed");
  cmd->add_option("--k-train", tf.cfg.k_train, "neighbours used in training");
  cmd->add_option("--log-every", tf.cfg.log_every, "steps between log lines");
  cmd->add_option("--log", tf.log_path, "JSONL training log path");
  cmd->add_option("--checkpoint-every", tf.checkpoint_every,
                  "write <output>.step<N> snapshots every N steps");
}

void run_training(rd::RetroModel<float>& model,
                  const std::vector<rd::Window>& windows,
                  const rd::NeighborFile* nbrs, const TrainFlags& tf,
                  std::optional<rd::NeighborMode> mode,
                  const std::string& out_path) {
  std::ofstream log;
  std::ostream* log_ptr = nullptr;
  if (!tf.log_path.empty()) {
    log.open(tf.log_path);
    if (!log) throw rd::FormatError("cannot open log: " + tf.log_path);
    log_ptr = &log;
  }
  std::function<void(uint32_t)> on_step;
  if (tf.checkpoint_every > 0)
    on_step = [&](uint32_t step) {
      if ((step + 1) % tf.checkpoint_every == 0)
        rd::save_checkpoint(out_path + ".step" + std::to_string(step + 1),
                            model.config(), model.params());
    };
  double final_loss =
      rd::train_loop(model, windows, nbrs, tf.cfg, mode, log_ptr, on_step);
  std::cout << "final_loss_nats " << final_loss << "\n";
}

std::vector<rd::Window> windows_for(const std::string& tokens_path,
                                    uint32_t n, uint32_t stride) {
  auto docs = rd::load_tokens(tokens_path);
  return rd::make_windows(docs, n, stride);
}

void write_records_csv(const std::string& path,
                       const std::vector<rd::EvalRecord>& records) {
  auto os = rd::open_out(path);
  os << "doc_id,window,chunk,loss_bits,bytes,overlap\n";
  for (const auto& r : records)
    os << r.doc_id << "," << r.window_index << "," << r.chunk_index << ","
       << std::setprecision(17) << r.loss_bits << "," << r.byte_count << ","
       << r.overlap << "\n";
}

std::vector<rd::EvalRecord> read_records_csv(const std::string& path) {
  auto is = rd::open_in(path);
  std::string line;
  if (!std::getline(is, line) ||
      line != "doc_id,window,chunk,loss_bits,bytes,overlap")
    throw rd::FormatError(path + ": not a records CSV");
  std::vector<rd::EvalRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    rd::EvalRecord r;
    unsigned long long doc = 0;
    if (std::sscanf(line.c_str(), "%llu,%u,%u,%lf,%u,%lf", &doc,
                    &r.window_index, &r.chunk_index, &r.loss_bits,
                    &r.byte_count, &r.overlap) != 6)
      throw rd::FormatError(path + ": bad record line: " + line);
    r.doc_id = doc;
    out.push_back(r);
  }
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"retrodesk: a desk-scale retrieval-enhanced language model"};
  app.require_subcommand(1);

  // ---- gen-synthetic ----
  auto* gen = app.add_subcommand(
      "gen-synthetic", "emit the key/value lookup corpus used by the tests");
  std::string gen_out = "synthetic";
  rd::SyntheticOptions gen_opt;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--facts", gen_opt.facts, "shared fact count");
  gen->add_option("--occurrences", gen_opt.occurrences,
                  "training documents per fact");
  gen->add_option("--train-docs", gen_opt.train_docs, "training documents");
  gen->add_option("--eval-docs", gen_opt.eval_docs, "evaluation documents");
  gen->add_option("--records-per-doc", gen_opt.records_per_doc,
                  "32-byte records per document");
  gen->add_option("--seed", gen_opt.seed, "corpus seed");
  gen->callback([&] {
    fs::create_directories(gen_out);
    auto corpus = rd::gen_synthetic(gen_opt);
    rd::save_jsonl(gen_out + "/train.jsonl", corpus.train);
    rd::save_jsonl(gen_out + "/eval.jsonl", corpus.eval);
    rd::save_answer_spans(gen_out + "/answers.json", corpus.answer_spans);
    std::cout << "train_docs " << corpus.train.size() << "\n"
              << "eval_docs " << corpus.eval.size() << "\n"
              << "answer_spans " << corpus.answer_spans.size() << "\n";
  });

  // ---- ingest ----
  auto* ingest = app.add_subcommand("ingest", "JSONL corpus -> token cache");
  std::string in_jsonl, out_tokens;
  ingest->add_option("--input", in_jsonl, "JSONL with id/text fields")
      ->required();
  ingest->add_option("--output", out_tokens, "tokens.bin path")->required();
  ingest->callback([&] {
    auto docs = rd::load_jsonl(in_jsonl);
    rd::save_tokens(out_tokens, docs);
    uint64_t total = 0;
    for (const auto& d : docs) total += d.tokens.size();
    std::cout << "docs " << docs.size() << "\ntokens " << total << "\n";
  });

  // ---- dedup ----
  auto* dedup = app.add_subcommand(
      "dedup", "drop training docs near-duplicating evaluation docs");
  std::string dd_train, dd_eval, dd_out;
  uint32_t dd_hashes = 256, dd_shingle = 13;
  uint64_t dd_seed = 0x5eed5eed5eed5eedull;
  double dd_threshold = 0.8;
  dedup->add_option("--train", dd_train, "training JSONL")->required();
  dedup->add_option("--eval", dd_eval, "evaluation JSONL")->required();
  dedup->add_option("--output", dd_out, "filtered training JSONL")->required();
  dedup->add_option("--threshold", dd_threshold, "Jaccard threshold");
  dedup->add_option("--hashes", dd_hashes, "MinHash functions");
  dedup->add_option("--shingle", dd_shingle, "shingle width in tokens");
  dedup->add_option("--seed", dd_seed, "hash seed");
  dedup->callback([&] {
    auto train = rd::load_jsonl(dd_train);
    auto eval_docs = rd::load_jsonl(dd_eval);
    rd::MinHasher hasher(dd_hashes, dd_shingle, dd_seed);
    auto kept = rd::dedup_filter(train, eval_docs, hasher, dd_threshold);
    rd::save_jsonl(dd_out, kept);
    std::cout << "kept " << kept.size() << "\nremoved "
              << train.size() - kept.size() << "\n";
  });

  // ---- build-index ----
  auto* build =
      app.add_subcommand("build-index", "embed chunks and build the kNN index");
  std::string bi_tokens, bi_out;
  uint32_t bi_m = 16, bi_demb = 64, bi_centroids = 0, bi_iters = 25;
  uint64_t bi_seed = 0xe3bedde5ull;
  build->add_option("--tokens", bi_tokens, "tokens.bin")->required();
  build->add_option("--output", bi_out, "index.rchx path")->required();
  build->add_option("--m", bi_m, "chunk length");
  build->add_option("--d-emb", bi_demb, "embedding width");
  build->add_option("--seed", bi_seed, "embedder seed");
  build->add_option("--centroids", bi_centroids,
                    "coarse centroid count (0 = sqrt of entry count)");
  build->add_option("--kmeans-iters", bi_iters, "k-means iterations");
  build->callback([&] {
    auto docs = rd::load_tokens(bi_tokens);
    std::vector<rd::Chunk> chunks;
    for (const auto& d : docs)
      for (auto& c : rd::split_into_chunks(d, bi_m))
        chunks.push_back(std::move(c));
    if (chunks.empty()) throw rd::FormatError(bi_tokens + ": no chunks");
    rd::FrozenEmbedder emb(
        rd::EmbedderSpec{.seed = bi_seed, .d_emb = bi_demb, .m = bi_m});
    auto index = rd::ChunkIndex::build(chunks, emb, bi_centroids, bi_iters);
    index.save(bi_out);
    std::cout << "entries " << index.size() << "\ncentroids "
              << index.centroid_count() << "\n";
  });

  // ---- precompute-neighbors ----
  auto* pre = app.add_subcommand("precompute-neighbors",
                                 "save Ret(C) for every window chunk");
  std::string pn_tokens, pn_index, pn_out, pn_mode = "ivf";
  uint32_t pn_k = 2, pn_n = 64, pn_stride = 0, pn_nprobe = 8;
  pre->add_option("--tokens", pn_tokens, "tokens.bin")->required();
  pre->add_option("--index", pn_index, "index.rchx")->required();
  pre->add_option("--output", pn_out, "neighbors.rnbr path")->required();
  pre->add_option("--k", pn_k, "neighbours per chunk");
  pre->add_option("--n", pn_n, "window length");
  pre->add_option("--stride", pn_stride, "window stride (0 = n)");
  pre->add_option("--mode", pn_mode, "ivf|exact");
  pre->add_option("--nprobe", pn_nprobe, "posting lists scanned per query");
  pre->callback([&] {
    auto index = rd::ChunkIndex::load(pn_index);
    rd::FrozenEmbedder emb(index.embedder_spec());
    auto windows = windows_for(pn_tokens, pn_n, pn_stride);
    auto mode = pn_mode == "exact" ? rd::SearchMode::kExact
                                   : rd::SearchMode::kApproximate;
    auto file =
        rd::precompute_neighbors(windows, index, emb, pn_k, mode, pn_nprobe);
    rd::save_neighbors(pn_out, file);
    std::cout << "sequences " << file.sequences.size() << "\n";
  });

  // ---- train ----
  auto* train = app.add_subcommand("train", "train a model from scratch");
  std::string tr_tokens, tr_nbrs, tr_out;
  ModelFlags tr_mf;
  TrainFlags tr_tf;
  uint64_t tr_init_seed = 1;
  train->add_option("--tokens", tr_tokens, "training tokens.bin")->required();
  train->add_option("--neighbors", tr_nbrs,
                    "neighbors.rnbr (required unless retrieval is off)");
  train->add_option("--output", tr_out, "checkpoint path")->required();
  train->add_option("--init-seed", tr_init_seed, "parameter init seed");
  add_model_flags(train, tr_mf);
  add_train_flags(train, tr_tf);
  train->callback([&] {
    auto cfg = resolve_model_flags(tr_mf);
    auto windows = windows_for(tr_tokens, cfg.n, 0);
    rd::NeighborFile nbrs;
    const rd::NeighborFile* nbr_ptr = nullptr;
    if (cfg.neighbor_mode != rd::NeighborMode::kOff) {
      if (tr_nbrs.empty())
        throw std::invalid_argument("train: --neighbors required");
      nbrs = rd::load_neighbors(tr_nbrs);
      nbr_ptr = &nbrs;
    }
    auto ps = rd::RetroModel<float>::init_params(cfg, tr_init_seed);
    rd::RetroModel<float> model(cfg, &ps);
    run_training(model, windows, nbr_ptr, tr_tf, std::nullopt, tr_out);
    rd::save_checkpoint(tr_out, cfg, ps);
  });

  // ---- retrofit ----
  auto* rf = app.add_subcommand(
      "retrofit", "freeze a baseline and train fresh retrieval weights");
  std::string rf_base, rf_tokens, rf_nbrs, rf_out;
  TrainFlags rf_tf;
  rd::RetrofitOptions rf_opt;
  rf->add_option("--base", rf_base, "retrieval-off checkpoint")->required();
  rf->add_option("--tokens", rf_tokens, "training tokens.bin")->required();
  rf->add_option("--neighbors", rf_nbrs, "neighbors.rnbr")->required();
  rf->add_option("--output", rf_out, "checkpoint path")->required();
  rf->add_option("--cca-layers", rf_opt.cca_layers,
                 "decoder CCA layers (default: every 3rd)");
  rf->add_option("--enc-layers", rf_opt.enc_layers, "encoder layers");
  rf->add_option("--enc-ca-layers", rf_opt.enc_ca_layers, "encoder CA layers");
  rf->add_option("--enc-heads", rf_opt.enc_heads, "encoder heads (0 = decoder)");
  rf->add_option("--k", rf_opt.k, "neighbours per chunk");
  rf->add_option("--retrofit-seed", rf_opt.seed, "new-weight init seed");
  add_train_flags(rf, rf_tf);
  rf->callback([&] {
    auto [base_cfg, base_ps] = rd::load_checkpoint(rf_base);
    auto [cfg, ps] = rd::retrofit(base_cfg, base_ps, rf_opt);
    auto windows = windows_for(rf_tokens, cfg.n, 0);
    auto nbrs = rd::load_neighbors(rf_nbrs);
    rd::RetroModel<float> model(cfg, &ps);
    run_training(model, windows, &nbrs, rf_tf, std::nullopt, rf_out);
    rd::save_checkpoint(rf_out, cfg, ps);
  });

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "bits-per-byte over a token cache");
  std::string ev_model, ev_tokens, ev_nbrs, ev_index, ev_records,
      ev_retrieval = "on";
  uint32_t ev_k = 0, ev_stride = 0, ev_overlap_k = 10;
  double ev_alpha = 1.0;
  ev->add_option("--model", ev_model, "checkpoint")->required();
  ev->add_option("--tokens", ev_tokens, "evaluation tokens.bin")->required();
  ev->add_option("--neighbors", ev_nbrs, "precomputed neighbours");
  ev->add_option("--retrieval", ev_retrieval, "on|off");
  ev->add_option("--k", ev_k, "neighbours to attend (0 = training k)");
  ev->add_option("--alpha", ev_alpha, "overlap filter threshold");
  ev->add_option("--index", ev_index, "training index for overlap r(C)");
  ev->add_option("--overlap-k", ev_overlap_k, "neighbours for r(C)");
  ev->add_option("--stride", ev_stride, "sliding-window stride (0 = n)");
  ev->add_option("--records", ev_records, "per-chunk records CSV out");
  ev->callback([&] {
    auto [cfg, ps] = rd::load_checkpoint(ev_model);
    rd::RetroModel<float> model(cfg, &ps);
    auto windows = windows_for(ev_tokens, cfg.n, ev_stride);
    std::optional<rd::NeighborMode> mode;
    rd::NeighborFile nbrs;
    const rd::NeighborFile* nbr_ptr = nullptr;
    if (ev_retrieval == "off" || cfg.neighbor_mode == rd::NeighborMode::kOff) {
      mode = rd::NeighborMode::kOff;
    } else {
      if (ev_nbrs.empty())
        throw std::invalid_argument("eval: --neighbors required");
      nbrs = rd::load_neighbors(ev_nbrs);
      if (nbrs.sequences.size() != windows.size())
        throw rd::FormatError(ev_nbrs + ": window count mismatch");
      nbr_ptr = &nbrs;
    }
    uint32_t k_use = ev_k == 0 ? cfg.k : ev_k;
    if (nbr_ptr && k_use > nbrs.k) k_use = nbrs.k;

    rd::ChunkIndex overlap_index;
    const rd::ChunkIndex* ov_ptr = nullptr;
    std::optional<rd::FrozenEmbedder> ov_emb;
    if (!ev_index.empty()) {
      overlap_index = rd::ChunkIndex::load(ev_index);
      ov_emb.emplace(overlap_index.embedder_spec());
      ov_ptr = &overlap_index;
    }
    auto records =
        rd::evaluate_windows(model, windows, nbr_ptr, k_use, mode, ov_ptr,
                             ov_emb ? &*ov_emb : nullptr, ev_overlap_k);
    if (!ev_records.empty()) write_records_csv(ev_records, records);
    auto pt = rd::filtered_bpb(records, ev_alpha);
    if (!pt.defined) {
      std::cout << "bpb undefined (no chunks pass alpha filter)\n";
    } else {
      std::cout << std::setprecision(12) << "bpb " << pt.bpb << "\nchunks "
                << pt.chunks << "\nbytes " << pt.bytes << "\nloss_bits_total "
                << pt.bpb * static_cast<double>(pt.bytes) << "\n";
    }
  });

  // ---- leakage-curve ----
  auto* lc =
      app.add_subcommand("leakage-curve", "bpb(alpha) curve from records CSV");
  std::string lc_records, lc_out, lc_hist;
  lc->add_option("--records", lc_records, "per-chunk records CSV")->required();
  lc->add_option("--output", lc_out, "curve CSV")->required();
  lc->add_option("--histogram", lc_hist, "overlap histogram CSV");
  lc->callback([&] {
    auto records = read_records_csv(lc_records);
    auto os = rd::open_out(lc_out);
    os << "alpha,bpb,chunks,bytes\n";
    for (int i = 0; i <= 8; ++i) {
      double alpha = i / 8.0;
      auto pt = rd::filtered_bpb(records, alpha);
      os << alpha << ",";
      if (pt.defined)
        os << std::setprecision(17) << pt.bpb;
      else
        os << "nan";
      os << "," << pt.chunks << "," << pt.bytes << "\n";
    }
    if (!lc_hist.empty()) {
      auto bins = rd::overlap_histogram(records);
      auto hs = rd::open_out(lc_hist);
      hs << "bin_low,bin_high,count\n";
      for (size_t b = 0; b < bins.size(); ++b)
        hs << b / 8.0 << "," << (b + 1) / 8.0 << "," << bins[b] << "\n";
    }
    std::cout << "chunks " << records.size() << "\n";
  });

  // ---- sample ----
  auto* sm =
      app.add_subcommand("sample", "chunk-wise generation with retrieval");
  std::string sm_model, sm_index, sm_prompt, sm_out, sm_mode = "greedy";
  uint32_t sm_steps = 64, sm_k = 0, sm_nprobe = 8;
  double sm_temp = 1.0;
  uint64_t sm_seed = 0;
  bool sm_exact = false;
  sm->add_option("--model", sm_model, "checkpoint")->required();
  sm->add_option("--index", sm_index, "retrieval index")->required();
  sm->add_option("--prompt", sm_prompt,
                 "prompt text (empty starts from a pad seed)");
  sm->add_option("--steps", sm_steps, "tokens to generate");
  sm->add_option("--mode", sm_mode, "greedy|temperature");
  sm->add_option("--temperature", sm_temp, "softmax temperature");
  sm->add_option("--seed", sm_seed, "sampling seed");
  sm->add_option("--k", sm_k, "neighbours per chunk (0 = training k)");
  sm->add_flag("--exact", sm_exact, "exact search instead of IVF");
  sm->add_option("--nprobe", sm_nprobe, "IVF probes");
  sm->add_option("--out", sm_out, "sample dump JSON");
  sm->callback([&] {
    auto [cfg, ps] = rd::load_checkpoint(sm_model);
    rd::RetroModel<float> model(cfg, &ps);
    auto index = rd::ChunkIndex::load(sm_index);
    rd::FrozenEmbedder emb(index.embedder_spec());
    auto prompt = rd::encode_document(sm_prompt);
    auto mode = sm_mode == "temperature" ? rd::SampleMode::kTemperature
                                         : rd::SampleMode::kGreedy;
    auto res = rd::sample(model, index, emb, prompt, sm_steps, mode, sm_temp,
                          sm_seed, sm_k,
                          sm_exact ? rd::SearchMode::kExact
                                   : rd::SearchMode::kApproximate,
                          sm_nprobe);
    if (!sm_out.empty()) {
      nlohmann::json j;
      j["tokens"] = res.tokens;
      j["text"] = res.text;
      j["prompt_len"] = res.prompt_len;
      j["retrieval_calls"] = res.retrieval_calls;
      j["lcp_depths"] = res.lcp_depths;
      j["generated_logprob"] = res.generated_logprob;
      j["per_chunk_neighbors"] = nlohmann::json::array();
      for (const auto& chunk : res.per_chunk) {
        nlohmann::json cj = nlohmann::json::array();
        for (const auto& rec : chunk)
          cj.push_back({{"neighbor_tokens", rec.neighbor_tokens},
                        {"continuation_tokens", rec.continuation_tokens},
                        {"source_doc_id", rec.source_doc_id},
                        {"source_chunk_index", rec.source_chunk_index},
                        {"distance", rec.distance}});
        j["per_chunk_neighbors"].push_back(std::move(cj));
      }
      auto os = rd::open_out(sm_out);
      // Byte-level sampling can emit arbitrary bytes; invalid UTF-8 in the
      // text field is replaced rather than rejected.
      os << j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace)
         << "\n";
    }
    std::cout << res.text << "\n";
  });

  // ---- knnlm-tune ----
  auto* kt = app.add_subcommand(
      "knnlm-tune", "tune the kNN-LM interpolation on a validation stream");
  std::string kt_model, kt_train, kt_valid, kt_out, kt_trace;
  uint32_t kt_k = 10, kt_stride = 4, kt_max = 20000, kt_nprobe = 8,
           kt_centroids = 0;
  kt->add_option("--model", kt_model, "LM checkpoint (used retrieval-off)")
      ->required();
  kt->add_option("--train-tokens", kt_train, "datastore corpus")->required();
  kt->add_option("--valid-tokens", kt_valid, "validation corpus")->required();
  uint32_t kt_max_docs = 0;
  kt->add_option("--k", kt_k, "neighbours per query");
  kt->add_option("--stride", kt_stride, "datastore subsampling stride");
  kt->add_option("--max-docs", kt_max_docs,
                 "cap datastore corpus to the first N documents (0 = all)");
  kt->add_option("--max-positions", kt_max, "validation positions cap");
  kt->add_option("--nprobe", kt_nprobe, "IVF probes");
  kt->add_option("--centroids", kt_centroids, "datastore centroids (0=auto)");
  kt->add_option("--output", kt_out, "tuned params JSON");
  kt->add_option("--trace", kt_trace, "tuning trace JSONL");
  kt->callback([&] {
    auto [cfg, ps] = rd::load_checkpoint(kt_model);
    rd::RetroModel<float> model(cfg, &ps);
    auto train_docs = rd::load_tokens(kt_train);
    if (kt_max_docs > 0 && train_docs.size() > kt_max_docs)
      train_docs.resize(kt_max_docs);
    auto valid_docs = rd::load_tokens(kt_valid);
    rd::FrozenEmbedder emb(
        rd::EmbedderSpec{.seed = 0xe3bedde5ull, .d_emb = 64, .m = cfg.m});
    rd::TokenDatastore ds(train_docs, emb, kt_stride, kt_centroids);

    auto windows = rd::make_windows(valid_docs, cfg.n);
    std::vector<rd::KnnPoint> points;
    std::vector<rd::TokenId> ctx(cfg.m);
    for (const auto& w : windows) {
      if (points.size() >= kt_max) break;
      auto loss = model.log_likelihood(w.tokens, nullptr,
                                       rd::NeighborMode::kOff, w.scored_from);
      for (size_t j = cfg.m; j + 1 < w.tokens.size() && points.size() < kt_max;
           ++j) {
        if (!loss.scored[j]) continue;
        rd::KnnPoint pt;
        pt.target = w.tokens[j];
        pt.lm_prob_target = std::exp(-loss.token_nats[j]);
        std::copy_n(w.tokens.begin() + (j - cfg.m), cfg.m, ctx.begin());
        pt.hits = ds.query(emb.embed_chunk(ctx), kt_k, kt_nprobe);
        points.push_back(std::move(pt));
      }
    }
    if (points.empty())
      throw std::invalid_argument("knnlm-tune: no validation positions");

    std::ofstream trace;
    std::ostream* trace_ptr = nullptr;
    if (!kt_trace.empty()) {
      trace.open(kt_trace);
      trace_ptr = &trace;
    }
    auto params = rd::tune_knnlm(points, kt_k, 0.0, trace_ptr);
    double tuned = rd::knnlm_perplexity(points, params.lambda, params.alpha);
    double lm_only = rd::knnlm_perplexity(points, 0.0, params.alpha);
    if (!kt_out.empty()) {
      nlohmann::json j;
      j["lambda"] = params.lambda;
      j["alpha"] = params.alpha;
      j["k"] = params.k;
      j["ppl_tuned"] = tuned;
      j["ppl_lm_only"] = lm_only;
      auto os = rd::open_out(kt_out);
      os << j.dump() << "\n";
    }
    std::cout << std::setprecision(12) << "lambda " << params.lambda
              << "\nalpha " << params.alpha << "\nppl_tuned " << tuned
              << "\nppl_lm_only " << lm_only << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // usage
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const rd::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const rd::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
