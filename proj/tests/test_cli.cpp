#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const char* cli() { return RETRODESK_CLI_PATH; }

int run(const std::string& args) {
  std::string cmd = std::string(cli()) + " " + args + " > cli_stdout.txt 2>&1";
  int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct Workspace {
  fs::path dir;
  explicit Workspace(const std::string& name) {
    dir = fs::path("cli_ws_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  std::string p(const std::string& f) const { return (dir / f).string(); }
};

// Shared tiny pipeline: corpus -> tokens -> index -> neighbours -> model.
struct Pipeline {
  Workspace ws{"pipe"};
  bool ok = true;

  Pipeline() {
    ok = ok && run("gen-synthetic --out " + ws.p("syn") +
                   " --facts 30 --occurrences 2 --train-docs 24"
                   " --eval-docs 3 --records-per-doc 8 --seed 11") == 0;
    ok = ok && run("ingest --input " + ws.p("syn/train.jsonl") +
                   " --output " + ws.p("train.bin")) == 0;
    ok = ok && run("ingest --input " + ws.p("syn/eval.jsonl") + " --output " +
                   ws.p("eval.bin")) == 0;
    ok = ok && run("build-index --tokens " + ws.p("train.bin") +
                   " --output " + ws.p("index.rchx") +
                   " --m 16 --d-emb 24 --seed 3") == 0;
    ok = ok && run("precompute-neighbors --tokens " + ws.p("train.bin") +
                   " --index " + ws.p("index.rchx") + " --output " +
                   ws.p("train.rnbr") + " --k 2 --n 64 --mode exact") == 0;
    ok = ok && run("precompute-neighbors --tokens " + ws.p("eval.bin") +
                   " --index " + ws.p("index.rchx") + " --output " +
                   ws.p("eval.rnbr") + " --k 2 --n 64 --mode exact") == 0;
    ok = ok &&
         run("train --tokens " + ws.p("train.bin") + " --neighbors " +
             ws.p("train.rnbr") + " --output " + ws.p("model.rckp") +
             " --n 64 --m 16 --d 24 --d-prime 24 --layers 2 --cca-layers 2"
             " --enc-layers 1 --heads 2 --head-dim 12 --d-ffw 48"
             " --steps 8 --batch 4 --warmup 2 --cosine-steps 8 --seed 21"
             " --log " + ws.p("train.jsonl")) == 0;
  }
};

Pipeline& pipeline() {
  static Pipeline p;
  return p;
}

}  // namespace

TEST_CASE("usage and format error codes") {
  CHECK(run("no-such-command") == 2);
  CHECK(run("ingest --input missing.jsonl") == 2);  // missing required flag
  {
    std::ofstream bad("cli_bad.bin", std::ios::binary);
    bad << "junk";
  }
  CHECK(run("build-index --tokens cli_bad.bin --output x.rchx") == 3);
  CHECK(run("eval --model cli_bad.bin --tokens cli_bad.bin") == 3);
}

TEST_CASE("full pipeline runs end to end") {
  auto& p = pipeline();
  REQUIRE(p.ok);
  CHECK(fs::exists(p.ws.p("model.rckp")));
  CHECK(fs::exists(p.ws.p("train.jsonl")));
}

TEST_CASE("eval --alpha 1.0 equals eval without filtering") {
  auto& p = pipeline();
  REQUIRE(p.ok);
  std::string base = "eval --model " + p.ws.p("model.rckp") + " --tokens " +
                     p.ws.p("eval.bin") + " --neighbors " + p.ws.p("eval.rnbr");
  REQUIRE(run(base) == 0);
  auto plain = slurp("cli_stdout.txt");
  REQUIRE(run(base + " --alpha 1.0") == 0);
  auto filtered = slurp("cli_stdout.txt");
  CHECK(plain == filtered);
}

TEST_CASE("retrofit keeps the base model reachable bit-for-bit") {
  auto& p = pipeline();
  REQUIRE(p.ok);
  // Baseline transformer (retrieval off).
  REQUIRE(run("train --tokens " + p.ws.p("train.bin") + " --output " +
              p.ws.p("base.rckp") +
              " --n 64 --m 16 --d 24 --d-prime 24 --layers 2"
              " --neighbor-mode off --heads 2 --head-dim 12 --d-ffw 48"
              " --steps 8 --batch 4 --warmup 2 --cosine-steps 8 --seed 22") ==
          0);
  REQUIRE(run("eval --model " + p.ws.p("base.rckp") + " --tokens " +
              p.ws.p("eval.bin") + " --retrieval off --records " +
              p.ws.p("base_recs.csv")) == 0);
  auto base_out = slurp("cli_stdout.txt");
  auto base_recs = slurp(p.ws.p("base_recs.csv"));

  REQUIRE(run("retrofit --base " + p.ws.p("base.rckp") + " --tokens " +
              p.ws.p("train.bin") + " --neighbors " + p.ws.p("train.rnbr") +
              " --output " + p.ws.p("retro.rckp") +
              " --cca-layers 2 --enc-layers 1 --k 2"
              " --steps 6 --batch 4 --warmup 2 --cosine-steps 6") == 0);

  REQUIRE(run("eval --model " + p.ws.p("retro.rckp") + " --tokens " +
              p.ws.p("eval.bin") + " --retrieval off --records " +
              p.ws.p("retro_off_recs.csv")) == 0);
  auto retro_off_out = slurp("cli_stdout.txt");
  CHECK(retro_off_out == base_out);
  CHECK(slurp(p.ws.p("retro_off_recs.csv")) == base_recs);
}

TEST_CASE("commands are re-runnable with byte-identical outputs") {
  auto& p = pipeline();
  REQUIRE(p.ok);
  Workspace ws("rerun");
  auto once = [&](const std::string& tag) {
    REQUIRE(run("build-index --tokens " + p.ws.p("train.bin") + " --output " +
                ws.p("idx_" + tag) + " --m 16 --d-emb 24 --seed 3") == 0);
    REQUIRE(run("precompute-neighbors --tokens " + p.ws.p("eval.bin") +
                " --index " + ws.p("idx_" + tag) + " --output " +
                ws.p("nbr_" + tag) + " --k 2 --n 64") == 0);
    REQUIRE(run("train --tokens " + p.ws.p("train.bin") + " --neighbors " +
                p.ws.p("train.rnbr") + " --output " + ws.p("mdl_" + tag) +
                " --n 64 --m 16 --d 24 --d-prime 24 --layers 2"
                " --cca-layers 2 --enc-layers 1 --heads 2 --head-dim 12"
                " --d-ffw 48 --steps 5 --batch 4 --warmup 1"
                " --cosine-steps 5 --seed 77 --checkpoint-every 3 --log " +
                ws.p("log_" + tag)) == 0);
    CHECK(fs::exists(ws.p("mdl_" + tag) + ".step3"));
    REQUIRE(run("sample --model " + ws.p("mdl_" + tag) + " --index " +
                ws.p("idx_" + tag) +
                " --prompt QQQQ --steps 20 --exact --out " +
                ws.p("smp_" + tag)) == 0);
  };
  once("a");
  once("b");
  CHECK(slurp(ws.p("idx_a")) == slurp(ws.p("idx_b")));
  CHECK(slurp(ws.p("nbr_a")) == slurp(ws.p("nbr_b")));
  CHECK(slurp(ws.p("mdl_a")) == slurp(ws.p("mdl_b")));
  CHECK(slurp(ws.p("mdl_a.step3")) == slurp(ws.p("mdl_b.step3")));
  CHECK(slurp(ws.p("log_a")) == slurp(ws.p("log_b")));
  CHECK(slurp(ws.p("smp_a")) == slurp(ws.p("smp_b")));
}

TEST_CASE("dedup removes planted train/eval duplicates") {
  Workspace ws("dedup");
  // Eval doc 0's text duplicated verbatim into the train set.
  std::string text(400, 'x');
  for (size_t i = 0; i < text.size(); i += 3) text[i] = 'a' + (i * 7) % 23;
  {
    std::ofstream train(ws.p("train.jsonl"));
    train << R"({"id":"t0","text":")" << text << R"("})" << "\n";
    train << R"({"id":"t1","text":"completely different words entirely, nothing shared with the evaluation set at all; pure filler text that goes on and on for a while to clear the shingle width."})"
          << "\n";
    std::ofstream eval(ws.p("eval.jsonl"));
    eval << R"({"id":"e0","text":")" << text << R"("})" << "\n";
  }
  REQUIRE(run("dedup --train " + ws.p("train.jsonl") + " --eval " +
              ws.p("eval.jsonl") + " --output " + ws.p("kept.jsonl")) == 0);
  auto out = slurp("cli_stdout.txt");
  CHECK(out.find("kept 1") != std::string::npos);
  CHECK(out.find("removed 1") != std::string::npos);
  auto kept = slurp(ws.p("kept.jsonl"));
  CHECK(kept.find("\"t1\"") != std::string::npos);
  CHECK(kept.find("\"t0\"") == std::string::npos);
}

TEST_CASE("leakage-curve emits the alpha grid and histogram") {
  auto& p = pipeline();
  REQUIRE(p.ok);
  REQUIRE(run("eval --model " + p.ws.p("model.rckp") + " --tokens " +
              p.ws.p("eval.bin") + " --neighbors " + p.ws.p("eval.rnbr") +
              " --index " + p.ws.p("index.rchx") + " --records " +
              p.ws.p("recs.csv")) == 0);
  REQUIRE(run("leakage-curve --records " + p.ws.p("recs.csv") + " --output " +
              p.ws.p("curve.csv") + " --histogram " + p.ws.p("hist.csv")) ==
          0);
  auto curve = slurp(p.ws.p("curve.csv"));
  CHECK(curve.find("alpha,bpb,chunks,bytes") == 0);
  // 1 header + 9 alpha rows
  CHECK(std::count(curve.begin(), curve.end(), '\n') == 10);
  auto hist = slurp(p.ws.p("hist.csv"));
  CHECK(std::count(hist.begin(), hist.end(), '\n') == 9);
}
