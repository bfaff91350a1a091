#include "retrodesk/synthetic.hpp"

#include <json.hpp>

#include <algorithm>
#include <stdexcept>

#include "retrodesk/tokenizer.hpp"

namespace retrodesk {

namespace {

std::string random_letters(SplitMix64& rng, uint32_t len, char base) {
  std::string s(len, base);
  for (auto& c : s) c = static_cast<char>(base + rng.next_below(26));
  return s;
}

struct Fact {
  std::string key;     // kSynthKeyLen uppercase
  std::string answer;  // kSynthAnswerLen lowercase
};

std::string record_text(const Fact& f) {
  return f.key + "=" + f.answer + ";";
}

}  // namespace

SyntheticCorpus gen_synthetic(const SyntheticOptions& opt) {
  if (opt.train_docs == 0 || opt.records_per_doc == 0)
    throw std::invalid_argument("gen_synthetic: empty layout");
  const uint64_t total_slots =
      static_cast<uint64_t>(opt.train_docs) * opt.records_per_doc;
  if (static_cast<uint64_t>(opt.facts) * opt.occurrences > total_slots)
    throw std::invalid_argument(
        "gen_synthetic: fact occurrences exceed record capacity");
  if (opt.occurrences > opt.train_docs)
    throw std::invalid_argument("gen_synthetic: occurrences > train docs");

  SplitMix64 rng(opt.seed);
  std::vector<Fact> pool(opt.facts);
  for (auto& f : pool) {
    f.key = random_letters(rng, kSynthKeyLen, 'A');
    f.answer = random_letters(rng, kSynthAnswerLen, 'a');
  }

  // Scatter each fact into `occurrences` distinct training documents.
  std::vector<std::vector<uint32_t>> doc_facts(opt.train_docs);
  for (uint32_t fi = 0; fi < opt.facts; ++fi) {
    std::vector<uint32_t> picked;
    uint32_t attempts = 0;
    while (picked.size() < opt.occurrences) {
      uint32_t d = static_cast<uint32_t>(rng.next_below(opt.train_docs));
      if (++attempts > 64 * opt.occurrences) {
        // Random placement stalled; take the first eligible documents.
        for (uint32_t s = 0;
             s < opt.train_docs && picked.size() < opt.occurrences; ++s) {
          if (doc_facts[s].size() >= opt.records_per_doc) continue;
          if (std::find(picked.begin(), picked.end(), s) != picked.end())
            continue;
          picked.push_back(s);
          doc_facts[s].push_back(fi);
        }
        break;
      }
      if (doc_facts[d].size() >= opt.records_per_doc) continue;
      if (std::find(picked.begin(), picked.end(), d) != picked.end()) continue;
      picked.push_back(d);
      doc_facts[d].push_back(fi);
    }
    if (picked.size() < opt.occurrences)
      throw std::invalid_argument("gen_synthetic: could not place all facts");
  }

  SyntheticCorpus out;
  out.train.reserve(opt.train_docs);
  for (uint32_t d = 0; d < opt.train_docs; ++d) {
    std::vector<std::string> records;
    records.reserve(opt.records_per_doc);
    for (uint32_t fi : doc_facts[d]) records.push_back(record_text(pool[fi]));
    while (records.size() < opt.records_per_doc) {
      Fact noise{random_letters(rng, kSynthKeyLen, 'A'),
                 random_letters(rng, kSynthAnswerLen, 'a')};
      records.push_back(record_text(noise));
    }
    // Shuffle record order within the document.
    for (size_t i = records.size(); i > 1; --i)
      std::swap(records[i - 1], records[rng.next_below(i)]);
    Document doc;
    doc.doc_id = d;
    doc.name = "train_" + std::to_string(d);
    for (const auto& r : records) doc.text += r;
    doc.tokens = encode_document(doc.text);
    out.train.push_back(std::move(doc));
  }

  out.eval.reserve(opt.eval_docs);
  for (uint32_t d = 0; d < opt.eval_docs; ++d) {
    Document doc;
    doc.doc_id = 1000000 + d;  // disjoint from training ids
    doc.name = "eval_" + std::to_string(d);
    for (uint32_t r = 0; r < opt.records_per_doc; ++r) {
      uint32_t fi = static_cast<uint32_t>(rng.next_below(opt.facts));
      uint32_t start = static_cast<uint32_t>(doc.text.size());
      doc.text += record_text(pool[fi]);
      // The second half of the record (bytes 16..30) is the answer tail a
      // retrieval pathway can copy from a neighbour continuation.
      AnswerSpan span;
      span.doc_name = doc.name;
      span.byte_start = start + kSynthRecordBytes / 2;
      span.byte_len = kSynthRecordBytes / 2 - 1;  // excludes the ';'
      out.answer_spans.push_back(span);
    }
    doc.tokens = encode_document(doc.text);
    out.eval.push_back(std::move(doc));
  }
  return out;
}

void save_answer_spans(const std::string& path,
                       const std::vector<AnswerSpan>& spans) {
  auto os = open_out(path);
  nlohmann::json j = nlohmann::json::array();
  for (const auto& s : spans)
    j.push_back({{"id", s.doc_name},
                 {"start", s.byte_start},
                 {"len", s.byte_len}});
  os << j.dump() << "\n";
}

std::vector<AnswerSpan> load_answer_spans(const std::string& path) {
  auto is = open_in(path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": invalid JSON: " + e.what());
  }
  std::vector<AnswerSpan> out;
  for (const auto& item : j) {
    AnswerSpan s;
    s.doc_name = item.at("id").get<std::string>();
    s.byte_start = item.at("start").get<uint32_t>();
    s.byte_len = item.at("len").get<uint32_t>();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace retrodesk
