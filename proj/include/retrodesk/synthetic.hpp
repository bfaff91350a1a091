#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "retrodesk/corpus.hpp"

namespace retrodesk {

// Key-value lookup corpus. Documents are sequences of fixed 32-byte records
// "KEYKEYKE=answeranswerananswer;". Pool facts recur in several distinct
// training documents (so retrieval can find them across documents), noise
// records are one-offs. Evaluation documents contain pool facts embedded in
// fresh records only.
struct SyntheticOptions {
  uint32_t facts = 4000;
  uint32_t occurrences = 15;      // training documents per fact
  uint32_t train_docs = 3900;
  uint32_t eval_docs = 64;
  uint32_t records_per_doc = 16;  // 32 bytes each
  uint64_t seed = 1234;
};

struct AnswerSpan {
  std::string doc_name;
  uint32_t byte_start = 0;
  uint32_t byte_len = 0;
};

struct SyntheticCorpus {
  std::vector<Document> train;
  std::vector<Document> eval;
  std::vector<AnswerSpan> answer_spans;  // predictable answer tails in eval
};

inline constexpr uint32_t kSynthRecordBytes = 32;
inline constexpr uint32_t kSynthKeyLen = 8;
inline constexpr uint32_t kSynthAnswerLen = 22;

SyntheticCorpus gen_synthetic(const SyntheticOptions& opt);

void save_answer_spans(const std::string& path,
                       const std::vector<AnswerSpan>& spans);
std::vector<AnswerSpan> load_answer_spans(const std::string& path);

}  // namespace retrodesk
