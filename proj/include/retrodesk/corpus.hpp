#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "retrodesk/common.hpp"

namespace retrodesk {

struct Document {
  uint64_t doc_id = 0;
  std::string name;            // the JSONL "id" field
  std::string text;            // raw bytes
  std::vector<TokenId> tokens; // shifted byte ids, no pads
};

struct Chunk {
  uint64_t doc_id = 0;
  uint32_t chunk_index = 0;      // 0-based position in the document
  std::vector<TokenId> tokens;   // exactly m ids, tail-padded with kPadToken
  uint32_t byte_len = 0;         // bytes encoded by the non-pad tokens
};

// Splits into ceil(len/m) chunks; the ragged tail is padded with kPadToken.
// Throws std::invalid_argument when m == 0.
std::vector<Chunk> split_into_chunks(const std::vector<TokenId>& tokens,
                                     uint32_t m);
std::vector<Chunk> split_into_chunks(const Document& doc, uint32_t m);

// A fixed-length training/evaluation sequence cut from one document.
// Windows never span documents; the ragged tail is padded.
struct Window {
  uint64_t doc_id = 0;
  uint32_t window_index = 0;    // 0-based within the document
  std::vector<TokenId> tokens;  // exactly n ids
  uint32_t scored_from = 1;     // first position whose token is scored
  uint32_t real_len = 0;        // non-pad prefix length
};

// stride == n gives non-overlapping windows; smaller strides slide and score
// only the fresh tail of each window after the first.
std::vector<Window> make_windows(const std::vector<Document>& docs, uint32_t n,
                                 uint32_t stride = 0);

// JSONL corpus: one object per line, fields "id" (string) and "text" (string).
std::vector<Document> load_jsonl(const std::string& path);
void save_jsonl(const std::string& path, const std::vector<Document>& docs);

// Token cache `tokens.bin`: magic "RDTK", version, doc count, per-doc
// directory (doc_id, token offset, token count, name), then u32 tokens.
void save_tokens(const std::string& path, const std::vector<Document>& docs);
std::vector<Document> load_tokens(const std::string& path);  // text rebuilt

}  // namespace retrodesk
