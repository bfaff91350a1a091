#include "retrodesk/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <stdexcept>

#include "retrodesk/tokenizer.hpp"

namespace retrodesk {

std::vector<Chunk> split_into_chunks(const std::vector<TokenId>& tokens,
                                     uint32_t m) {
  if (m == 0) throw std::invalid_argument("split_into_chunks: m must be >= 1");
  std::vector<Chunk> chunks;
  size_t n_chunks = (tokens.size() + m - 1) / m;
  chunks.reserve(n_chunks);
  for (size_t u = 0; u < n_chunks; ++u) {
    Chunk c;
    c.chunk_index = static_cast<uint32_t>(u);
    c.tokens.assign(m, kPadToken);
    size_t begin = u * m;
    size_t len = std::min<size_t>(m, tokens.size() - begin);
    std::copy(tokens.begin() + begin, tokens.begin() + begin + len,
              c.tokens.begin());
    c.byte_len = static_cast<uint32_t>(len);  // byte tokenizer: 1 token = 1 byte
    chunks.push_back(std::move(c));
  }
  return chunks;
}

std::vector<Chunk> split_into_chunks(const Document& doc, uint32_t m) {
  auto chunks = split_into_chunks(doc.tokens, m);
  for (auto& c : chunks) c.doc_id = doc.doc_id;
  return chunks;
}

std::vector<Window> make_windows(const std::vector<Document>& docs, uint32_t n,
                                 uint32_t stride) {
  if (n == 0) throw std::invalid_argument("make_windows: n must be >= 1");
  if (stride == 0) stride = n;
  if (stride > n) throw std::invalid_argument("make_windows: stride > n");
  std::vector<Window> windows;
  for (const auto& doc : docs) {
    if (doc.tokens.empty()) continue;
    uint32_t w_idx = 0;
    for (size_t start = 0; start < doc.tokens.size();
         start += stride, ++w_idx) {
      Window w;
      w.doc_id = doc.doc_id;
      w.window_index = w_idx;
      w.tokens.assign(n, kPadToken);
      size_t len = std::min<size_t>(n, doc.tokens.size() - start);
      std::copy(doc.tokens.begin() + start, doc.tokens.begin() + start + len,
                w.tokens.begin());
      w.real_len = static_cast<uint32_t>(len);
      // Position 0 is never scored (no BOS convention); overlapping windows
      // additionally score only their fresh tail.
      w.scored_from = start == 0 ? 1 : n - stride;
      windows.push_back(std::move(w));
      if (start + n >= doc.tokens.size()) break;
    }
  }
  return windows;
}

std::vector<Document> load_jsonl(const std::string& path) {
  auto is = open_in(path);
  std::vector<Document> docs;
  std::string line;
  size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(line_no) +
                        ": invalid JSON: " + e.what());
    }
    if (!j.contains("id") || !j.contains("text"))
      throw FormatError(path + ":" + std::to_string(line_no) +
                        ": missing 'id' or 'text' field");
    Document d;
    d.doc_id = docs.size();
    d.name = j["id"].get<std::string>();
    d.text = j["text"].get<std::string>();
    d.tokens = encode_document(d.text);
    docs.push_back(std::move(d));
  }
  return docs;
}

void save_jsonl(const std::string& path, const std::vector<Document>& docs) {
  auto os = open_out(path);
  for (const auto& d : docs) {
    nlohmann::json j;
    j["id"] = d.name;
    j["text"] = d.text;
    os << j.dump() << "\n";
  }
}

namespace {
constexpr char kTokensMagic[4] = {'R', 'D', 'T', 'K'};
constexpr uint32_t kTokensVersion = 1;
}  // namespace

void save_tokens(const std::string& path, const std::vector<Document>& docs) {
  auto os = open_out(path);
  write_magic(os, kTokensMagic);
  write_pod<uint32_t>(os, kTokensVersion);
  write_pod<uint64_t>(os, docs.size());
  uint64_t offset = 0;
  for (const auto& d : docs) {
    write_pod<uint64_t>(os, d.doc_id);
    write_pod<uint64_t>(os, offset);
    write_pod<uint64_t>(os, d.tokens.size());
    write_pod<uint32_t>(os, static_cast<uint32_t>(d.name.size()));
    os.write(d.name.data(), static_cast<std::streamsize>(d.name.size()));
    offset += d.tokens.size();
  }
  for (const auto& d : docs) write_vec(os, d.tokens);
  if (!os) throw FormatError("write failed: " + path);
}

std::vector<Document> load_tokens(const std::string& path) {
  auto is = open_in(path);
  expect_magic(is, kTokensMagic, path);
  expect_version(is, kTokensVersion, path);
  uint64_t n_docs = read_pod<uint64_t>(is, path + " doc count");
  struct Dir {
    uint64_t doc_id, offset, count;
    std::string name;
  };
  std::vector<Dir> dir(n_docs);
  for (auto& e : dir) {
    e.doc_id = read_pod<uint64_t>(is, path + " doc_id");
    e.offset = read_pod<uint64_t>(is, path + " offset");
    e.count = read_pod<uint64_t>(is, path + " count");
    uint32_t name_len = read_pod<uint32_t>(is, path + " name length");
    e.name.resize(name_len);
    is.read(e.name.data(), name_len);
    if (!is) throw FormatError(path + ": truncated doc name");
  }
  std::vector<Document> docs(n_docs);
  for (size_t i = 0; i < n_docs; ++i) {
    docs[i].doc_id = dir[i].doc_id;
    docs[i].name = std::move(dir[i].name);
    read_vec(is, docs[i].tokens, dir[i].count, path + " tokens");
    docs[i].text = decode_document(docs[i].tokens);
  }
  return docs;
}

}  // namespace retrodesk
