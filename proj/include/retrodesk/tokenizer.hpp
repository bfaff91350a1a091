#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "retrodesk/common.hpp"

namespace retrodesk {

// Byte-level tokenizer. tokenize/detokenize map bytes to ids in [0, 256)
// one-to-one; document encoding shifts ids by +1 so that 0 stays reserved
// for padding.

inline std::vector<TokenId> tokenize(std::string_view text) {
  std::vector<TokenId> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<TokenId>(c));
  return out;
}

inline std::string detokenize(const std::vector<TokenId>& tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) out.push_back(static_cast<char>(t & 0xff));
  return out;
}

// Shifted ids: byte b -> token b+1, pad = 0.
inline std::vector<TokenId> encode_document(std::string_view text) {
  std::vector<TokenId> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<TokenId>(c) + 1);
  return out;
}

// Inverse of encode_document; pad tokens are dropped.
inline std::string decode_document(const std::vector<TokenId>& tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (TokenId t : tokens)
    if (t != kPadToken) out.push_back(static_cast<char>((t - 1) & 0xff));
  return out;
}

}  // namespace retrodesk
