#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace finerec {

inline char ascii_lower(char c) {
  return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
}

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = ascii_lower(c);
  return out;
}

// Bytes >= 0x80 count as word characters so UTF-8 words are not split.
inline bool is_token_char(char c) {
  const auto u = static_cast<unsigned char>(c);
  return (u >= '0' && u <= '9') || (u >= 'a' && u <= 'z') || (u >= 'A' && u <= 'Z') || u >= 0x80;
}

// Lowercase, split on anything that is not alphanumeric.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char c : text) {
    if (is_token_char(c)) {
      cur.push_back(ascii_lower(c));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

// Canonical opinion text: lowercase, runs of whitespace collapsed to one
// space, and whitespace / quotes / sentence punctuation trimmed from both
// ends. Idempotent.
inline std::string normalize_opinion(std::string_view text) {
  auto is_space = [](char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
  };
  auto is_edge = [&](char c) {
    return is_space(c) || c == '"' || c == '\'' || c == '.' || c == ',' || c == ';' ||
           c == ':' || c == '!' || c == '?' || c == '`';
  };
  std::string collapsed;
  collapsed.reserve(text.size());
  bool pending_space = false;
  for (char c : text) {
    if (is_space(c)) {
      pending_space = true;
      continue;
    }
    if (pending_space && !collapsed.empty()) collapsed.push_back(' ');
    pending_space = false;
    collapsed.push_back(ascii_lower(c));
  }
  std::size_t b = 0, e = collapsed.size();
  while (b < e && is_edge(collapsed[b])) ++b;
  while (e > b && is_edge(collapsed[e - 1])) --e;
  return collapsed.substr(b, e - b);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

// Splits "a,b,,c" into {"a","b","c"}.
inline std::vector<std::string> split_list(std::string_view s, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace finerec
