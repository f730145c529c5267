#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "finerec/error.hpp"
#include "finerec/text.hpp"

namespace finerec {

// Unit-L2 (or all-zero) embedding of a text.
using TextVector = std::vector<double>;

inline void l2_normalize(TextVector& v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  if (sq <= 0.0) return;
  const double inv = 1.0 / std::sqrt(sq);
  for (double& x : v) x *= inv;
}

// Signed feature hashing: every token adds +-1 to bucket (fnv1a64 mod d),
// the sign taken from the hash's top bit; the sum is L2-normalized.
inline TextVector encode_text(std::string_view text, std::size_t d) {
  if (d == 0) throw ConfigError("encoding dimension must be >= 1");
  TextVector v(d, 0.0);
  for (const auto& tok : tokenize(text)) {
    const auto h = fnv1a64(tok);
    v[h % d] += (h >> 63) ? -1.0 : 1.0;
  }
  l2_normalize(v);
  return v;
}

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual TextVector encode(const std::string& text, std::size_t d) const = 0;
};

class HashingEncoder : public TextEncoder {
 public:
  TextVector encode(const std::string& text, std::size_t d) const override {
    return encode_text(text, d);
  }
};

// JSONL of {"text": ..., "vector": [...]}; vectors are re-normalized.
inline std::map<std::string, TextVector> import_external_vectors(const std::filesystem::path& path,
                                                                 std::size_t d) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::map<std::string, TextVector> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
    if (!j.is_object() || !j.contains("text") || !j.contains("vector")) {
      throw ParseError(path.string(), lineno, "expected {\"text\", \"vector\"}");
    }
    auto text = j["text"].get<std::string>();
    auto vec = j["vector"].get<std::vector<double>>();
    if (vec.size() != d) {
      throw ParseError(path.string(), lineno,
                       "vector for '" + text + "' has dimension " + std::to_string(vec.size()) +
                           ", expected " + std::to_string(d));
    }
    for (double x : vec) {
      if (!std::isfinite(x)) throw ParseError(path.string(), lineno, "non-finite entry for '" + text + "'");
    }
    l2_normalize(vec);
    auto [it, inserted] = out.emplace(text, vec);
    if (!inserted) {
      bool same = true;
      for (std::size_t i = 0; i < d; ++i) same = same && std::abs(it->second[i] - vec[i]) <= 1e-12;
      if (!same) {
        throw ParseError(path.string(), lineno, "conflicting vectors for text '" + text + "'");
      }
    }
  }
  return out;
}

// Looks texts up in an imported table; unknown texts are an error.
class ExternalVectorEncoder : public TextEncoder {
 public:
  ExternalVectorEncoder(std::map<std::string, TextVector> table, std::size_t d)
      : table_(std::move(table)), d_(d) {}

  TextVector encode(const std::string& text, std::size_t d) const override {
    if (d != d_) {
      throw ShapeError("external vectors have dimension " + std::to_string(d_) + ", requested " +
                       std::to_string(d));
    }
    auto it = table_.find(text);
    if (it == table_.end()) throw Error("no external vector for text '" + text + "'");
    return it->second;
  }

 private:
  std::map<std::string, TextVector> table_;
  std::size_t d_;
};

}  // namespace finerec
