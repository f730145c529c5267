#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "finerec/error.hpp"

namespace finerec {

struct InteractionRecord {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;
  std::string review_text;

  friend bool operator==(const InteractionRecord&, const InteractionRecord&) = default;
};

struct SequenceEntry {
  std::string item_id;
  std::int64_t timestamp = 0;
  std::string review_text;

  friend bool operator==(const SequenceEntry&, const SequenceEntry&) = default;
};

enum class InputFormat { jsonl, tsv };

// Users and items are kept in lexicographic id order; that order defines the
// dense indices every downstream module uses. Sequences are chronological,
// ties resolved by input order, with at most one entry per (user, item).
class Corpus {
 public:
  Corpus() = default;

  // Duplicate (user, item) records keep the earliest one.
  static Corpus from_records(std::span<const InteractionRecord> records) {
    return from_records(records, {}, {});
  }

  // As above, but the user/item id sets are widened to include `extra_users`
  // and `extra_items` even when they have no interactions here.
  static Corpus from_records(std::span<const InteractionRecord> records,
                             std::span<const std::string> extra_users,
                             std::span<const std::string> extra_items) {
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      if (r.user_id.empty() || r.item_id.empty()) {
        throw Error("record " + std::to_string(i) + ": empty user or item id");
      }
      if (r.timestamp < 0) throw Error("record " + std::to_string(i) + ": negative timestamp");
    }
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return records[a].timestamp < records[b].timestamp;
    });

    Corpus c;
    std::set<std::string> users(extra_users.begin(), extra_users.end());
    std::set<std::string> items(extra_items.begin(), extra_items.end());
    std::set<std::pair<std::string, std::string>> seen;
    for (std::size_t idx : order) {
      const auto& r = records[idx];
      if (!seen.emplace(r.user_id, r.item_id).second) continue;
      c.sequences_[r.user_id].push_back({r.item_id, r.timestamp, r.review_text});
      users.insert(r.user_id);
      items.insert(r.item_id);
    }
    c.users_.assign(users.begin(), users.end());
    c.items_.assign(items.begin(), items.end());
    c.reindex();
    return c;
  }

  const std::vector<std::string>& users() const { return users_; }
  const std::vector<std::string>& items() const { return items_; }
  std::size_t num_users() const { return users_.size(); }
  std::size_t num_items() const { return items_.size(); }

  const std::map<std::string, std::vector<SequenceEntry>>& sequences() const {
    return sequences_;
  }

  const std::vector<SequenceEntry>& sequence(const std::string& user_id) const {
    static const std::vector<SequenceEntry> kEmpty;
    auto it = sequences_.find(user_id);
    return it == sequences_.end() ? kEmpty : it->second;
  }

  std::optional<std::size_t> user_index(const std::string& id) const {
    auto it = user_pos_.find(id);
    if (it == user_pos_.end()) return std::nullopt;
    return it->second;
  }

  std::optional<std::size_t> item_index(const std::string& id) const {
    auto it = item_pos_.find(id);
    if (it == item_pos_.end()) return std::nullopt;
    return it->second;
  }

  bool has_interaction(const std::string& user_id, const std::string& item_id) const {
    for (const auto& e : sequence(user_id)) {
      if (e.item_id == item_id) return true;
    }
    return false;
  }

  std::size_t num_interactions() const {
    std::size_t n = 0;
    for (const auto& [u, seq] : sequences_) n += seq.size();
    return n;
  }

  bool empty() const { return num_interactions() == 0; }

  // Flattened in (user id, chronological) order.
  std::vector<InteractionRecord> records() const {
    std::vector<InteractionRecord> out;
    out.reserve(num_interactions());
    for (const auto& [u, seq] : sequences_) {
      for (const auto& e : seq) out.push_back({u, e.item_id, e.timestamp, e.review_text});
    }
    return out;
  }

  friend bool operator==(const Corpus& a, const Corpus& b) {
    return a.users_ == b.users_ && a.items_ == b.items_ && a.sequences_ == b.sequences_;
  }

 private:
  void reindex() {
    user_pos_.clear();
    item_pos_.clear();
    for (std::size_t i = 0; i < users_.size(); ++i) user_pos_.emplace(users_[i], i);
    for (std::size_t i = 0; i < items_.size(); ++i) item_pos_.emplace(items_[i], i);
  }

  std::vector<std::string> users_;
  std::vector<std::string> items_;
  std::map<std::string, std::vector<SequenceEntry>> sequences_;
  std::unordered_map<std::string, std::size_t> user_pos_;
  std::unordered_map<std::string, std::size_t> item_pos_;
};

struct SplitCorpus {
  // Carries the full user/item universe of the preprocessed corpus so that
  // items seen only as validation/test targets still have an index.
  Corpus train;
  std::map<std::string, std::string> validation;
  std::map<std::string, std::string> test;
};

namespace detail {

inline std::string tsv_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\\': out += "\\\\"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

inline std::string tsv_unescape(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size()) {
      switch (s[i + 1]) {
        case 't': out.push_back('\t'); ++i; continue;
        case 'n': out.push_back('\n'); ++i; continue;
        case 'r': out.push_back('\r'); ++i; continue;
        case '\\': out.push_back('\\'); ++i; continue;
        default: break;
      }
    }
    out.push_back(s[i]);
  }
  return out;
}

// Parses one JSON object, rejecting repeated keys at the top level.
inline nlohmann::json parse_json_object_line(const std::string& line, const std::string& source,
                                             std::size_t lineno) {
  std::set<std::string> keys;
  std::string duplicate;
  nlohmann::json::parser_callback_t cb = [&](int depth, nlohmann::json::parse_event_t event,
                                             nlohmann::json& parsed) {
    if (event == nlohmann::json::parse_event_t::key && depth == 1) {
      auto k = parsed.get<std::string>();
      if (!keys.insert(k).second && duplicate.empty()) duplicate = k;
    }
    return true;
  };
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line, cb);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(source, lineno, std::string("invalid JSON: ") + e.what());
  }
  if (!duplicate.empty()) throw ParseError(source, lineno, "duplicate field '" + duplicate + "'");
  if (!j.is_object()) throw ParseError(source, lineno, "expected a JSON object");
  return j;
}

inline std::string require_string(const nlohmann::json& j, const char* key,
                                  const std::string& source, std::size_t lineno) {
  auto it = j.find(key);
  if (it == j.end()) throw ParseError(source, lineno, std::string("missing field '") + key + "'");
  if (!it->is_string()) {
    throw ParseError(source, lineno, std::string("field '") + key + "' must be a string");
  }
  return it->get<std::string>();
}

inline InteractionRecord parse_jsonl_record(const std::string& line, const std::string& source,
                                            std::size_t lineno) {
  auto j = parse_json_object_line(line, source, lineno);
  InteractionRecord r;
  r.user_id = require_string(j, "user", source, lineno);
  r.item_id = require_string(j, "item", source, lineno);
  r.review_text = require_string(j, "review", source, lineno);
  auto ts = j.find("timestamp");
  if (ts == j.end()) throw ParseError(source, lineno, "missing field 'timestamp'");
  if (!ts->is_number_integer()) throw ParseError(source, lineno, "timestamp must be an integer");
  r.timestamp = ts->get<std::int64_t>();
  return r;
}

inline InteractionRecord parse_tsv_record(const std::string& line, const std::string& source,
                                          std::size_t lineno) {
  std::vector<std::string> cols;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find('\t', start);
    cols.push_back(line.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  if (cols.size() != 4) {
    throw ParseError(source, lineno,
                     "expected 4 tab-separated columns, got " + std::to_string(cols.size()));
  }
  InteractionRecord r;
  r.user_id = cols[0];
  r.item_id = cols[1];
  try {
    std::size_t used = 0;
    r.timestamp = std::stoll(cols[2], &used);
    if (used != cols[2].size()) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw ParseError(source, lineno, "timestamp must be an integer");
  }
  r.review_text = tsv_unescape(cols[3]);
  return r;
}

}  // namespace detail

inline std::vector<InteractionRecord> read_interaction_records(const std::filesystem::path& path,
                                                               InputFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  const std::string source = path.string();
  std::vector<InteractionRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto r = format == InputFormat::jsonl ? detail::parse_jsonl_record(line, source, lineno)
                                          : detail::parse_tsv_record(line, source, lineno);
    if (r.user_id.empty() || r.item_id.empty()) {
      throw ParseError(source, lineno, "user and item must be non-empty");
    }
    if (r.timestamp < 0) throw ParseError(source, lineno, "timestamp must be >= 0");
    records.push_back(std::move(r));
  }
  return records;
}

inline Corpus load_interactions(const std::filesystem::path& path, InputFormat format) {
  auto records = read_interaction_records(path, format);
  return Corpus::from_records(records);
}

inline InputFormat parse_input_format(const std::string& s) {
  if (s == "jsonl") return InputFormat::jsonl;
  if (s == "tsv") return InputFormat::tsv;
  throw ConfigError("unknown input format '" + s + "' (expected jsonl or tsv)");
}

inline void write_records_jsonl(std::ostream& out, std::span<const InteractionRecord> records) {
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["user"] = r.user_id;
    j["item"] = r.item_id;
    j["timestamp"] = r.timestamp;
    j["review"] = r.review_text;
    out << j.dump() << '\n';
  }
}

inline void write_records_tsv(std::ostream& out, std::span<const InteractionRecord> records) {
  for (const auto& r : records) {
    out << detail::tsv_escape(r.user_id) << '\t' << detail::tsv_escape(r.item_id) << '\t'
        << r.timestamp << '\t' << detail::tsv_escape(r.review_text) << '\n';
  }
}

inline void save_interactions(const Corpus& corpus, const std::filesystem::path& path,
                              InputFormat format = InputFormat::jsonl) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  auto records = corpus.records();
  if (format == InputFormat::jsonl) {
    write_records_jsonl(out, records);
  } else {
    write_records_tsv(out, records);
  }
}

// Keeps only interactions for which `keep(user, entry)` holds.
template <typename Pred>
Corpus filter_interactions(const Corpus& corpus, Pred keep) {
  std::vector<InteractionRecord> kept;
  for (const auto& [u, seq] : corpus.sequences()) {
    for (const auto& e : seq) {
      if (keep(u, e)) kept.push_back({u, e.item_id, e.timestamp, e.review_text});
    }
  }
  return Corpus::from_records(kept);
}

// Iteratively removes users and items with fewer than `k` interactions until
// nothing changes. The result is the unique maximal sub-corpus with all
// degrees >= k.
inline Corpus k_core_filter(const Corpus& corpus, std::size_t k) {
  std::set<std::pair<std::string, std::string>> alive;
  for (const auto& [u, seq] : corpus.sequences()) {
    for (const auto& e : seq) alive.emplace(u, e.item_id);
  }
  bool changed = true;
  while (changed) {
    changed = false;
    std::map<std::string, std::size_t> udeg, ideg;
    for (const auto& [u, i] : alive) {
      ++udeg[u];
      ++ideg[i];
    }
    for (auto it = alive.begin(); it != alive.end();) {
      if (udeg[it->first] < k || ideg[it->second] < k) {
        it = alive.erase(it);
        changed = true;
      } else {
        ++it;
      }
    }
  }
  return filter_interactions(corpus, [&](const std::string& u, const SequenceEntry& e) {
    return alive.count({u, e.item_id}) > 0;
  });
}

inline Corpus five_core_filter(const Corpus& corpus) { return k_core_filter(corpus, 5); }

inline constexpr std::size_t kMinSequenceLength = 5;

// Last item -> test, penultimate -> validation, the rest -> train. Users with
// fewer than five interactions are dropped.
inline SplitCorpus leave_one_out_split(const Corpus& corpus) {
  SplitCorpus split;
  std::vector<InteractionRecord> train;
  std::vector<std::string> users;
  for (const auto& [u, seq] : corpus.sequences()) {
    if (seq.size() < kMinSequenceLength) continue;
    users.push_back(u);
    for (std::size_t t = 0; t + 2 < seq.size(); ++t) {
      train.push_back({u, seq[t].item_id, seq[t].timestamp, seq[t].review_text});
    }
    split.validation[u] = seq[seq.size() - 2].item_id;
    split.test[u] = seq.back().item_id;
  }
  // The item universe is the items of retained users, including held-out ones.
  std::set<std::string> items;
  for (const auto& u : users) {
    for (const auto& e : corpus.sequence(u)) items.insert(e.item_id);
  }
  std::vector<std::string> item_list(items.begin(), items.end());
  split.train = Corpus::from_records(train, users, item_list);
  return split;
}

// Writes train.jsonl / valid.jsonl / test.jsonl. Held-out records keep their
// original timestamp and review.
inline void save_split(const SplitCorpus& split, const Corpus& source,
                       const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_interactions(split.train, dir / "train.jsonl");
  auto write_targets = [&](const std::map<std::string, std::string>& targets,
                           const std::string& name) {
    std::vector<InteractionRecord> recs;
    for (const auto& [u, item] : targets) {
      for (const auto& e : source.sequence(u)) {
        if (e.item_id == item) recs.push_back({u, item, e.timestamp, e.review_text});
      }
    }
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw Error("cannot write " + (dir / name).string());
    write_records_jsonl(out, recs);
  };
  write_targets(split.validation, "valid.jsonl");
  write_targets(split.test, "test.jsonl");
}

inline SplitCorpus load_split(const std::filesystem::path& dir) {
  auto train = read_interaction_records(dir / "train.jsonl", InputFormat::jsonl);
  auto valid = read_interaction_records(dir / "valid.jsonl", InputFormat::jsonl);
  auto test = read_interaction_records(dir / "test.jsonl", InputFormat::jsonl);
  std::set<std::string> users, items;
  SplitCorpus split;
  auto collect = [&](const std::vector<InteractionRecord>& recs,
                     std::map<std::string, std::string>* targets, const char* name) {
    for (const auto& r : recs) {
      users.insert(r.user_id);
      items.insert(r.item_id);
      if (targets && !targets->emplace(r.user_id, r.item_id).second) {
        throw Error(std::string(name) + ": user '" + r.user_id + "' has more than one target");
      }
    }
  };
  collect(train, nullptr, "train.jsonl");
  collect(valid, &split.validation, "valid.jsonl");
  collect(test, &split.test, "test.jsonl");
  std::vector<std::string> ul(users.begin(), users.end()), il(items.begin(), items.end());
  split.train = Corpus::from_records(train, ul, il);
  return split;
}

}  // namespace finerec
