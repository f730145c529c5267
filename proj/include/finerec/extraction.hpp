#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "finerec/corpus.hpp"
#include "finerec/error.hpp"
#include "finerec/sha256.hpp"
#include "finerec/text.hpp"

namespace finerec {

// Ordered attribute names; position is the canonical attribute index.
class AttributeSet {
 public:
  AttributeSet() = default;

  explicit AttributeSet(std::vector<std::string> names) : names_(std::move(names)) {
    if (names_.empty()) throw ConfigError("attribute set must contain at least one attribute");
    std::set<std::string> seen;
    for (const auto& n : names_) {
      if (n.empty()) throw ConfigError("attribute names must be non-empty");
      if (!seen.insert(n).second) throw ConfigError("duplicate attribute '" + n + "'");
    }
  }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }
  const std::string& operator[](std::size_t i) const { return names_.at(i); }

  std::optional<std::size_t> index_of(const std::string& name) const {
    auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) return std::nullopt;
    return static_cast<std::size_t>(it - names_.begin());
  }

  std::string joined() const {
    std::string s;
    for (std::size_t i = 0; i < names_.size(); ++i) s += (i ? ", " : "") + names_[i];
    return s;
  }

  friend bool operator==(const AttributeSet&, const AttributeSet&) = default;

 private:
  std::vector<std::string> names_;
};

// Shipped attribute lists, seven per dataset.
inline AttributeSet preset_attributes(const std::string& dataset) {
  static const std::map<std::string, std::vector<std::string>> kPresets = {
      {"cellphones", {"Battery", "Brand", "Color", "Connectivity", "Performance", "Price", "Size"}},
      {"beauty", {"Brand", "Color", "Effectiveness", "Ingredients", "Price", "Scent", "Size"}},
      {"sports", {"Brand", "Comfort", "Functionality", "Material", "Price", "Quality", "Size"}},
      {"yelp", {"Ambience", "Cleanliness", "Food", "Location", "Parking", "Price", "Service"}},
  };
  auto it = kPresets.find(to_lower(dataset));
  if (it == kPresets.end()) {
    throw ConfigError("unknown attribute preset '" + dataset +
                      "' (expected cellphones, beauty, sports or yelp)");
  }
  return AttributeSet(it->second);
}

// Accepts a JSON array of names or {"attributes": [...]}, or a preset name.
inline AttributeSet load_attributes(const std::string& path_or_preset) {
  if (!std::filesystem::exists(path_or_preset)) return preset_attributes(path_or_preset);
  std::ifstream in(path_or_preset);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path_or_preset, 0, e.what());
  }
  if (j.is_object() && j.contains("attributes")) j = j["attributes"];
  if (!j.is_array()) throw ParseError(path_or_preset, 0, "expected an array of attribute names");
  return AttributeSet(j.get<std::vector<std::string>>());
}

inline void save_attributes(const AttributeSet& attrs, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << nlohmann::json(attrs.names()).dump() << '\n';
}

struct AttributeOpinionPair {
  std::string user_id;
  std::string item_id;
  std::size_t attribute_index = 0;
  std::string opinion_text;

  auto key() const { return std::tie(user_id, item_id, attribute_index, opinion_text); }
  friend bool operator==(const AttributeOpinionPair& a, const AttributeOpinionPair& b) {
    return a.key() == b.key();
  }
  friend bool operator<(const AttributeOpinionPair& a, const AttributeOpinionPair& b) {
    return a.key() < b.key();
  }
};

// Set of extracted pairs plus the (user, item, attribute) -> opinions index.
class PairStore {
 public:
  using Key = std::tuple<std::string, std::string, std::size_t>;

  // Returns false when the quadruple is already present. The opinion is
  // normalized first; empty opinions are rejected.
  bool insert(AttributeOpinionPair p) {
    p.opinion_text = normalize_opinion(p.opinion_text);
    if (p.opinion_text.empty()) return false;
    if (!pairs_.insert(p).second) return false;
    index_[{p.user_id, p.item_id, p.attribute_index}].insert(p.opinion_text);
    interacted_.emplace(p.user_id, p.item_id);
    return true;
  }

  void merge(const PairStore& other) {
    for (const auto& p : other.pairs_) insert(p);
  }

  const std::set<AttributeOpinionPair>& pairs() const { return pairs_; }
  const std::map<Key, std::set<std::string>>& index() const { return index_; }
  std::size_t size() const { return pairs_.size(); }
  bool empty() const { return pairs_.empty(); }

  bool has_pairs_for(const std::string& user_id, const std::string& item_id) const {
    return interacted_.count({user_id, item_id}) > 0;
  }

  bool contains(const AttributeOpinionPair& p) const { return pairs_.count(p) > 0; }

  friend bool operator==(const PairStore& a, const PairStore& b) { return a.pairs_ == b.pairs_; }

 private:
  std::set<AttributeOpinionPair> pairs_;
  std::map<Key, std::set<std::string>> index_;
  std::set<std::pair<std::string, std::string>> interacted_;
};

// Keeps only pairs whose (user, item) is an interaction of `corpus`.
inline PairStore restrict_pairs(const PairStore& store, const Corpus& corpus) {
  PairStore out;
  for (const auto& p : store.pairs()) {
    if (corpus.has_interaction(p.user_id, p.item_id)) out.insert(p);
  }
  return out;
}

// Removes interactions whose review produced no attribute-opinion pair.
inline Corpus drop_attributeless_reviews(const Corpus& corpus, const PairStore& pairs) {
  return filter_interactions(corpus, [&](const std::string& u, const SequenceEntry& e) {
    return pairs.has_pairs_for(u, e.item_id);
  });
}

// One pair per line, sorted by (user, item, attribute name, opinion).
inline void save_pairs(const PairStore& store, const AttributeSet& attrs,
                       const std::filesystem::path& path) {
  std::vector<std::tuple<std::string, std::string, std::string, std::string>> rows;
  rows.reserve(store.size());
  for (const auto& p : store.pairs()) {
    rows.emplace_back(p.user_id, p.item_id, attrs[p.attribute_index], p.opinion_text);
  }
  std::sort(rows.begin(), rows.end());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& [u, i, a, o] : rows) {
    nlohmann::ordered_json j;
    j["user"] = u;
    j["item"] = i;
    j["attribute"] = a;
    j["opinion"] = o;
    out << j.dump() << '\n';
  }
}

inline PairStore load_pairs(const std::filesystem::path& path, const AttributeSet& attrs) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  const std::string source = path.string();
  PairStore store;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto j = detail::parse_json_object_line(line, source, lineno);
    AttributeOpinionPair p;
    p.user_id = detail::require_string(j, "user", source, lineno);
    p.item_id = detail::require_string(j, "item", source, lineno);
    auto attr = detail::require_string(j, "attribute", source, lineno);
    p.opinion_text = detail::require_string(j, "opinion", source, lineno);
    auto idx = attrs.index_of(attr);
    if (!idx) {
      throw ParseError(source, lineno,
                       "unknown attribute '" + attr + "' (valid: " + attrs.joined() + ")");
    }
    p.attribute_index = *idx;
    if (p.user_id.empty() || p.item_id.empty()) {
      throw ParseError(source, lineno, "user and item must be non-empty");
    }
    if (normalize_opinion(p.opinion_text).empty()) {
      throw ParseError(source, lineno, "empty opinion");
    }
    store.insert(std::move(p));
  }
  return store;
}

// ---------------------------------------------------------------------------
// LLM extraction

inline std::string render_prompt(const std::string& attribute, const std::string& review) {
  return "Please extract user opinion words towards the attribute \"" + attribute +
         "\" from the review: \"" + review +
         "\". Only return the opinion words! Your answer should be short.";
}

class TransportError : public Error {
 public:
  using Error::Error;
};

// A chat-completion backend: one user message in, the assistant text out.
// Implementations throw TransportError on network/HTTP failures and must be
// safe to call from several threads at once.
class ChatEndpoint {
 public:
  virtual ~ChatEndpoint() = default;
  virtual std::string complete(const std::string& prompt) = 0;
};

// Recorded endpoint responses keyed by SHA-256 of the prompt. The i-th
// response for a prompt answers the i-th extraction run, so repeated runs
// replay independently sampled answers.
class Cassette {
 public:
  struct Entry {
    std::string prompt;
    std::vector<std::string> responses;
  };

  std::optional<std::string> lookup(const std::string& prompt, std::size_t run) const {
    auto it = entries_.find(sha256_hex(prompt));
    if (it == entries_.end() || run >= it->second.responses.size()) return std::nullopt;
    return it->second.responses[run];
  }

  // Stores the response for `run`. Runs must be recorded in order.
  void record(const std::string& prompt, std::size_t run, const std::string& response) {
    auto& e = entries_[sha256_hex(prompt)];
    e.prompt = prompt;
    if (run < e.responses.size()) {
      e.responses[run] = response;
    } else {
      e.responses.resize(run);
      e.responses.push_back(response);
    }
  }

  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  static Cassette load(const std::filesystem::path& path) {
    Cassette c;
    if (!std::filesystem::exists(path)) return c;
    std::ifstream in(path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path.string(), 0, e.what());
    }
    if (!j.is_object()) throw ParseError(path.string(), 0, "cassette must be a JSON object");
    for (const auto& [key, value] : j.items()) {
      Entry e;
      e.prompt = value.at("prompt").get<std::string>();
      e.responses = value.at("responses").get<std::vector<std::string>>();
      if (sha256_hex(e.prompt) != key) {
        throw ParseError(path.string(), 0, "cassette key " + key + " does not match its prompt");
      }
      c.entries_.emplace(key, std::move(e));
    }
    return c;
  }

  void save(const std::filesystem::path& path) const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [key, e] : entries_) {
      j[key] = {{"prompt", e.prompt}, {"responses", e.responses}};
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << j.dump(2) << '\n';
  }

 private:
  std::map<std::string, Entry> entries_;
};

struct LlmExtractionOptions {
  std::size_t runs = 5;
  std::size_t max_concurrency = 4;
  std::size_t max_attempts = 3;
  std::chrono::milliseconds initial_backoff{500};
  // 0 disables rate limiting.
  double max_requests_per_second = 0.0;
  std::vector<std::string> refusal_sentinels = {"none", "n/a", "not mentioned"};
};

struct ExtractionFailure {
  std::string user_id;
  std::string item_id;
  std::string attribute;
  std::size_t run = 0;
  std::string message;
};

struct LlmExtractionResult {
  PairStore store;
  std::vector<ExtractionFailure> failures;
  std::size_t network_calls = 0;
  std::size_t cache_hits = 0;
};

namespace detail {

// Spaces request start times at least 1/rate apart across all workers.
class RateLimiter {
 public:
  explicit RateLimiter(double per_second) : per_second_(per_second) {}

  void acquire() {
    if (per_second_ <= 0) return;
    using clock = std::chrono::steady_clock;
    const auto interval = std::chrono::duration_cast<clock::duration>(
        std::chrono::duration<double>(1.0 / per_second_));
    clock::time_point slot;
    {
      std::lock_guard lock(mu_);
      const auto now = clock::now();
      next_ = std::max(next_, now);
      slot = next_;
      next_ += interval;
    }
    std::this_thread::sleep_until(slot);
  }

 private:
  double per_second_;
  std::mutex mu_;
  std::chrono::steady_clock::time_point next_{};
};

inline bool is_refusal(const std::string& normalized, const std::vector<std::string>& sentinels) {
  for (const auto& s : sentinels) {
    if (normalized == normalize_opinion(s)) return true;
  }
  return false;
}

}  // namespace detail

// Queries `client` once per (review, attribute, run). Responses already in
// `cassette` are replayed without touching the network; new responses are
// recorded into it. `client` may be null for replay-only operation, in which
// case cassette misses are reported as failures.
inline LlmExtractionResult extract_with_llm(ChatEndpoint* client, Cassette& cassette,
                                            const AttributeSet& attributes, const Corpus& corpus,
                                            const LlmExtractionOptions& opts = {}) {
  if (opts.runs < 1) throw ConfigError("runs must be >= 1");
  struct Task {
    std::size_t record;
    std::size_t attribute;
    std::size_t run;
    std::string prompt;
    std::optional<std::string> response;
    std::string error;
  };
  const auto records = corpus.records();
  std::vector<Task> tasks;
  tasks.reserve(records.size() * attributes.size() * opts.runs);
  for (std::size_t r = 0; r < records.size(); ++r) {
    for (std::size_t a = 0; a < attributes.size(); ++a) {
      auto prompt = render_prompt(attributes[a], records[r].review_text);
      for (std::size_t run = 0; run < opts.runs; ++run) {
        tasks.push_back({r, a, run, prompt, std::nullopt, {}});
      }
    }
  }

  LlmExtractionResult result;
  std::vector<std::size_t> pending;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    tasks[t].response = cassette.lookup(tasks[t].prompt, tasks[t].run);
    if (tasks[t].response) {
      ++result.cache_hits;
    } else if (client == nullptr) {
      tasks[t].error = "no recorded response and no endpoint configured";
    } else {
      pending.push_back(t);
    }
  }

  if (!pending.empty()) {
    detail::RateLimiter limiter(opts.max_requests_per_second);
    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> calls{0};
    auto worker = [&] {
      for (std::size_t k = next++; k < pending.size(); k = next++) {
        auto& task = tasks[pending[k]];
        auto backoff = opts.initial_backoff;
        for (std::size_t attempt = 1; attempt <= std::max<std::size_t>(opts.max_attempts, 1);
             ++attempt) {
          limiter.acquire();
          ++calls;
          try {
            task.response = client->complete(task.prompt);
            task.error.clear();
            break;
          } catch (const TransportError& e) {
            task.error = e.what();
            if (attempt < opts.max_attempts) {
              std::this_thread::sleep_for(backoff);
              backoff *= 2;
            }
          }
        }
      }
    };
    const std::size_t n_workers =
        std::min<std::size_t>(std::max<std::size_t>(opts.max_concurrency, 1), pending.size());
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w + 1 < n_workers; ++w) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
    result.network_calls = calls.load();
    // Record in task order so the cassette contents do not depend on timing.
    for (std::size_t t : pending) {
      if (tasks[t].response) cassette.record(tasks[t].prompt, tasks[t].run, *tasks[t].response);
    }
  }

  for (const auto& task : tasks) {
    const auto& rec = records[task.record];
    if (!task.response) {
      result.failures.push_back(
          {rec.user_id, rec.item_id, attributes[task.attribute], task.run, task.error});
      continue;
    }
    auto opinion = normalize_opinion(*task.response);
    if (opinion.empty() || detail::is_refusal(opinion, opts.refusal_sentinels)) continue;
    result.store.insert({rec.user_id, rec.item_id, task.attribute, opinion});
  }
  return result;
}

inline void save_failure_log(const std::vector<ExtractionFailure>& failures,
                             const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& f : failures) {
    nlohmann::ordered_json j;
    j["user"] = f.user_id;
    j["item"] = f.item_id;
    j["attribute"] = f.attribute;
    j["run"] = f.run;
    j["error"] = f.message;
    out << j.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Lexicon extraction

struct AttributeLexicon {
  // attribute name -> trigger tokens
  std::map<std::string, std::vector<std::string>> triggers;
  // opinion word -> polarity (+1 / -1 / 0)
  std::map<std::string, int> opinions;
  std::vector<std::string> negations = {"not", "no", "never", "hardly"};
  std::size_t window = 4;
};

// {"<Attribute>": [triggers...], ..., "opinions": [...], "negations": [...]}.
// Opinion entries are plain words or {"word": w, "polarity": p}. An optional
// integer "window" overrides the +-4 token scan.
inline AttributeLexicon parse_lexicon(const nlohmann::json& j, const std::string& source) {
  if (!j.is_object()) throw ParseError(source, 0, "lexicon must be a JSON object");
  AttributeLexicon lex;
  for (const auto& [key, value] : j.items()) {
    if (key == "opinions") {
      if (!value.is_array()) throw ParseError(source, 0, "'opinions' must be an array");
      for (const auto& o : value) {
        if (o.is_string()) {
          lex.opinions[to_lower(o.get<std::string>())] = 0;
        } else if (o.is_object() && o.contains("word")) {
          lex.opinions[to_lower(o["word"].get<std::string>())] = o.value("polarity", 0);
        } else {
          throw ParseError(source, 0, "opinion entries must be strings or {word, polarity}");
        }
      }
    } else if (key == "negations") {
      lex.negations.clear();
      for (const auto& n : value) lex.negations.push_back(to_lower(n.get<std::string>()));
    } else if (key == "window") {
      lex.window = value.get<std::size_t>();
    } else {
      if (!value.is_array()) {
        throw ParseError(source, 0, "triggers for '" + key + "' must be an array");
      }
      auto& t = lex.triggers[key];
      for (const auto& w : value) t.push_back(to_lower(w.get<std::string>()));
    }
  }
  return lex;
}

inline AttributeLexicon load_lexicon(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return parse_lexicon(nlohmann::json::parse(in), path.string());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string(), 0, e.what());
  }
}

inline nlohmann::ordered_json lexicon_to_json(const AttributeLexicon& lex) {
  nlohmann::ordered_json j;
  for (const auto& [attr, t] : lex.triggers) j[attr] = t;
  nlohmann::ordered_json ops = nlohmann::ordered_json::array();
  for (const auto& [w, pol] : lex.opinions) ops.push_back({{"word", w}, {"polarity", pol}});
  j["opinions"] = ops;
  j["negations"] = lex.negations;
  j["window"] = lex.window;
  return j;
}

// Finds opinions for one tokenized review. For every trigger occurrence the
// nearest opinion word within the window is taken (the earlier one on a
// distance tie); a negation token strictly between trigger and opinion
// prefixes the opinion with "not ".
inline std::vector<std::pair<std::size_t, std::string>> lexicon_opinions(
    const std::vector<std::string>& tokens, const std::vector<std::set<std::string>>& triggers,
    const AttributeLexicon& lex) {
  std::set<std::string> negations(lex.negations.begin(), lex.negations.end());
  std::vector<std::pair<std::size_t, std::string>> found;
  const auto n = static_cast<std::ptrdiff_t>(tokens.size());
  const auto w = static_cast<std::ptrdiff_t>(lex.window);
  for (std::ptrdiff_t p = 0; p < n; ++p) {
    for (std::size_t a = 0; a < triggers.size(); ++a) {
      if (!triggers[a].count(tokens[p])) continue;
      std::ptrdiff_t best = -1;
      for (std::ptrdiff_t dist = 1; dist <= w && best < 0; ++dist) {
        if (p - dist >= 0 && lex.opinions.count(tokens[p - dist])) {
          best = p - dist;
        } else if (p + dist < n && lex.opinions.count(tokens[p + dist])) {
          best = p + dist;
        }
      }
      if (best < 0) continue;
      bool negated = false;
      for (std::ptrdiff_t q = std::min(p, best) + 1; q < std::max(p, best); ++q) {
        if (negations.count(tokens[q])) negated = true;
      }
      found.emplace_back(a, negated ? "not " + tokens[best] : tokens[best]);
    }
  }
  return found;
}

inline PairStore extract_with_lexicon(const AttributeSet& attributes, const AttributeLexicon& lex,
                                      const Corpus& corpus) {
  std::vector<std::string> missing;
  std::vector<std::set<std::string>> triggers;
  for (const auto& name : attributes.names()) {
    auto it = lex.triggers.find(name);
    if (it == lex.triggers.end() || it->second.empty()) {
      missing.push_back(name);
      continue;
    }
    triggers.emplace_back(it->second.begin(), it->second.end());
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw ConfigError("lexicon has no triggers for attribute(s): " + list);
  }
  if (lex.opinions.empty()) throw ConfigError("lexicon has no opinion words");

  PairStore store;
  for (const auto& [u, seq] : corpus.sequences()) {
    for (const auto& e : seq) {
      for (auto& [a, opinion] : lexicon_opinions(tokenize(e.review_text), triggers, lex)) {
        store.insert({u, e.item_id, a, std::move(opinion)});
      }
    }
  }
  return store;
}

}  // namespace finerec
