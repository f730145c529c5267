#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "finerec/corpus.hpp"
#include "finerec/error.hpp"
#include "finerec/extraction.hpp"
#include "finerec/rng.hpp"

namespace finerec {

// Planted-signal corpus: every item has one opinion word per attribute, every
// user likes one word and dislikes another per attribute, and users mostly
// pick the unseen item that best matches their taste.
struct SynthConfig {
  std::size_t num_users = 200;
  std::size_t num_items = 300;
  std::size_t interactions_per_user = 15;
  std::vector<std::string> attributes = {"Price", "Quality", "Size"};
  // Trigger word per attribute; it is what the review mentions.
  std::vector<std::string> triggers = {"price", "quality", "size"};
  // Opinion vocabulary per attribute (>= 2 words each).
  std::vector<std::vector<std::string>> vocabulary = {
      {"cheap", "affordable", "pricey", "expensive"},
      {"sturdy", "durable", "flimsy", "fragile"},
      {"tiny", "compact", "roomy", "bulky"},
  };
  // Probability that a pick is uniform over unseen items instead of the
  // best-agreeing one.
  double noise = 0.2;
  // Probability that a review mentions a given attribute.
  double mention_prob = 0.8;
  // Generic words with no attribute meaning sprinkled through reviews.
  std::vector<std::string> filler = {
      "arrived", "yesterday", "package", "box", "ordered", "again", "gift", "daughter",
      "husband", "shipping", "fast", "slow", "seller", "store", "bought", "month", "week",
      "really", "overall", "honestly", "maybe", "works", "using", "daily", "kitchen",
      "travel", "office", "weekend", "friend", "recommend", "return", "replacement",
      "instructions", "manual", "color", "design", "looks", "feels", "worth", "money"};
  std::size_t filler_per_review = 12;
  std::uint64_t seed = 42;

  void validate() const {
    if (attributes.empty()) throw ConfigError("synth: need at least one attribute");
    if (triggers.size() != attributes.size() || vocabulary.size() != attributes.size()) {
      throw ConfigError("synth: triggers and vocabulary must have one entry per attribute");
    }
    for (const auto& v : vocabulary) {
      if (v.size() < 2) throw ConfigError("synth: each attribute needs >= 2 opinion words");
    }
    if (num_users == 0 || num_items == 0) throw ConfigError("synth: empty user or item set");
    if (interactions_per_user > num_items) {
      throw ConfigError("synth: " + std::to_string(interactions_per_user) +
                        " interactions per user exceed the " + std::to_string(num_items) +
                        " available items");
    }
    if (noise < 0 || noise > 1 || mention_prob < 0 || mention_prob > 1) {
      throw ConfigError("synth: probabilities must lie in [0, 1]");
    }
  }
};

template <typename Json>
void update_from_json(SynthConfig& c, const Json& j) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).template get<std::decay_t<decltype(field)>>();
  };
  get("num_users", c.num_users);
  get("num_items", c.num_items);
  get("interactions_per_user", c.interactions_per_user);
  get("attributes", c.attributes);
  get("triggers", c.triggers);
  get("vocabulary", c.vocabulary);
  get("noise", c.noise);
  get("mention_prob", c.mention_prob);
  get("filler", c.filler);
  get("filler_per_review", c.filler_per_review);
  get("seed", c.seed);
}

struct UserProfile {
  std::vector<std::size_t> liked;     // word index per attribute
  std::vector<std::size_t> disliked;  // word index per attribute, != liked
};

struct SynthOutput {
  AttributeSet attributes;
  Corpus corpus;
  PairStore planted;  // pairs actually written into the reviews
  AttributeLexicon lexicon;
  std::vector<UserProfile> users;
  std::vector<std::vector<std::size_t>> items;  // word index per attribute
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
};

// +1 per attribute where the item has the liked word, -1 where it has the
// disliked one.
inline int agreement(const UserProfile& u, const std::vector<std::size_t>& item) {
  int a = 0;
  for (std::size_t n = 0; n < item.size(); ++n) {
    if (item[n] == u.liked[n]) ++a;
    if (item[n] == u.disliked[n]) --a;
  }
  return a;
}

inline SynthOutput generate(const SynthConfig& cfg) {
  cfg.validate();
  Xoshiro256 rng(cfg.seed);
  SynthOutput out;
  out.attributes = AttributeSet(cfg.attributes);
  const std::size_t N = cfg.attributes.size();

  auto pad = [](std::size_t i, std::size_t width) {
    auto s = std::to_string(i);
    return std::string(width > s.size() ? width - s.size() : 0, '0') + s;
  };
  for (std::size_t i = 0; i < cfg.num_items; ++i) {
    out.item_ids.push_back("i" + pad(i, 4));
    std::vector<std::size_t> words(N);
    for (std::size_t n = 0; n < N; ++n) words[n] = rng.below(cfg.vocabulary[n].size());
    out.items.push_back(std::move(words));
  }
  for (std::size_t u = 0; u < cfg.num_users; ++u) {
    out.user_ids.push_back("u" + pad(u, 4));
    UserProfile p;
    for (std::size_t n = 0; n < N; ++n) {
      const auto V = cfg.vocabulary[n].size();
      const auto liked = rng.below(V);
      auto disliked = rng.below(V - 1);
      if (disliked >= liked) ++disliked;
      p.liked.push_back(liked);
      p.disliked.push_back(disliked);
    }
    out.users.push_back(std::move(p));
  }

  std::vector<InteractionRecord> records;
  for (std::size_t u = 0; u < cfg.num_users; ++u) {
    std::vector<char> seen(cfg.num_items, 0);
    std::vector<std::size_t> candidates;
    for (std::size_t k = 0; k < cfg.interactions_per_user; ++k) {
      candidates.clear();
      if (rng.bernoulli(cfg.noise)) {
        for (std::size_t x = 0; x < cfg.num_items; ++x) {
          if (!seen[x]) candidates.push_back(x);
        }
      } else {
        int best = std::numeric_limits<int>::min();
        for (std::size_t x = 0; x < cfg.num_items; ++x) {
          if (seen[x]) continue;
          const int a = agreement(out.users[u], out.items[x]);
          if (a > best) {
            best = a;
            candidates.clear();
          }
          if (a == best) candidates.push_back(x);
        }
      }
      const auto x = candidates[rng.below(candidates.size())];
      seen[x] = 1;

      // Review: "<word> <trigger>" fragments for mentioned attributes, with
      // filler words scattered before, between and after them.
      std::vector<std::string> fragments;
      for (std::size_t n = 0; n < N; ++n) {
        if (!rng.bernoulli(cfg.mention_prob)) continue;
        const auto& word = cfg.vocabulary[n][out.items[x][n]];
        fragments.push_back(word + " " + cfg.triggers[n]);
        out.planted.insert({out.user_ids[u], out.item_ids[x], n, word});
      }
      std::vector<std::string> pieces = fragments;
      for (std::size_t f = 0; f < cfg.filler_per_review && !cfg.filler.empty(); ++f) {
        pieces.push_back(cfg.filler[rng.below(cfg.filler.size())]);
      }
      rng.shuffle(pieces);
      std::string review;
      for (std::size_t i = 0; i < pieces.size(); ++i) review += (i ? " " : "") + pieces[i];
      if (!review.empty()) review += ".";
      const auto ts = static_cast<std::int64_t>(1600000000 + 86400 * k + u);
      records.push_back({out.user_ids[u], out.item_ids[x], ts, review});
    }
  }
  out.corpus = Corpus::from_records(records);

  for (std::size_t n = 0; n < N; ++n) {
    out.lexicon.triggers[cfg.attributes[n]] = {to_lower(cfg.triggers[n])};
    for (const auto& w : cfg.vocabulary[n]) out.lexicon.opinions[to_lower(w)] = 0;
  }
  return out;
}

// interactions.jsonl, pairs.jsonl (planted ground truth), lexicon.json,
// attributes.json and profiles.json.
inline void write_synth(const SynthOutput& s, const SynthConfig& cfg,
                        const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_interactions(s.corpus, dir / "interactions.jsonl");
  save_pairs(s.planted, s.attributes, dir / "pairs.jsonl");
  save_attributes(s.attributes, dir / "attributes.json");
  {
    std::ofstream out(dir / "lexicon.json", std::ios::binary);
    out << lexicon_to_json(s.lexicon).dump(2) << '\n';
  }
  nlohmann::ordered_json prof;
  nlohmann::ordered_json users = nlohmann::ordered_json::object();
  for (std::size_t u = 0; u < s.users.size(); ++u) {
    nlohmann::ordered_json liked, disliked;
    for (std::size_t n = 0; n < cfg.attributes.size(); ++n) {
      liked[cfg.attributes[n]] = cfg.vocabulary[n][s.users[u].liked[n]];
      disliked[cfg.attributes[n]] = cfg.vocabulary[n][s.users[u].disliked[n]];
    }
    users[s.user_ids[u]] = {{"liked", liked}, {"disliked", disliked}};
  }
  nlohmann::ordered_json items = nlohmann::ordered_json::object();
  for (std::size_t x = 0; x < s.items.size(); ++x) {
    nlohmann::ordered_json words;
    for (std::size_t n = 0; n < cfg.attributes.size(); ++n) {
      words[cfg.attributes[n]] = cfg.vocabulary[n][s.items[x][n]];
    }
    items[s.item_ids[x]] = words;
  }
  prof["users"] = users;
  prof["items"] = items;
  std::ofstream out(dir / "profiles.json", std::ios::binary);
  out << prof.dump(2) << '\n';
}

}  // namespace finerec
