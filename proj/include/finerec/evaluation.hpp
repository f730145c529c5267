#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "finerec/corpus.hpp"
#include "finerec/error.hpp"
#include "finerec/model.hpp"

namespace finerec {

// Item indices, best first. Scores descend; equal scores go to the lower
// index. Excluded items are left out.
using RankedList = std::vector<std::size_t>;

inline RankedList rank_items(std::span<const double> scores, std::span<const std::size_t> exclude = {}) {
  std::vector<char> skip(scores.size(), 0);
  for (std::size_t x : exclude) {
    if (x < skip.size()) skip[x] = 1;
  }
  RankedList out;
  out.reserve(scores.size());
  for (std::size_t x = 0; x < scores.size(); ++x) {
    if (!skip[x]) out.push_back(x);
  }
  std::stable_sort(out.begin(), out.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return out;
}

// 1-based position of `target` in `ranked`.
inline std::size_t rank_of(const RankedList& ranked, std::size_t target) {
  auto it = std::find(ranked.begin(), ranked.end(), target);
  if (it == ranked.end()) {
    throw Error("target item " + std::to_string(target) + " is not among the ranked candidates");
  }
  return static_cast<std::size_t>(it - ranked.begin()) + 1;
}

inline double hit_from_rank(std::size_t rank, std::size_t k) { return rank <= k ? 1.0 : 0.0; }

inline double ndcg_from_rank(std::size_t rank, std::size_t k) {
  return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

// 1 if the target is in the first k positions. The reported Prec@k is the
// mean of this over users (a hit rate).
inline double precision_at_k(const RankedList& ranked, std::size_t target, std::size_t k) {
  if (k < 1) throw ConfigError("k must be >= 1");
  return hit_from_rank(rank_of(ranked, target), k);
}

// Single relevant item, so IDCG = 1.
inline double ndcg_at_k(const RankedList& ranked, std::size_t target, std::size_t k) {
  if (k < 1) throw ConfigError("k must be >= 1");
  return ndcg_from_rank(rank_of(ranked, target), k);
}

// Rank of `target` without sorting: 1 + number of candidates ordered before
// it under the (score desc, index asc) rule. Matches rank_of(rank_items()).
inline std::size_t target_rank(std::span<const double> scores, std::size_t target,
                               std::span<const std::size_t> exclude = {}) {
  std::vector<char> skip(scores.size(), 0);
  for (std::size_t x : exclude) {
    if (x < skip.size()) skip[x] = 1;
  }
  if (target >= scores.size() || skip[target]) {
    throw Error("target item " + std::to_string(target) + " is not among the ranked candidates");
  }
  const double ts = scores[target];
  std::size_t rank = 1;
  for (std::size_t x = 0; x < scores.size(); ++x) {
    if (skip[x] || x == target) continue;
    if (scores[x] > ts || (scores[x] == ts && x < target)) ++rank;
  }
  return rank;
}

enum class EvalTarget { validation, test };

struct EvalCase {
  std::size_t user = 0;
  std::vector<std::size_t> history;
  std::size_t target = 0;
};

// One case per user with a held-out target. The history is the train
// sequence, plus the validation item when evaluating on test.
inline std::vector<EvalCase> make_eval_cases(const SplitCorpus& split, EvalTarget which) {
  const auto& train = split.train;
  const auto& targets = which == EvalTarget::test ? split.test : split.validation;
  std::vector<EvalCase> cases;
  for (const auto& [user, target] : targets) {
    EvalCase c;
    auto u = train.user_index(user);
    auto t = train.item_index(target);
    if (!u || !t) throw Error("held-out target for '" + user + "' is outside the item universe");
    c.user = *u;
    c.target = *t;
    for (const auto& e : train.sequence(user)) c.history.push_back(*train.item_index(e.item_id));
    if (which == EvalTarget::test) {
      auto v = split.validation.find(user);
      if (v != split.validation.end()) c.history.push_back(*train.item_index(v->second));
    }
    if (c.history.empty()) continue;
    cases.push_back(std::move(c));
  }
  return cases;
}

struct UserMetrics {
  std::size_t user = 0;
  std::size_t target = 0;
  std::size_t rank = 0;
};

struct MetricTable {
  std::vector<std::size_t> ks;
  std::map<std::size_t, double> precision;
  std::map<std::size_t, double> ndcg;
  std::vector<UserMetrics> per_user;

  static MetricTable from_ranks(std::vector<UserMetrics> per_user, std::span<const std::size_t> ks) {
    MetricTable t;
    t.ks.assign(ks.begin(), ks.end());
    for (std::size_t k : ks) {
      if (k < 1) throw ConfigError("k must be >= 1");
      double p = 0.0, n = 0.0;
      for (const auto& m : per_user) {
        p += hit_from_rank(m.rank, k);
        n += ndcg_from_rank(m.rank, k);
      }
      const double denom = per_user.empty() ? 1.0 : static_cast<double>(per_user.size());
      t.precision[k] = p / denom;
      t.ndcg[k] = n / denom;
    }
    t.per_user = std::move(per_user);
    return t;
  }

  // CSV "metric,k,value"; values printed with 6 decimals.
  void write_csv(std::ostream& out) const {
    out << "metric,k,value\n";
    char buf[64];
    for (std::size_t k : ks) {
      std::snprintf(buf, sizeof(buf), "Prec,%zu,%.6f\n", k, precision.at(k));
      out << buf;
    }
    for (std::size_t k : ks) {
      std::snprintf(buf, sizeof(buf), "NDCG,%zu,%.6f\n", k, ndcg.at(k));
      out << buf;
    }
  }

  std::string csv() const {
    std::ostringstream os;
    write_csv(os);
    return os.str();
  }

  void write_per_user(std::ostream& out, const Corpus& universe) const {
    for (const auto& m : per_user) {
      nlohmann::ordered_json j;
      j["user"] = universe.users()[m.user];
      j["target"] = universe.items()[m.target];
      j["rank"] = m.rank;
      for (std::size_t k : ks) {
        j["Prec@" + std::to_string(k)] = hit_from_rank(m.rank, k);
        j["NDCG@" + std::to_string(k)] = ndcg_from_rank(m.rank, k);
      }
      out << j.dump() << '\n';
    }
  }
};

// Scores every case with `score_fn(case, scores_out)` and ranks the target
// among all items, minus the history when `exclude_history`.
template <typename ScoreFn>
MetricTable evaluate_cases(std::span<const EvalCase> cases, std::size_t num_items,
                           std::span<const std::size_t> ks, bool exclude_history,
                           ScoreFn&& score_fn) {
  std::vector<UserMetrics> per_user;
  per_user.reserve(cases.size());
  std::vector<double> scores(num_items);
  for (const auto& c : cases) {
    score_fn(c, scores);
    std::span<const std::size_t> excl;
    if (exclude_history) excl = c.history;
    per_user.push_back({c.user, c.target, target_rank(scores, c.target, excl)});
  }
  return MetricTable::from_ranks(std::move(per_user), ks);
}

// Scores of all items for one user under a computed forward state.
inline void model_scores(const ForwardState& st, const ModelConfig& cfg, std::size_t user,
                         std::span<const std::size_t> history, std::vector<double>& out) {
  const Vector q = st.user_fused.row(static_cast<Eigen::Index>(user)) +
                   recent_interest(history, st.item_fused, cfg.recent_window);
  const Eigen::VectorXd s = st.item_fused * q.transpose();
  out.assign(s.data(), s.data() + s.size());
}

inline MetricTable evaluate_model(const ForwardState& st, const ModelConfig& cfg,
                                  std::span<const EvalCase> cases, std::span<const std::size_t> ks,
                                  bool exclude_history = true) {
  return evaluate_cases(cases, static_cast<std::size_t>(st.item_fused.rows()), ks, exclude_history,
                        [&](const EvalCase& c, std::vector<double>& scores) {
                          model_scores(st, cfg, c.user, c.history, scores);
                        });
}

inline MetricTable evaluate_model(const ModelParams& params, const GraphContext& ctx,
                                  const ModelConfig& cfg, std::span<const EvalCase> cases,
                                  std::span<const std::size_t> ks, bool exclude_history = true) {
  const auto st = forward(params, ctx, cfg);
  return evaluate_model(st, cfg, cases, ks, exclude_history);
}

// ---------------------------------------------------------------------------
// Baselines

inline std::vector<double> item_popularity(const Corpus& train) {
  std::vector<double> pop(train.num_items(), 0.0);
  for (const auto& [u, seq] : train.sequences()) {
    for (const auto& e : seq) pop[*train.item_index(e.item_id)] += 1.0;
  }
  return pop;
}

// Ranks items by training interaction count.
inline MetricTable popularity_baseline(const SplitCorpus& split, EvalTarget which,
                                       std::span<const std::size_t> ks, bool exclude_history = true) {
  const auto cases = make_eval_cases(split, which);
  const auto pop = item_popularity(split.train);
  return evaluate_cases(cases, pop.size(), ks, exclude_history,
                        [&](const EvalCase&, std::vector<double>& scores) { scores = pop; });
}

// Session-kNN over whole user histories. Similarity is the cosine between
// binary item-incidence vectors; the top `neighbors` users (sim > 0, ties by
// index) vote for their items with weight = similarity. Items are ranked by
// vote, then by popularity, then by index, so users without any overlapping
// neighbour fall back to the popularity order.
class SknnRecommender {
 public:
  SknnRecommender(const Corpus& train, std::size_t neighbors)
      : neighbors_(neighbors), popularity_(item_popularity(train)) {
    histories_.resize(train.num_users());
    users_of_item_.resize(train.num_items());
    for (const auto& [user, seq] : train.sequences()) {
      const auto u = *train.user_index(user);
      for (const auto& e : seq) {
        const auto x = *train.item_index(e.item_id);
        histories_[u].push_back(x);
        users_of_item_[x].push_back(u);
      }
    }
  }

  // Similarity-weighted neighbour votes for every item.
  std::vector<double> votes(std::size_t user, std::span<const std::size_t> history) const {
    std::vector<double> overlap(histories_.size(), 0.0);
    std::vector<char> in_hist(popularity_.size(), 0);
    std::size_t hist_size = 0;
    for (std::size_t x : history) {
      if (in_hist[x]) continue;
      in_hist[x] = 1;
      ++hist_size;
      for (std::size_t v : users_of_item_[x]) overlap[v] += 1.0;
    }
    std::vector<std::pair<double, std::size_t>> sims;
    for (std::size_t v = 0; v < histories_.size(); ++v) {
      if (v == user || overlap[v] == 0.0 || histories_[v].empty()) continue;
      const double sim =
          overlap[v] / std::sqrt(static_cast<double>(hist_size) * static_cast<double>(histories_[v].size()));
      sims.emplace_back(sim, v);
    }
    std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    if (sims.size() > neighbors_) sims.resize(neighbors_);
    std::vector<double> vote(popularity_.size(), 0.0);
    for (const auto& [sim, v] : sims) {
      for (std::size_t x : histories_[v]) vote[x] += sim;
    }
    return vote;
  }

  std::size_t rank_target(std::size_t user, std::span<const std::size_t> history, std::size_t target,
                          bool exclude_history) const {
    const auto vote = votes(user, history);
    std::vector<char> skip(vote.size(), 0);
    if (exclude_history) {
      for (std::size_t x : history) skip[x] = 1;
    }
    if (skip[target]) throw Error("target item is not among the ranked candidates");
    auto before = [&](std::size_t a, std::size_t b) {
      if (vote[a] != vote[b]) return vote[a] > vote[b];
      if (popularity_[a] != popularity_[b]) return popularity_[a] > popularity_[b];
      return a < b;
    };
    std::size_t rank = 1;
    for (std::size_t x = 0; x < vote.size(); ++x) {
      if (!skip[x] && x != target && before(x, target)) ++rank;
    }
    return rank;
  }

  RankedList rank(std::size_t user, std::span<const std::size_t> history, bool exclude_history) const {
    const auto vote = votes(user, history);
    std::vector<char> skip(vote.size(), 0);
    if (exclude_history) {
      for (std::size_t x : history) skip[x] = 1;
    }
    RankedList out;
    for (std::size_t x = 0; x < vote.size(); ++x) {
      if (!skip[x]) out.push_back(x);
    }
    std::sort(out.begin(), out.end(), [&](std::size_t a, std::size_t b) {
      if (vote[a] != vote[b]) return vote[a] > vote[b];
      if (popularity_[a] != popularity_[b]) return popularity_[a] > popularity_[b];
      return a < b;
    });
    return out;
  }

 private:
  std::size_t neighbors_;
  std::vector<double> popularity_;
  std::vector<std::vector<std::size_t>> histories_;
  std::vector<std::vector<std::size_t>> users_of_item_;
};

inline MetricTable sknn_baseline(const SplitCorpus& split, EvalTarget which,
                                 std::span<const std::size_t> ks, std::size_t neighbors = 50,
                                 bool exclude_history = true) {
  const auto cases = make_eval_cases(split, which);
  SknnRecommender rec(split.train, neighbors);
  std::vector<UserMetrics> per_user;
  for (const auto& c : cases) {
    per_user.push_back({c.user, c.target, rec.rank_target(c.user, c.history, c.target, exclude_history)});
  }
  return MetricTable::from_ranks(std::move(per_user), ks);
}

}  // namespace finerec
