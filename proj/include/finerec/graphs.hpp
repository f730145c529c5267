#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "finerec/corpus.hpp"
#include "finerec/encoder.hpp"
#include "finerec/error.hpp"
#include "finerec/extraction.hpp"

namespace finerec {

// Bipartite user-item graph for one attribute. Each edge carries a frozen
// opinion vector shared by both directions. Adjacency is dense over the
// corpus indices; a node with an empty list is not part of the graph.
struct AttributeGraph {
  struct Neighbor {
    std::size_t node;
    std::size_t edge;
  };

  std::size_t attribute_index = 0;
  std::size_t dim = 0;
  std::vector<TextVector> edge_vectors;
  std::vector<std::vector<Neighbor>> user_adj;
  std::vector<std::vector<Neighbor>> item_adj;

  std::size_t num_edges() const { return edge_vectors.size(); }
  bool has_user(std::size_t u) const { return u < user_adj.size() && !user_adj[u].empty(); }
  bool has_item(std::size_t x) const { return x < item_adj.size() && !item_adj[x].empty(); }

  std::size_t num_user_nodes() const {
    return static_cast<std::size_t>(std::count_if(user_adj.begin(), user_adj.end(),
                                                  [](const auto& a) { return !a.empty(); }));
  }
  std::size_t num_item_nodes() const {
    return static_cast<std::size_t>(std::count_if(item_adj.begin(), item_adj.end(),
                                                  [](const auto& a) { return !a.empty(); }));
  }

  friend bool operator==(const AttributeGraph& a, const AttributeGraph& b) {
    auto same_adj = [](const auto& x, const auto& y) {
      if (x.size() != y.size()) return false;
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i].size() != y[i].size()) return false;
        for (std::size_t k = 0; k < x[i].size(); ++k) {
          if (x[i][k].node != y[i][k].node || x[i][k].edge != y[i][k].edge) return false;
        }
      }
      return true;
    };
    return a.attribute_index == b.attribute_index && a.dim == b.dim &&
           a.edge_vectors == b.edge_vectors && same_adj(a.user_adj, b.user_adj) &&
           same_adj(a.item_adj, b.item_adj);
  }
};

namespace detail {

// Builds a graph from edges given in (user, item) order.
inline AttributeGraph assemble_graph(std::size_t attribute_index, std::size_t dim,
                                     std::size_t num_users, std::size_t num_items,
                                     std::map<std::pair<std::size_t, std::size_t>, TextVector> edges) {
  AttributeGraph g;
  g.attribute_index = attribute_index;
  g.dim = dim;
  g.user_adj.resize(num_users);
  g.item_adj.resize(num_items);
  for (auto& [key, vec] : edges) {
    const auto [u, x] = key;
    const std::size_t e = g.edge_vectors.size();
    g.edge_vectors.push_back(std::move(vec));
    g.user_adj[u].push_back({x, e});
    g.item_adj[x].push_back({u, e});
  }
  // Map iteration already sorts user lists by item; item lists come out
  // sorted by user for the same reason.
  return g;
}

}  // namespace detail

// One graph per attribute from the pair store. Several opinions on the same
// (user, item, attribute) collapse into one edge whose vector is the
// re-normalized mean of the opinion vectors.
inline std::vector<AttributeGraph> build_attribute_graphs(const PairStore& pairs,
                                                          const Corpus& corpus,
                                                          std::size_t num_attributes,
                                                          const TextEncoder& encoder,
                                                          std::size_t dim) {
  std::vector<std::map<std::pair<std::size_t, std::size_t>, TextVector>> edges(num_attributes);
  for (const auto& [key, opinions] : pairs.index()) {
    const auto& [user, item, attr] = key;
    auto u = corpus.user_index(user);
    auto x = corpus.item_index(item);
    if (!u || !x || attr >= num_attributes) {
      throw Error("pair <" + user + ", " + item + ", " + std::to_string(attr) + ", " +
                  *opinions.begin() + "> references an unknown user, item or attribute");
    }
    TextVector mean(dim, 0.0);
    for (const auto& o : opinions) {
      auto v = encoder.encode(o, dim);
      for (std::size_t k = 0; k < dim; ++k) mean[k] += v[k];
    }
    for (double& v : mean) v /= static_cast<double>(opinions.size());
    l2_normalize(mean);
    edges[attr].emplace(std::make_pair(*u, *x), std::move(mean));
  }
  std::vector<AttributeGraph> graphs;
  graphs.reserve(num_attributes);
  for (std::size_t n = 0; n < num_attributes; ++n) {
    graphs.push_back(
        detail::assemble_graph(n, dim, corpus.num_users(), corpus.num_items(), std::move(edges[n])));
  }
  return graphs;
}

// Single graph over every interaction, each edge carrying the encoded
// whole-review text.
inline AttributeGraph build_review_graph(const Corpus& corpus, const TextEncoder& encoder,
                                         std::size_t dim) {
  std::map<std::pair<std::size_t, std::size_t>, TextVector> edges;
  for (const auto& [user, seq] : corpus.sequences()) {
    const auto u = *corpus.user_index(user);
    for (const auto& e : seq) {
      edges.emplace(std::make_pair(u, *corpus.item_index(e.item_id)),
                    encoder.encode(e.review_text, dim));
    }
  }
  return detail::assemble_graph(0, dim, corpus.num_users(), corpus.num_items(), std::move(edges));
}

inline constexpr std::size_t kUnlimitedNeighbors = std::numeric_limits<std::size_t>::max();

// One- and two-hop neighbourhoods of the user-item interaction graph.
struct GlobalInteractionGraph {
  std::vector<std::vector<std::size_t>> items_of_user;
  std::vector<std::vector<std::size_t>> cousers_of_user;
  std::vector<std::vector<std::size_t>> users_of_item;
  std::vector<std::vector<std::size_t>> coitems_of_item;

  friend bool operator==(const GlobalInteractionGraph&, const GlobalInteractionGraph&) = default;
};

namespace detail {

// Two-hop neighbours of every node on one side, ranked by the number of
// shared one-hop neighbours (descending), then index, and truncated to cap.
inline std::vector<std::vector<std::size_t>> two_hop(
    const std::vector<std::vector<std::size_t>>& forward,
    const std::vector<std::vector<std::size_t>>& backward, std::size_t cap) {
  std::vector<std::vector<std::size_t>> out(forward.size());
  std::vector<std::size_t> count(forward.size(), 0);
  std::vector<std::size_t> touched;
  for (std::size_t a = 0; a < forward.size(); ++a) {
    touched.clear();
    for (std::size_t mid : forward[a]) {
      for (std::size_t b : backward[mid]) {
        if (b == a) continue;
        if (count[b]++ == 0) touched.push_back(b);
      }
    }
    std::sort(touched.begin(), touched.end(), [&](std::size_t l, std::size_t r) {
      return count[l] != count[r] ? count[l] > count[r] : l < r;
    });
    for (std::size_t b : touched) count[b] = 0;
    if (touched.size() > cap) touched.resize(cap);
    out[a] = touched;
  }
  return out;
}

}  // namespace detail

inline GlobalInteractionGraph build_global_graph(const Corpus& corpus,
                                                 std::size_t cap = 100) {
  if (cap == 0) throw ConfigError("two-hop cap must be >= 1");
  GlobalInteractionGraph g;
  g.items_of_user.resize(corpus.num_users());
  g.users_of_item.resize(corpus.num_items());
  for (const auto& [user, seq] : corpus.sequences()) {
    const auto u = *corpus.user_index(user);
    for (const auto& e : seq) {
      const auto x = *corpus.item_index(e.item_id);
      g.items_of_user[u].push_back(x);
      g.users_of_item[x].push_back(u);
    }
  }
  for (auto& l : g.items_of_user) std::sort(l.begin(), l.end());
  for (auto& l : g.users_of_item) std::sort(l.begin(), l.end());
  g.cousers_of_user = detail::two_hop(g.items_of_user, g.users_of_item, cap);
  g.coitems_of_item = detail::two_hop(g.users_of_item, g.items_of_user, cap);
  return g;
}

// Writes `graph-<n>.jsonl` edge lists (one line per edge) into `dir`.
inline void dump_graphs(const std::vector<AttributeGraph>& graphs, const Corpus& corpus,
                        const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& g : graphs) {
    std::ofstream out(dir / ("graph-" + std::to_string(g.attribute_index) + ".jsonl"),
                      std::ios::binary);
    if (!out) throw Error("cannot write graph dump in " + dir.string());
    for (std::size_t u = 0; u < g.user_adj.size(); ++u) {
      for (const auto& nb : g.user_adj[u]) {
        nlohmann::ordered_json j;
        j["user"] = corpus.users()[u];
        j["item"] = corpus.items()[nb.node];
        j["vector"] = g.edge_vectors[nb.edge];
        out << j.dump() << '\n';
      }
    }
  }
}

}  // namespace finerec
