#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>
#include <json.hpp>

#include "finerec/error.hpp"
#include "finerec/graphs.hpp"
#include "finerec/rng.hpp"

namespace finerec {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::RowVectorXd;
using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

// How neighbour similarities become convolution weights.
//   clamp:   s = max(cos, 0) + epsilon, normalized to sum 1
//   softmax: softmax over the cosines
enum class SimilarityWeighting { clamp, softmax };

struct ModelConfig {
  std::size_t num_attributes = 7;
  std::size_t dim = 16;            // per-attribute embedding width
  std::size_t layers = 1;          // synchronous convolution rounds
  std::size_t recent_window = 5;   // items averaged into the recent interest
  double epsilon = 1e-8;           // similarity floor
  SimilarityWeighting weighting = SimilarityWeighting::clamp;
  double init_noise = 1.0;         // scale of the noise added to identity W's
  std::size_t two_hop_cap = 100;   // kUnlimitedNeighbors for exact two-hop sets
  bool train_attribute_vectors = false;

  // Ablations.
  bool no_diversity = false;        // uniform neighbour weights
  bool no_opinion = false;          // drop opinion vectors, uniform weights
  bool coarse_single_graph = false; // one graph with whole-review edges
  bool concat_mlp_fusion = false;   // relu(W1 x + b) instead of interaction fusion

  // The coarse variant uses one graph of width N*d so the fused width (and
  // the capacity of everything after the concatenation) is unchanged.
  std::size_t num_graphs() const { return coarse_single_graph ? 1 : num_attributes; }
  std::size_t graph_dim() const { return coarse_single_graph ? num_attributes * dim : dim; }
  std::size_t fused_dim() const { return num_attributes * dim; }
  bool uniform_weights() const { return no_diversity || no_opinion; }

  void validate() const {
    if (num_attributes < 1) throw ConfigError("num_attributes must be >= 1");
    if (dim < 1) throw ConfigError("dim must be >= 1");
    if (layers < 1) throw ConfigError("layers must be >= 1");
    if (recent_window < 1) throw ConfigError("recent_window must be >= 1");
    if (!(epsilon >= 0)) throw ConfigError("epsilon must be >= 0");
    if (two_hop_cap < 1) throw ConfigError("two_hop_cap must be >= 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["num_attributes"] = c.num_attributes;
  j["dim"] = c.dim;
  j["layers"] = c.layers;
  j["recent_window"] = c.recent_window;
  j["epsilon"] = c.epsilon;
  j["weighting"] = c.weighting == SimilarityWeighting::clamp ? "clamp" : "softmax";
  j["init_noise"] = c.init_noise;
  j["two_hop_cap"] = c.two_hop_cap == kUnlimitedNeighbors ? -1 : static_cast<long long>(c.two_hop_cap);
  j["train_attribute_vectors"] = c.train_attribute_vectors;
  j["no_diversity"] = c.no_diversity;
  j["no_opinion"] = c.no_opinion;
  j["coarse_single_graph"] = c.coarse_single_graph;
  j["concat_mlp_fusion"] = c.concat_mlp_fusion;
  return j;
}

// Missing keys keep the values already in `c`.
template <typename Json>
void update_from_json(ModelConfig& c, const Json& j) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).template get<std::decay_t<decltype(field)>>();
  };
  get("num_attributes", c.num_attributes);
  get("dim", c.dim);
  get("layers", c.layers);
  get("recent_window", c.recent_window);
  get("epsilon", c.epsilon);
  get("init_noise", c.init_noise);
  get("train_attribute_vectors", c.train_attribute_vectors);
  get("no_diversity", c.no_diversity);
  get("no_opinion", c.no_opinion);
  get("coarse_single_graph", c.coarse_single_graph);
  get("concat_mlp_fusion", c.concat_mlp_fusion);
  if (j.contains("weighting")) {
    auto w = j.at("weighting").template get<std::string>();
    if (w == "clamp") {
      c.weighting = SimilarityWeighting::clamp;
    } else if (w == "softmax") {
      c.weighting = SimilarityWeighting::softmax;
    } else {
      throw ConfigError("unknown weighting '" + w + "' (expected clamp or softmax)");
    }
  }
  if (j.contains("two_hop_cap")) {
    auto cap = j.at("two_hop_cap").template get<long long>();
    c.two_hop_cap = cap < 0 ? kUnlimitedNeighbors : static_cast<std::size_t>(cap);
  }
}

// Trainable tables plus the frozen attribute vectors. Every block is a
// row-major matrix so parameters, gradients and optimizer moments share one
// layout.
struct ModelParams {
  std::vector<Matrix> user_emb;  // per graph: |U| x graph_dim
  std::vector<Matrix> item_emb;  // per graph: |X| x graph_dim
  Matrix attr_vec;               // num_graphs x graph_dim
  Matrix w1, w2, w3, w4;         // fused_dim x fused_dim
  Matrix fusion_bias;            // 1 x fused_dim, used by the concat-MLP fusion

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    for (std::size_t n = 0; n < self.user_emb.size(); ++n) {
      f("user_emb." + std::to_string(n), self.user_emb[n]);
    }
    for (std::size_t n = 0; n < self.item_emb.size(); ++n) {
      f("item_emb." + std::to_string(n), self.item_emb[n]);
    }
    f(std::string("attr_vec"), self.attr_vec);
    f(std::string("W1"), self.w1);
    f(std::string("W2"), self.w2);
    f(std::string("W3"), self.w3);
    f(std::string("W4"), self.w4);
    f(std::string("fusion_bias"), self.fusion_bias);
  }

  template <typename F>
  void for_each_block(F&& f) { visit(*this, std::forward<F>(f)); }
  template <typename F>
  void for_each_block(F&& f) const { visit(*this, std::forward<F>(f)); }

  std::vector<std::pair<std::string, Matrix*>> blocks() {
    std::vector<std::pair<std::string, Matrix*>> out;
    for_each_block([&](const std::string& name, Matrix& m) { out.emplace_back(name, &m); });
    return out;
  }

  std::size_t num_users() const { return user_emb.empty() ? 0 : user_emb[0].rows(); }
  std::size_t num_items() const { return item_emb.empty() ? 0 : item_emb[0].rows(); }

  ModelParams zeros_like() const {
    ModelParams z = *this;
    z.for_each_block([](const std::string&, Matrix& m) { m.setZero(); });
    return z;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    bool same = a.user_emb.size() == b.user_emb.size() && a.item_emb.size() == b.item_emb.size();
    if (!same) return false;
    std::vector<const Matrix*> lhs, rhs;
    a.for_each_block([&](const std::string&, const Matrix& m) { lhs.push_back(&m); });
    b.for_each_block([&](const std::string&, const Matrix& m) { rhs.push_back(&m); });
    for (std::size_t i = 0; i < lhs.size(); ++i) {
      if (lhs[i]->rows() != rhs[i]->rows() || lhs[i]->cols() != rhs[i]->cols()) return false;
      if (*lhs[i] != *rhs[i]) return false;
    }
    return true;
  }
};

// Embeddings ~ U[-1/sqrt(w), 1/sqrt(w)] with w the graph width; W1..W4 are
// identity plus U[-1/sqrt(Nd), 1/sqrt(Nd)] noise scaled by init_noise. Draw
// order is fixed (users, items per graph, then W1..W4) so a seed pins every
// value.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed, std::size_t num_users,
                               std::size_t num_items, const Matrix& attr_vectors) {
  cfg.validate();
  const auto G = cfg.num_graphs();
  const auto gd = cfg.graph_dim();
  const auto D = cfg.fused_dim();
  if (static_cast<std::size_t>(attr_vectors.rows()) != G ||
      static_cast<std::size_t>(attr_vectors.cols()) != gd) {
    throw ShapeError("attribute vectors must be " + std::to_string(G) + "x" + std::to_string(gd));
  }
  Xoshiro256 rng(seed);
  ModelParams p;
  const double emb_bound = 1.0 / std::sqrt(static_cast<double>(gd));
  auto fill = [&](Matrix& m, double bound) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-bound, bound);
    }
  };
  for (std::size_t n = 0; n < G; ++n) {
    p.user_emb.emplace_back(num_users, gd);
    fill(p.user_emb.back(), emb_bound);
    p.item_emb.emplace_back(num_items, gd);
    fill(p.item_emb.back(), emb_bound);
  }
  p.attr_vec = attr_vectors;
  const double w_bound = 1.0 / std::sqrt(static_cast<double>(D));
  for (Matrix* w : {&p.w1, &p.w2, &p.w3, &p.w4}) {
    w->resize(D, D);
    fill(*w, w_bound);
    *w *= cfg.init_noise;
    w->diagonal().array() += 1.0;
  }
  p.fusion_bias = Matrix::Zero(1, D);
  return p;
}

// ---------------------------------------------------------------------------
// Diversity-aware convolution

// Row-normalized neighbourhood operators of the global interaction graph.
struct FusionOperators {
  SparseMatrix user_items;  // mean over X_u
  SparseMatrix user_users;  // mean over U_u
  SparseMatrix item_users;  // mean over U_x
  SparseMatrix item_items;  // mean over X_x
  SparseMatrix user_items_t, user_users_t, item_users_t, item_items_t;
};

inline SparseMatrix mean_operator(const std::vector<std::vector<std::size_t>>& lists,
                                  std::size_t cols) {
  std::vector<Eigen::Triplet<double>> trips;
  for (std::size_t r = 0; r < lists.size(); ++r) {
    const double w = lists[r].empty() ? 0.0 : 1.0 / static_cast<double>(lists[r].size());
    for (std::size_t c : lists[r]) {
      trips.emplace_back(static_cast<int>(r), static_cast<int>(c), w);
    }
  }
  SparseMatrix m(static_cast<Eigen::Index>(lists.size()), static_cast<Eigen::Index>(cols));
  m.setFromTriplets(trips.begin(), trips.end());
  return m;
}

inline FusionOperators build_fusion_operators(const GlobalInteractionGraph& g) {
  const auto nu = g.items_of_user.size();
  const auto nx = g.users_of_item.size();
  FusionOperators ops;
  ops.user_items = mean_operator(g.items_of_user, nx);
  ops.user_users = mean_operator(g.cousers_of_user, nu);
  ops.item_users = mean_operator(g.users_of_item, nu);
  ops.item_items = mean_operator(g.coitems_of_item, nx);
  ops.user_items_t = ops.user_items.transpose();
  ops.user_users_t = ops.user_users.transpose();
  ops.item_users_t = ops.item_users.transpose();
  ops.item_items_t = ops.item_items.transpose();
  return ops;
}

// Everything the forward pass needs besides the parameters.
struct GraphContext {
  std::vector<AttributeGraph> graphs;
  GlobalInteractionGraph global;
  FusionOperators ops;
};

inline GraphContext make_context(std::vector<AttributeGraph> graphs, GlobalInteractionGraph global) {
  GraphContext ctx;
  ctx.graphs = std::move(graphs);
  ctx.global = std::move(global);
  ctx.ops = build_fusion_operators(ctx.global);
  return ctx;
}

// cos(u, v); 0 when either vector is zero.
inline double cosine(const Vector& u, const Vector& v) {
  const double nu = u.norm();
  const double nv = v.norm();
  if (nu == 0.0 || nv == 0.0) return 0.0;
  return u.dot(v) / (nu * nv);
}

namespace detail {

struct NodeWeights {
  std::vector<double> alpha;
  std::vector<double> cosine;
  std::vector<double> s;
  double total = 0.0;
};

// Weights of `center` over its neighbours, scored against attr + neighbour.
inline void node_weights(const Vector& center, const std::vector<AttributeGraph::Neighbor>& nbrs,
                         const Matrix& other, const Vector& attr, const ModelConfig& cfg,
                         NodeWeights& w) {
  const std::size_t k = nbrs.size();
  w.alpha.assign(k, 0.0);
  w.cosine.assign(k, 0.0);
  w.s.assign(k, 0.0);
  if (cfg.uniform_weights()) {
    std::fill(w.alpha.begin(), w.alpha.end(), 1.0 / static_cast<double>(k));
    std::fill(w.s.begin(), w.s.end(), 1.0);
    w.total = static_cast<double>(k);
    return;
  }
  for (std::size_t j = 0; j < k; ++j) {
    w.cosine[j] = cosine(center, attr + other.row(static_cast<Eigen::Index>(nbrs[j].node)));
  }
  if (cfg.weighting == SimilarityWeighting::clamp) {
    for (std::size_t j = 0; j < k; ++j) w.s[j] = std::max(w.cosine[j], 0.0) + cfg.epsilon;
  } else {
    const double mx = *std::max_element(w.cosine.begin(), w.cosine.end());
    for (std::size_t j = 0; j < k; ++j) w.s[j] = std::exp(w.cosine[j] - mx);
  }
  w.total = 0.0;
  for (double s : w.s) w.total += s;
  if (!(w.total > 0.0)) {
    // Only reachable with epsilon = 0 and no positive cosine.
    std::fill(w.alpha.begin(), w.alpha.end(), 1.0 / static_cast<double>(k));
    return;
  }
  for (std::size_t j = 0; j < k; ++j) w.alpha[j] = w.s[j] / w.total;
}

// out[node] = self[node] + sum_j w_j (other[j] + o_j) for every node with
// neighbours; other rows are copied unchanged.
inline void aggregate_side(const std::vector<std::vector<AttributeGraph::Neighbor>>& adj,
                           const Matrix& self, const Matrix& other,
                           const std::vector<TextVector>& edge_vectors, const Vector& attr,
                           const ModelConfig& cfg, Matrix& out) {
  out = self;
  NodeWeights w;
  const auto dim = self.cols();
  for (std::size_t node = 0; node < adj.size(); ++node) {
    const auto& nbrs = adj[node];
    if (nbrs.empty()) continue;
    const auto r = static_cast<Eigen::Index>(node);
    node_weights(self.row(r), nbrs, other, attr, cfg, w);
    for (std::size_t j = 0; j < nbrs.size(); ++j) {
      out.row(r) += w.alpha[j] * other.row(static_cast<Eigen::Index>(nbrs[j].node));
      if (!cfg.no_opinion) {
        out.row(r) += w.alpha[j] * Eigen::Map<const Vector>(edge_vectors[nbrs[j].edge].data(), dim);
      }
    }
  }
}

// Adds d(loss)/d(self) and d(loss)/d(other) contributions of aggregate_side
// given the gradient g_out of its output. The identity path is not added
// here.
inline void aggregate_side_backward(const std::vector<std::vector<AttributeGraph::Neighbor>>& adj,
                                    const Matrix& self, const Matrix& other,
                                    const std::vector<TextVector>& edge_vectors, const Vector& attr,
                                    const ModelConfig& cfg, const Matrix& g_out, Matrix& g_self,
                                    Matrix& g_other, Vector* g_attr) {
  NodeWeights w;
  const auto dim = self.cols();
  std::vector<double> g_alpha;
  for (std::size_t node = 0; node < adj.size(); ++node) {
    const auto& nbrs = adj[node];
    if (nbrs.empty()) continue;
    const auto r = static_cast<Eigen::Index>(node);
    const Vector g = g_out.row(r);
    const Vector center = self.row(r);
    node_weights(center, nbrs, other, attr, cfg, w);
    for (std::size_t j = 0; j < nbrs.size(); ++j) {
      g_other.row(static_cast<Eigen::Index>(nbrs[j].node)) += w.alpha[j] * g;
    }
    if (cfg.uniform_weights() || !(w.total > 0.0)) continue;

    // Through alpha_j = s_j / sum_k s_k and s_j = f(cos_j).
    g_alpha.assign(nbrs.size(), 0.0);
    double mean_g = 0.0;
    for (std::size_t j = 0; j < nbrs.size(); ++j) {
      Vector v = other.row(static_cast<Eigen::Index>(nbrs[j].node));
      if (!cfg.no_opinion) v += Eigen::Map<const Vector>(edge_vectors[nbrs[j].edge].data(), dim);
      g_alpha[j] = g.dot(v);
      mean_g += w.alpha[j] * g_alpha[j];
    }
    const double cu = center.norm();
    if (cu == 0.0) continue;
    for (std::size_t j = 0; j < nbrs.size(); ++j) {
      const double g_s = (g_alpha[j] - mean_g) / w.total;
      const double ds_dcos = cfg.weighting == SimilarityWeighting::clamp
                                 ? (w.cosine[j] > 0.0 ? 1.0 : 0.0)
                                 : w.s[j];
      const double g_cos = g_s * ds_dcos;
      if (g_cos == 0.0) continue;
      const auto nb = static_cast<Eigen::Index>(nbrs[j].node);
      const Vector c = attr + other.row(nb);
      const double cc = c.norm();
      if (cc == 0.0) continue;
      const double cosv = w.cosine[j];
      g_self.row(r) += g_cos * (c / (cu * cc) - cosv * center / (cu * cu));
      const Vector g_c = g_cos * (center / (cu * cc) - cosv * c / (cc * cc));
      g_other.row(nb) += g_c;
      if (g_attr) *g_attr += g_c;
    }
  }
}

}  // namespace detail

// Normalized neighbour weights (alpha) of `user` in `graph`.
inline std::vector<double> user_weights(const AttributeGraph& graph, const Matrix& users,
                                        const Matrix& items, const Vector& attr,
                                        std::size_t user, const ModelConfig& cfg) {
  detail::NodeWeights w;
  if (!graph.has_user(user)) return {};
  detail::node_weights(users.row(static_cast<Eigen::Index>(user)), graph.user_adj[user], items,
                       attr, cfg, w);
  return w.alpha;
}

// Normalized neighbour weights (beta) of `item` in `graph`.
inline std::vector<double> item_weights(const AttributeGraph& graph, const Matrix& users,
                                        const Matrix& items, const Vector& attr,
                                        std::size_t item, const ModelConfig& cfg) {
  detail::NodeWeights w;
  if (!graph.has_item(item)) return {};
  detail::node_weights(items.row(static_cast<Eigen::Index>(item)), graph.item_adj[item], users,
                       attr, cfg, w);
  return w.alpha;
}

// One convolution step for a single user: u + sum_j alpha_j (x_j + o_ij).
inline Vector conv_user(const AttributeGraph& graph, const Matrix& users, const Matrix& items,
                        const Vector& attr, std::size_t user, const ModelConfig& cfg) {
  Vector out = users.row(static_cast<Eigen::Index>(user));
  if (!graph.has_user(user)) return out;
  const auto alpha = user_weights(graph, users, items, attr, user, cfg);
  const auto& nbrs = graph.user_adj[user];
  for (std::size_t j = 0; j < nbrs.size(); ++j) {
    out += alpha[j] * items.row(static_cast<Eigen::Index>(nbrs[j].node));
    if (!cfg.no_opinion) {
      out += alpha[j] * Eigen::Map<const Vector>(graph.edge_vectors[nbrs[j].edge].data(),
                                                 users.cols());
    }
  }
  return out;
}

// One convolution step for a single item: x + sum_i beta_i (u_i + o_ij).
inline Vector conv_item(const AttributeGraph& graph, const Matrix& users, const Matrix& items,
                        const Vector& attr, std::size_t item, const ModelConfig& cfg) {
  Vector out = items.row(static_cast<Eigen::Index>(item));
  if (!graph.has_item(item)) return out;
  const auto beta = item_weights(graph, users, items, attr, item, cfg);
  const auto& nbrs = graph.item_adj[item];
  for (std::size_t j = 0; j < nbrs.size(); ++j) {
    out += beta[j] * users.row(static_cast<Eigen::Index>(nbrs[j].node));
    if (!cfg.no_opinion) {
      out += beta[j] * Eigen::Map<const Vector>(graph.edge_vectors[nbrs[j].edge].data(),
                                                items.cols());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

struct ForwardState {
  // [graph][round], round 0 being the base tables.
  std::vector<std::vector<Matrix>> user_layers;
  std::vector<std::vector<Matrix>> item_layers;
  Matrix user_hat, item_hat;      // concatenations
  Matrix agg_ux, agg_uu, agg_xu, agg_xx;  // neighbourhood means feeding W1..W4
  Matrix user_pre, item_pre;      // concat-MLP pre-activations
  Matrix user_fused, item_fused;
};

inline void check_shapes(const ModelParams& p, const GraphContext& ctx, const ModelConfig& cfg) {
  const auto G = cfg.num_graphs();
  const auto gd = static_cast<Eigen::Index>(cfg.graph_dim());
  const auto D = static_cast<Eigen::Index>(cfg.fused_dim());
  if (p.user_emb.size() != G || p.item_emb.size() != G || ctx.graphs.size() != G) {
    throw ShapeError("expected " + std::to_string(G) + " graphs and embedding tables, got " +
                     std::to_string(ctx.graphs.size()) + " graphs and " +
                     std::to_string(p.user_emb.size()) + " tables");
  }
  const auto nu = static_cast<Eigen::Index>(ctx.global.items_of_user.size());
  const auto nx = static_cast<Eigen::Index>(ctx.global.users_of_item.size());
  for (std::size_t n = 0; n < G; ++n) {
    if (p.user_emb[n].rows() != nu || p.user_emb[n].cols() != gd || p.item_emb[n].rows() != nx ||
        p.item_emb[n].cols() != gd) {
      throw ShapeError("embedding table " + std::to_string(n) + " is " +
                       std::to_string(p.user_emb[n].rows()) + "x" +
                       std::to_string(p.user_emb[n].cols()) + " users / " +
                       std::to_string(p.item_emb[n].rows()) + " items, corpus has " +
                       std::to_string(nu) + " users and " + std::to_string(nx) + " items of width " +
                       std::to_string(gd));
    }
    if (ctx.graphs[n].user_adj.size() != static_cast<std::size_t>(nu) ||
        ctx.graphs[n].item_adj.size() != static_cast<std::size_t>(nx)) {
      throw ShapeError("graph " + std::to_string(n) + " does not match the corpus size");
    }
  }
  const std::pair<const char*, const Matrix*> fusion[] = {
      {"W1", &p.w1}, {"W2", &p.w2}, {"W3", &p.w3}, {"W4", &p.w4}};
  for (const auto& [name, w] : fusion) {
    if (w->rows() != D || w->cols() != D) {
      throw ShapeError(std::string("fusion matrix ") + name + " is " + std::to_string(w->rows()) +
                       "x" + std::to_string(w->cols()) + ", expected " + std::to_string(D) + "x" +
                       std::to_string(D));
    }
  }
  if (p.fusion_bias.rows() != 1 || p.fusion_bias.cols() != D) {
    throw ShapeError("fusion bias must be 1x" + std::to_string(D));
  }
}

// L synchronous rounds per graph; round t reads only round t-1 values.
inline void run_convolution(const GraphContext& ctx, const ModelParams& p, const ModelConfig& cfg,
                            ForwardState& st) {
  const auto G = cfg.num_graphs();
  st.user_layers.assign(G, {});
  st.item_layers.assign(G, {});
  for (std::size_t n = 0; n < G; ++n) {
    const auto& g = ctx.graphs[n];
    const Vector attr = p.attr_vec.row(static_cast<Eigen::Index>(n));
    auto& ul = st.user_layers[n];
    auto& xl = st.item_layers[n];
    ul.reserve(cfg.layers + 1);
    xl.reserve(cfg.layers + 1);
    ul.push_back(p.user_emb[n]);
    xl.push_back(p.item_emb[n]);
    for (std::size_t t = 1; t <= cfg.layers; ++t) {
      Matrix u_next, x_next;
      detail::aggregate_side(g.user_adj, ul[t - 1], xl[t - 1], g.edge_vectors, attr, cfg, u_next);
      detail::aggregate_side(g.item_adj, xl[t - 1], ul[t - 1], g.edge_vectors, attr, cfg, x_next);
      ul.push_back(std::move(u_next));
      xl.push_back(std::move(x_next));
    }
  }
}

inline void fuse(const GraphContext& ctx, const ModelParams& p, const ModelConfig& cfg,
                 ForwardState& st) {
  const auto G = cfg.num_graphs();
  const auto gd = static_cast<Eigen::Index>(cfg.graph_dim());
  const auto nu = p.user_emb[0].rows();
  const auto nx = p.item_emb[0].rows();
  const auto D = static_cast<Eigen::Index>(cfg.fused_dim());
  st.user_hat.resize(nu, D);
  st.item_hat.resize(nx, D);
  for (std::size_t n = 0; n < G; ++n) {
    const auto off = static_cast<Eigen::Index>(n) * gd;
    st.user_hat.middleCols(off, gd) = st.user_layers[n].back();
    st.item_hat.middleCols(off, gd) = st.item_layers[n].back();
  }
  if (cfg.concat_mlp_fusion) {
    st.user_pre = st.user_hat * p.w1.transpose();
    st.user_pre.rowwise() += p.fusion_bias.row(0);
    st.item_pre = st.item_hat * p.w1.transpose();
    st.item_pre.rowwise() += p.fusion_bias.row(0);
    st.user_fused = st.user_pre.cwiseMax(0.0);
    st.item_fused = st.item_pre.cwiseMax(0.0);
    return;
  }
  st.agg_ux = ctx.ops.user_items * st.item_hat;
  st.agg_uu = ctx.ops.user_users * st.user_hat;
  st.agg_xu = ctx.ops.item_users * st.user_hat;
  st.agg_xx = ctx.ops.item_items * st.item_hat;
  st.user_fused = st.user_hat + st.agg_ux * p.w1.transpose() + st.agg_uu * p.w2.transpose();
  st.item_fused = st.item_hat + st.agg_xu * p.w3.transpose() + st.agg_xx * p.w4.transpose();
}

// Full forward pass: convolution on every graph, concatenation, fusion.
inline ForwardState forward(const ModelParams& p, const GraphContext& ctx, const ModelConfig& cfg) {
  check_shapes(p, ctx, cfg);
  ForwardState st;
  run_convolution(ctx, p, cfg, st);
  fuse(ctx, p, cfg, st);
  return st;
}

// Gradients of the loss with respect to every parameter block, given the
// gradients with respect to the fused user and item tables.
inline ModelParams backward(const ForwardState& st, const ModelParams& p, const GraphContext& ctx,
                            const ModelConfig& cfg, const Matrix& g_user_fused,
                            const Matrix& g_item_fused) {
  ModelParams grads = p.zeros_like();
  Matrix g_user_hat, g_item_hat;
  if (cfg.concat_mlp_fusion) {
    const Matrix gu = g_user_fused.cwiseProduct((st.user_pre.array() > 0.0).cast<double>().matrix());
    const Matrix gx = g_item_fused.cwiseProduct((st.item_pre.array() > 0.0).cast<double>().matrix());
    grads.w1 = gu.transpose() * st.user_hat + gx.transpose() * st.item_hat;
    grads.fusion_bias = gu.colwise().sum() + gx.colwise().sum();
    g_user_hat = gu * p.w1;
    g_item_hat = gx * p.w1;
  } else {
    grads.w1 = g_user_fused.transpose() * st.agg_ux;
    grads.w2 = g_user_fused.transpose() * st.agg_uu;
    grads.w3 = g_item_fused.transpose() * st.agg_xu;
    grads.w4 = g_item_fused.transpose() * st.agg_xx;
    const Matrix gu_w2 = g_user_fused * p.w2;
    const Matrix gx_w3 = g_item_fused * p.w3;
    const Matrix gu_w1 = g_user_fused * p.w1;
    const Matrix gx_w4 = g_item_fused * p.w4;
    g_user_hat = g_user_fused + ctx.ops.user_users_t * gu_w2 + ctx.ops.item_users_t * gx_w3;
    g_item_hat = g_item_fused + ctx.ops.user_items_t * gu_w1 + ctx.ops.item_items_t * gx_w4;
  }

  const auto G = cfg.num_graphs();
  const auto gd = static_cast<Eigen::Index>(cfg.graph_dim());
  for (std::size_t n = 0; n < G; ++n) {
    const auto& g = ctx.graphs[n];
    const Vector attr = p.attr_vec.row(static_cast<Eigen::Index>(n));
    const auto off = static_cast<Eigen::Index>(n) * gd;
    Matrix gu = g_user_hat.middleCols(off, gd);
    Matrix gx = g_item_hat.middleCols(off, gd);
    Vector g_attr = Vector::Zero(gd);
    for (std::size_t t = cfg.layers; t >= 1; --t) {
      const auto& u_prev = st.user_layers[n][t - 1];
      const auto& x_prev = st.item_layers[n][t - 1];
      Matrix gu_prev = gu;
      Matrix gx_prev = gx;
      detail::aggregate_side_backward(g.user_adj, u_prev, x_prev, g.edge_vectors, attr, cfg, gu,
                                      gu_prev, gx_prev, &g_attr);
      detail::aggregate_side_backward(g.item_adj, x_prev, u_prev, g.edge_vectors, attr, cfg, gx,
                                      gx_prev, gu_prev, &g_attr);
      gu = std::move(gu_prev);
      gx = std::move(gx_prev);
    }
    grads.user_emb[n] = std::move(gu);
    grads.item_emb[n] = std::move(gx);
    if (cfg.train_attribute_vectors) grads.attr_vec.row(static_cast<Eigen::Index>(n)) = g_attr;
  }

  grads.for_each_block([](const std::string& name, const Matrix& m) {
    if (!m.allFinite()) throw NumericError("non-finite gradient in parameter block " + name);
  });
  return grads;
}

// Mean of the fused vectors of the last min(l, |prefix|) items.
inline Vector recent_interest(std::span<const std::size_t> prefix, const Matrix& fused_items,
                              std::size_t l) {
  if (prefix.empty()) throw Error("recent interest needs at least one history item");
  const std::size_t take = std::min(l, prefix.size());
  Vector acc = Vector::Zero(fused_items.cols());
  for (std::size_t k = prefix.size() - take; k < prefix.size(); ++k) {
    acc += fused_items.row(static_cast<Eigen::Index>(prefix[k]));
  }
  return acc / static_cast<double>(take);
}

// (u + recent) . x
inline double score(const Vector& user, const Vector& recent, const Vector& item) {
  return (user + recent).dot(item);
}

}  // namespace finerec
