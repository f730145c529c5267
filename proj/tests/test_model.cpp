// Graphs, model forward/backward, checkpoints, training and evaluation.

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "finerec/checkpoint.hpp"
#include "finerec/evaluation.hpp"
#include "finerec/graphs.hpp"
#include "finerec/model.hpp"
#include "finerec/training.hpp"
#include "helpers.hpp"
#include "toy.hpp"

using namespace finerec;
using testutil::TempDir;

namespace {

ModelConfig small_cfg(std::size_t N = 2, std::size_t d = 4) {
  ModelConfig c;
  c.num_attributes = N;
  c.dim = d;
  return c;
}

Vector row_of(std::initializer_list<double> v) {
  Vector r(static_cast<Eigen::Index>(v.size()));
  Eigen::Index k = 0;
  for (double x : v) r(k++) = x;
  return r;
}

Matrix rows_of(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()),
           static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index r = 0;
  for (const auto& row : rows) m.row(r++) = row_of(row);
  return m;
}

// Graph from explicit (user, item) -> opinion vector edges.
AttributeGraph graph_of(std::size_t nu, std::size_t nx,
                        std::map<std::pair<std::size_t, std::size_t>, TextVector> edges,
                        std::size_t dim) {
  return detail::assemble_graph(0, dim, nu, nx, std::move(edges));
}

// Scalar-by-scalar evaluation of one clamp-weighted convolution step for a
// node, written independently of the Eigen code path.
std::vector<double> conv_oracle(const std::vector<double>& center,
                                const std::vector<std::vector<double>>& nbr,
                                const std::vector<std::vector<double>>& op,
                                const std::vector<double>& attr, double eps,
                                std::vector<double>* weights = nullptr) {
  const std::size_t d = center.size();
  auto dot = [&](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t k = 0; k < d; ++k) s += a[k] * b[k];
    return s;
  };
  std::vector<double> s(nbr.size());
  double total = 0;
  for (std::size_t j = 0; j < nbr.size(); ++j) {
    std::vector<double> c(d);
    for (std::size_t k = 0; k < d; ++k) c[k] = attr[k] + nbr[j][k];
    const double nc = std::sqrt(dot(center, center)), nn = std::sqrt(dot(c, c));
    const double cs = (nc == 0 || nn == 0) ? 0.0 : dot(center, c) / (nc * nn);
    s[j] = (cs > 0 ? cs : 0.0) + eps;
    total += s[j];
  }
  std::vector<double> out = center;
  for (std::size_t j = 0; j < nbr.size(); ++j) {
    const double a = s[j] / total;
    if (weights) weights->push_back(a);
    for (std::size_t k = 0; k < d; ++k) out[k] += a * (nbr[j][k] + op[j][k]);
  }
  return out;
}

std::vector<double> to_std(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

}  // namespace

// ---------------------------------------------------------------------------
// graphs

TEST(AttributeGraphs, SinglePair) {
  auto corpus = Corpus::from_records(std::vector<InteractionRecord>{{"u1", "x1", 1, ""}, {"u2", "x2", 2, ""}});
  PairStore p;
  p.insert({"u1", "x1", 0, "nice"});
  HashingEncoder enc;
  auto gs = build_attribute_graphs(p, corpus, 3, enc, 8);
  ASSERT_EQ(gs.size(), 3u);
  EXPECT_EQ(gs[0].num_user_nodes(), 1u);
  EXPECT_EQ(gs[0].num_item_nodes(), 1u);
  EXPECT_EQ(gs[0].num_edges(), 1u);
  ASSERT_EQ(gs[0].user_adj[0].size(), 1u);
  EXPECT_EQ(gs[0].user_adj[0][0].node, 0u);
  EXPECT_EQ(gs[0].item_adj[0][0].node, 0u);
  EXPECT_EQ(gs[0].edge_vectors[0], encode_text("nice", 8));
  EXPECT_EQ(gs[2].num_edges(), 0u);
  EXPECT_EQ(gs[2].num_user_nodes(), 0u);
}

TEST(AttributeGraphs, MultipleOpinionsMeanThenNormalize) {
  auto corpus = Corpus::from_records(std::vector<InteractionRecord>{{"u1", "x1", 1, ""}});
  PairStore p;
  p.insert({"u1", "x1", 0, "nice"});
  p.insert({"u1", "x1", 0, "great"});
  HashingEncoder enc;
  auto gs = build_attribute_graphs(p, corpus, 1, enc, 16);
  ASSERT_EQ(gs[0].num_edges(), 1u);
  auto a = encode_text("nice", 16), b = encode_text("great", 16);
  std::vector<double> m(16);
  double n = 0;
  for (int k = 0; k < 16; ++k) {
    m[k] = (a[k] + b[k]) / 2;
    n += m[k] * m[k];
  }
  for (int k = 0; k < 16; ++k) EXPECT_NEAR(gs[0].edge_vectors[0][k], m[k] / std::sqrt(n), 1e-15);
}

TEST(AttributeGraphs, UnknownUserNamesPair) {
  auto corpus = Corpus::from_records(std::vector<InteractionRecord>{{"u1", "x1", 1, ""}});
  PairStore p;
  p.insert({"ghost", "x1", 0, "nice"});
  HashingEncoder enc;
  try {
    build_attribute_graphs(p, corpus, 1, enc, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("ghost"), std::string::npos);
  }
}

TEST(AttributeGraphs, SymmetryDegreeAndDeterminism) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto toy = testutil::make_toy(small_cfg(3, 6), 9, 12, seed, 0.5);
    for (const auto& g : toy.ctx.graphs) {
      for (std::size_t u = 0; u < g.user_adj.size(); ++u) {
        for (const auto& nb : g.user_adj[u]) {
          const auto& back = g.item_adj[nb.node];
          auto it = std::find_if(back.begin(), back.end(), [&](const auto& b) { return b.node == u; });
          ASSERT_NE(it, back.end());
          ASSERT_EQ(it->edge, nb.edge);
        }
        for (std::size_t k = 1; k < g.user_adj[u].size(); ++k) {
          ASSERT_LT(g.user_adj[u][k - 1].node, g.user_adj[u][k].node);
        }
      }
      std::size_t degree_sum = 0;
      for (const auto& adj : g.item_adj) degree_sum += adj.size();
      ASSERT_EQ(degree_sum, g.num_edges());
    }
    auto again = testutil::make_toy(small_cfg(3, 6), 9, 12, seed, 0.5);
    ASSERT_EQ(again.ctx.graphs, toy.ctx.graphs);
    ASSERT_EQ(again.ctx.global, toy.ctx.global);
  }
}

TEST(GlobalGraph, TwoHopByHand) {
  auto c = Corpus::from_records(std::vector<InteractionRecord>{
      {"u1", "A", 1, ""}, {"u1", "B", 2, ""}, {"u2", "B", 1, ""}, {"u2", "C", 2, ""}, {"u3", "D", 1, ""}});
  auto g = build_global_graph(c);
  const auto u1 = *c.user_index("u1"), u2 = *c.user_index("u2"), u3 = *c.user_index("u3");
  const auto A = *c.item_index("A"), B = *c.item_index("B");
  EXPECT_EQ(g.cousers_of_user[u1], std::vector<std::size_t>{u2});
  EXPECT_EQ(g.coitems_of_item[A], std::vector<std::size_t>{B});
  EXPECT_TRUE(g.cousers_of_user[u3].empty());
}

TEST(GlobalGraph, CapKeepsBestThenLowestIndex) {
  auto c = Corpus::from_records(std::vector<InteractionRecord>{
      {"u0", "A", 1, ""}, {"u1", "A", 1, ""}, {"u2", "A", 1, ""}, {"u2", "B", 2, ""}, {"u1", "B", 2, ""}});
  auto g = build_global_graph(c, 1);
  // u0 shares one item with u1 and u2: tie -> u1. u1 shares two with u2.
  EXPECT_EQ(g.cousers_of_user[0], std::vector<std::size_t>{1});
  EXPECT_EQ(g.cousers_of_user[1], std::vector<std::size_t>{2});
  EXPECT_EQ(g.cousers_of_user[2], std::vector<std::size_t>{1});
  EXPECT_THROW(build_global_graph(c, 0), ConfigError);
}

TEST(GlobalGraph, ThreeUsersShareOneItemCapOne) {
  auto c = Corpus::from_records(
      std::vector<InteractionRecord>{{"u0", "A", 1, ""}, {"u1", "A", 1, ""}, {"u2", "A", 1, ""}});
  auto g = build_global_graph(c, 1);
  EXPECT_EQ(g.cousers_of_user[0], std::vector<std::size_t>{1});
  EXPECT_EQ(g.cousers_of_user[1], std::vector<std::size_t>{0});
  EXPECT_EQ(g.cousers_of_user[2], std::vector<std::size_t>{0});
}

TEST(GlobalGraph, RandomCorporaMatchBruteForce) {
  Xoshiro256 rng(31);
  for (int trial = 0; trial < 40; ++trial) {
    auto c = Corpus::from_records(testutil::random_records(rng, 12, 15, 1, 6));
    const std::size_t cap = 1 + rng.below(6);
    auto g = build_global_graph(c, cap);
    const auto nu = c.num_users(), nx = c.num_items();
    std::vector<std::set<std::size_t>> iu(nu);
    for (const auto& [u, seq] : c.sequences()) {
      for (const auto& e : seq) iu[*c.user_index(u)].insert(*c.item_index(e.item_id));
    }
    for (std::size_t u = 0; u < nu; ++u) {
      ASSERT_EQ(std::set<std::size_t>(g.items_of_user[u].begin(), g.items_of_user[u].end()), iu[u]);
      for (std::size_t x : g.items_of_user[u]) {
        const auto& back = g.users_of_item[x];
        ASSERT_NE(std::find(back.begin(), back.end(), u), back.end());
      }
      // Brute-force ranked cousers.
      std::vector<std::pair<std::size_t, std::size_t>> cand;  // (-shared, v)
      for (std::size_t v = 0; v < nu; ++v) {
        if (v == u) continue;
        std::size_t shared = 0;
        for (std::size_t x : iu[u]) shared += iu[v].count(x);
        if (shared) cand.emplace_back(nx - shared, v);
      }
      std::sort(cand.begin(), cand.end());
      std::vector<std::size_t> expect;
      for (std::size_t k = 0; k < std::min(cap, cand.size()); ++k) expect.push_back(cand[k].second);
      ASSERT_EQ(g.cousers_of_user[u], expect);
    }
  }
}

TEST(GlobalGraph, DumpWritesEdgeLists) {
  TempDir tmp;
  auto toy = testutil::make_toy(small_cfg(2, 4), 4, 5, 3);
  dump_graphs(toy.ctx.graphs, toy.split.train, tmp.path());
  auto text = testutil::read_file(tmp / "graph-1.jsonl");
  EXPECT_EQ(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')),
            toy.ctx.graphs[1].num_edges());
}

// ---------------------------------------------------------------------------
// model: init

TEST(Init, DeterministicAndBounded) {
  auto cfg = small_cfg(2, 4);
  Matrix attr = Matrix::Zero(2, 4);
  auto a = init_params(cfg, 7, 5, 6, attr);
  auto b = init_params(cfg, 7, 5, 6, attr);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == init_params(cfg, 8, 5, 6, attr));
  for (const auto& m : a.user_emb) EXPECT_LE(m.cwiseAbs().maxCoeff(), 0.5);
  for (const auto& m : a.item_emb) EXPECT_LE(m.cwiseAbs().maxCoeff(), 0.5);
  cfg.init_noise = 0;
  auto z = init_params(cfg, 7, 5, 6, attr);
  EXPECT_EQ(z.w1, Matrix::Identity(8, 8));
  EXPECT_EQ(z.w4, Matrix::Identity(8, 8));
  EXPECT_THROW(init_params(cfg, 7, 5, 6, Matrix::Zero(3, 4)), ShapeError);
}

// ---------------------------------------------------------------------------
// model: convolution

TEST(Conv, SingleNeighbourIsSum) {
  auto cfg = small_cfg(1, 3);
  auto g = graph_of(1, 1, {{{0, 0}, TextVector{0.1, 0.2, 0.3}}}, 3);
  Matrix U = rows_of({{1, 2, 3}}), X = rows_of({{-1, 0.5, 2}});
  Vector attr = row_of({0.3, 0.3, 0.3});
  EXPECT_EQ(user_weights(g, U, X, attr, 0, cfg), std::vector<double>{1.0});
  Vector out = conv_user(g, U, X, attr, 0, cfg);
  EXPECT_TRUE(out.isApprox(row_of({1 - 1 + 0.1, 2 + 0.5 + 0.2, 3 + 2 + 0.3}), 1e-15));
  Vector oi = conv_item(g, U, X, attr, 0, cfg);
  EXPECT_TRUE(oi.isApprox(row_of({-1 + 1 + 0.1, 0.5 + 2 + 0.2, 2 + 3 + 0.3}), 1e-15));
}

TEST(Conv, SymmetricNeighboursHalfEach) {
  auto cfg = small_cfg(1, 2);
  auto g = graph_of(2, 2, {{{0, 0}, TextVector{1, 0}}, {{0, 1}, TextVector{1, 0}},
                           {{1, 0}, TextVector{0, 1}}, {{1, 1}, TextVector{0, 1}}}, 2);
  Matrix U = rows_of({{0.3, -0.2}, {0.3, -0.2}}), X = rows_of({{0.5, 0.5}, {0.5, 0.5}});
  Vector attr = row_of({0.1, 0.1});
  auto a = user_weights(g, U, X, attr, 0, cfg);
  EXPECT_NEAR(a[0], 0.5, 1e-15);
  EXPECT_NEAR(a[1], 0.5, 1e-15);
  auto b = item_weights(g, U, X, attr, 0, cfg);
  EXPECT_NEAR(b[0], 0.5, 1e-15);
  EXPECT_NEAR(b[1], 0.5, 1e-15);
}

TEST(Conv, ClampedNegativeCosineGetsEpsilon) {
  // Neighbour 0 has cos 0.8 with the user, neighbour 1 has cos -0.3.
  auto cfg = small_cfg(1, 2);
  auto g = graph_of(1, 2, {{{0, 0}, TextVector{0, 0}}, {{0, 1}, TextVector{0, 0}}}, 2);
  Matrix U = rows_of({{1, 0}});
  Matrix X = rows_of({{0.8, 0.6}, {-0.3, std::sqrt(1 - 0.09)}});
  Vector attr = row_of({0, 0});
  auto a = user_weights(g, U, X, attr, 0, cfg);
  const double s0 = 0.8 + 1e-8, s1 = 1e-8;
  EXPECT_NEAR(a[0], s0 / (s0 + s1), 1e-15);
  EXPECT_NEAR(a[1], s1 / (s0 + s1), 1e-20);
  EXPECT_NEAR(a[1], 1.25e-8, 1e-10);
}

TEST(Conv, AsymmetricMatchesScalarOracle) {
  Xoshiro256 rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 1 + rng.below(6), nu = 1 + rng.below(4), nx = 1 + rng.below(5);
    std::map<std::pair<std::size_t, std::size_t>, TextVector> edges;
    for (std::size_t u = 0; u < nu; ++u) {
      for (std::size_t x = 0; x < nx; ++x) {
        if (!rng.bernoulli(0.6)) continue;
        TextVector o(d);
        for (auto& v : o) v = rng.uniform(-1, 1);
        edges[{u, x}] = o;
      }
    }
    auto g = graph_of(nu, nx, edges, d);
    Matrix U(nu, d), X(nx, d);
    for (Eigen::Index i = 0; i < U.size(); ++i) U.data()[i] = rng.uniform(-1, 1);
    for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = rng.uniform(-1, 1);
    Vector attr(d);
    for (Eigen::Index i = 0; i < attr.size(); ++i) attr(i) = rng.uniform(-1, 1);
    auto cfg = small_cfg(1, d);
    for (std::size_t x = 0; x < nx; ++x) {
      std::vector<std::vector<double>> nbr, op;
      for (const auto& nb : g.item_adj[x]) {
        nbr.push_back(to_std(U.row(static_cast<Eigen::Index>(nb.node))));
        op.push_back(g.edge_vectors[nb.edge]);
      }
      auto got = conv_item(g, U, X, attr, x, cfg);
      if (nbr.empty()) {
        ASSERT_EQ(got, X.row(static_cast<Eigen::Index>(x)));
        continue;
      }
      auto expect = conv_oracle(to_std(X.row(static_cast<Eigen::Index>(x))), nbr, op, to_std(attr), 1e-8);
      for (std::size_t k = 0; k < d; ++k) ASSERT_NEAR(got(static_cast<Eigen::Index>(k)), expect[k], 1e-12);
    }
    for (std::size_t u = 0; u < nu; ++u) {
      std::vector<std::vector<double>> nbr, op;
      for (const auto& nb : g.user_adj[u]) {
        nbr.push_back(to_std(X.row(static_cast<Eigen::Index>(nb.node))));
        op.push_back(g.edge_vectors[nb.edge]);
      }
      if (nbr.empty()) continue;
      auto got = conv_user(g, U, X, attr, u, cfg);
      auto expect = conv_oracle(to_std(U.row(static_cast<Eigen::Index>(u))), nbr, op, to_std(attr), 1e-8);
      for (std::size_t k = 0; k < d; ++k) ASSERT_NEAR(got(static_cast<Eigen::Index>(k)), expect[k], 1e-12);
    }
  }
}

TEST(Conv, ZeroVectorCosineIsZero) {
  EXPECT_EQ(cosine(row_of({0, 0}), row_of({1, 2})), 0.0);
  EXPECT_EQ(cosine(row_of({1, 2}), row_of({0, 0})), 0.0);
}

TEST(Conv, WeightsAreConvexOnRandomGraphs) {
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    for (auto w : {SimilarityWeighting::clamp, SimilarityWeighting::softmax}) {
      auto cfg = small_cfg(2, 3);
      cfg.weighting = w;
      auto toy = testutil::make_toy(cfg, 5, 6, seed, 0.6, 1);
      for (std::size_t n = 0; n < 2; ++n) {
        const auto& g = toy.ctx.graphs[n];
        const Vector attr = toy.params.attr_vec.row(static_cast<Eigen::Index>(n));
        for (std::size_t u = 0; u < g.user_adj.size(); ++u) {
          if (!g.has_user(u)) continue;
          auto a = user_weights(g, toy.params.user_emb[n], toy.params.item_emb[n], attr, u, cfg);
          double s = 0;
          for (double v : a) {
            ASSERT_GE(v, 0.0);
            s += v;
          }
          ASSERT_NEAR(s, 1.0, 1e-12);
          if (a.size() == 1) ASSERT_EQ(a[0], 1.0);
        }
      }
    }
  }
}

TEST(Conv, EmptyGraphLeavesTablesBitIdentical) {
  auto cfg = small_cfg(2, 4);
  auto toy = testutil::make_toy(cfg, 5, 6, 4);
  toy.ctx.graphs[1] = graph_of(5, 6, {}, 4);
  toy.ctx.graphs[1].attribute_index = 1;
  ForwardState st;
  run_convolution(toy.ctx, toy.params, cfg, st);
  EXPECT_EQ(st.user_layers[1].back(), toy.params.user_emb[1]);
  EXPECT_EQ(st.item_layers[1].back(), toy.params.item_emb[1]);
  EXPECT_NE(st.user_layers[0].back(), toy.params.user_emb[0]);
}

TEST(Conv, TwoLayersComposeOneLayerTwice) {
  auto cfg = small_cfg(1, 3);
  auto g = graph_of(2, 2, {{{0, 0}, TextVector{0.6, 0.8, 0}}, {{0, 1}, TextVector{0, 0.6, 0.8}},
                           {{1, 1}, TextVector{0.8, 0, 0.6}}}, 3);
  Matrix U = rows_of({{0.2, -0.4, 0.1}, {0.5, 0.3, -0.2}});
  Matrix X = rows_of({{-0.3, 0.6, 0.2}, {0.1, 0.1, 0.7}});
  Vector attr = row_of({0.2, 0.1, -0.1});
  auto step = [&](const Matrix& u, const Matrix& x) {
    Matrix u2 = u, x2 = x;
    for (std::size_t i = 0; i < 2; ++i) {
      u2.row(static_cast<Eigen::Index>(i)) = conv_user(g, u, x, attr, i, cfg);
      x2.row(static_cast<Eigen::Index>(i)) = conv_item(g, u, x, attr, i, cfg);
    }
    return std::make_pair(u2, x2);
  };
  auto [u1, x1] = step(U, X);
  auto [u2, x2] = step(u1, x1);
  cfg.layers = 2;
  ModelParams p;
  p.user_emb = {U};
  p.item_emb = {X};
  p.attr_vec = attr;
  GraphContext ctx;
  ctx.graphs = {g};
  ForwardState st;
  run_convolution(ctx, p, cfg, st);
  EXPECT_TRUE(st.user_layers[0][2].isApprox(u2, 1e-14));
  EXPECT_TRUE(st.item_layers[0][2].isApprox(x2, 1e-14));
}

TEST(Conv, NoDiversityEqualsFullOnSymmetricToy) {
  auto cfg = small_cfg(1, 2);
  auto g = graph_of(2, 2, {{{0, 0}, TextVector{1, 0}}, {{0, 1}, TextVector{1, 0}},
                           {{1, 0}, TextVector{1, 0}}, {{1, 1}, TextVector{1, 0}}}, 2);
  Matrix U = rows_of({{0.3, -0.2}, {0.3, -0.2}}), X = rows_of({{0.5, 0.5}, {0.5, 0.5}});
  Vector attr = row_of({0.1, 0.1});
  auto nd = cfg;
  nd.no_diversity = true;
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_TRUE(conv_user(g, U, X, attr, i, cfg).isApprox(conv_user(g, U, X, attr, i, nd), 1e-15));
    EXPECT_TRUE(conv_item(g, U, X, attr, i, cfg).isApprox(conv_item(g, U, X, attr, i, nd), 1e-15));
  }
}

TEST(Conv, NoOpinionDropsOpinionTermAndUsesMean) {
  auto cfg = small_cfg(1, 2);
  cfg.no_opinion = true;
  auto g = graph_of(1, 2, {{{0, 0}, TextVector{1, 0}}, {{0, 1}, TextVector{0, 1}}}, 2);
  Matrix U = rows_of({{1, 1}}), X = rows_of({{2, 0}, {0, 4}});
  Vector attr = row_of({0, 0});
  EXPECT_TRUE(conv_user(g, U, X, attr, 0, cfg).isApprox(row_of({2, 3}), 1e-15));
}

// ---------------------------------------------------------------------------
// model: fusion, recent interest, score

namespace {

// Toy with explicit global graph and no attribute edges.
GraphContext bare_context(const GlobalInteractionGraph& gg, std::size_t N, std::size_t d) {
  std::vector<AttributeGraph> graphs;
  for (std::size_t n = 0; n < N; ++n) {
    auto g = graph_of(gg.items_of_user.size(), gg.users_of_item.size(), {}, d);
    g.attribute_index = n;
    graphs.push_back(g);
  }
  return make_context(std::move(graphs), gg);
}

}  // namespace

TEST(Fuse, OneUserOneItemIdentityWeights) {
  auto cfg = small_cfg(1, 2);
  cfg.init_noise = 0;
  auto c = Corpus::from_records(std::vector<InteractionRecord>{{"u", "x", 1, ""}});
  auto ctx = bare_context(build_global_graph(c), 1, 2);
  auto p = init_params(cfg, 1, 1, 1, Matrix::Zero(1, 2));
  auto st = forward(p, ctx, cfg);
  EXPECT_TRUE(st.user_fused.isApprox(st.user_hat + st.item_hat, 1e-15));
  EXPECT_TRUE(st.item_fused.isApprox(st.item_hat + st.user_hat, 1e-15));
}

TEST(Fuse, ZeroW1W2GivesConcatenation) {
  auto cfg = small_cfg(2, 2);
  auto toy = testutil::make_toy(cfg, 4, 5, 9);
  toy.params.w1.setZero();
  toy.params.w2.setZero();
  auto st = forward(toy.params, toy.ctx, cfg);
  EXPECT_EQ(st.user_fused, st.user_hat);
}

TEST(Fuse, MatchesLoopOracle) {
  auto cfg = small_cfg(2, 3);
  auto toy = testutil::make_toy(cfg, 6, 7, 21, 0.5, 1);
  auto st = forward(toy.params, toy.ctx, cfg);
  const auto& gg = toy.ctx.global;
  const auto& p = toy.params;
  auto mean_term = [](const std::vector<std::size_t>& ids, const Matrix& table, const Matrix& W) {
    Vector acc = Vector::Zero(table.cols());
    for (auto i : ids) acc += (W * table.row(static_cast<Eigen::Index>(i)).transpose()).transpose();
    return ids.empty() ? acc : Vector(acc / static_cast<double>(ids.size()));
  };
  for (std::size_t u = 0; u < 6; ++u) {
    Vector expect = st.user_hat.row(static_cast<Eigen::Index>(u)) +
                    mean_term(gg.items_of_user[u], st.item_hat, p.w1) +
                    mean_term(gg.cousers_of_user[u], st.user_hat, p.w2);
    ASSERT_TRUE(st.user_fused.row(static_cast<Eigen::Index>(u)).isApprox(expect, 1e-12));
  }
  for (std::size_t x = 0; x < 7; ++x) {
    Vector expect = st.item_hat.row(static_cast<Eigen::Index>(x)) +
                    mean_term(gg.users_of_item[x], st.user_hat, p.w3) +
                    mean_term(gg.coitems_of_item[x], st.item_hat, p.w4);
    ASSERT_TRUE(st.item_fused.row(static_cast<Eigen::Index>(x)).isApprox(expect, 1e-12));
  }
}

TEST(Fuse, UserWithoutCousersGetsOnlyW1Term) {
  auto cfg = small_cfg(1, 2);
  auto c = Corpus::from_records(std::vector<InteractionRecord>{{"u0", "A", 1, ""}, {"u0", "B", 2, ""}, {"u1", "C", 1, ""}});
  auto ctx = bare_context(build_global_graph(c), 1, 2);
  auto p = init_params(cfg, 3, 2, 3, Matrix::Zero(1, 2));
  auto st = forward(p, ctx, cfg);
  const Vector mean_items = (st.item_hat.row(0) + st.item_hat.row(1)) / 2.0;
  Vector expect = st.user_hat.row(0) + (p.w1 * mean_items.transpose()).transpose();
  EXPECT_TRUE(st.user_fused.row(0).isApprox(expect, 1e-14));
}

TEST(Fuse, ConcatMlpIsReluAffine) {
  auto cfg = small_cfg(2, 2);
  cfg.concat_mlp_fusion = true;
  auto toy = testutil::make_toy(cfg, 4, 5, 2);
  toy.params.fusion_bias.setConstant(0.05);
  auto st = forward(toy.params, toy.ctx, cfg);
  Matrix expect = ((st.user_hat * toy.params.w1.transpose()).rowwise() + toy.params.fusion_bias.row(0))
                      .cwiseMax(0.0);
  EXPECT_TRUE(st.user_fused.isApprox(expect, 1e-14));
}

TEST(RecentInterest, Windows) {
  Matrix F = rows_of({{1, 0}, {2, 0}, {3, 0}, {4, 0}, {5, 0}, {6, 0}, {7, 0}});
  std::vector<std::size_t> one = {4};
  EXPECT_EQ(recent_interest(one, F, 5), F.row(4));
  std::vector<std::size_t> three = {0, 1, 2};
  EXPECT_TRUE(recent_interest(three, F, 5).isApprox(row_of({2, 0})));
  std::vector<std::size_t> seven = {6, 5, 4, 3, 2, 1, 0};
  // Last five: 4,3,2,1,0 -> values 5,4,3,2,1.
  EXPECT_TRUE(recent_interest(seven, F, 5).isApprox(row_of({3, 0})));
  EXPECT_THROW(recent_interest(std::span<const std::size_t>{}, F, 5), Error);
}

TEST(Score, HandExamples) {
  EXPECT_EQ(score(row_of({1, 1}), row_of({0, 1}), row_of({3, -1})), 1.0 * 3 + 2.0 * -1);
  EXPECT_EQ(score(row_of({1, -1}), row_of({-1, 1}), row_of({5, 7})), 0.0);
  EXPECT_EQ(score(row_of({1, 0}), row_of({0, 0}), row_of({0, 9})), 0.0);
}

TEST(Score, ScaleCovarianceKeepsRanking) {
  auto cfg = small_cfg(2, 3);
  auto toy = testutil::make_toy(cfg, 5, 8, 6);
  auto st = forward(toy.params, toy.ctx, cfg);
  std::vector<std::size_t> hist = {0, 1};
  std::vector<double> s1, s2;
  model_scores(st, cfg, 2, hist, s1);
  st.user_fused *= 3.0;
  st.item_fused *= 3.0;
  model_scores(st, cfg, 2, hist, s2);
  for (std::size_t j = 0; j < s1.size(); ++j) EXPECT_NEAR(s2[j], 9.0 * s1[j], 1e-12 * std::abs(s2[j]) + 1e-15);
  EXPECT_EQ(rank_items(s1), rank_items(s2));
}

TEST(Forward, Deterministic) {
  auto cfg = small_cfg(2, 4);
  auto a = testutil::make_toy(cfg, 6, 8, 5);
  auto s1 = forward(a.params, a.ctx, cfg);
  auto s2 = forward(a.params, a.ctx, cfg);
  EXPECT_EQ(s1.user_fused, s2.user_fused);
  EXPECT_EQ(s1.item_fused, s2.item_fused);
}

TEST(Forward, ShapeMismatchThrows) {
  auto cfg = small_cfg(2, 4);
  auto toy = testutil::make_toy(cfg, 6, 8, 5);
  toy.params.w3 = Matrix::Zero(3, 3);
  EXPECT_THROW(forward(toy.params, toy.ctx, cfg), ShapeError);
}

// ---------------------------------------------------------------------------
// model: backward

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  auto cfg = small_cfg(2, 4);
  auto toy = testutil::make_toy(cfg, 6, 8, 5);
  auto st = forward(toy.params, toy.ctx, cfg);
  auto g = backward(st, toy.params, toy.ctx, cfg, Matrix::Zero(6, 8), Matrix::Zero(8, 8));
  g.for_each_block([](const std::string& name, const Matrix& m) {
    EXPECT_TRUE(m.isZero(0)) << name;
  });
}

TEST(Backward, FrozenAttributeVectorsGetNoGradient) {
  auto cfg = small_cfg(2, 4);
  auto toy = testutil::make_toy(cfg, 6, 8, 5);
  auto r = batch_loss_and_gradients(toy.params, toy.ctx, cfg, toy.instances);
  EXPECT_TRUE(r.grads.attr_vec.isZero(0));
  EXPECT_FALSE(r.grads.user_emb[0].isZero(0));
}

TEST(Backward, NonFiniteGradientNamesBlock) {
  auto cfg = small_cfg(2, 4);
  auto toy = testutil::make_toy(cfg, 6, 8, 5);
  auto st = forward(toy.params, toy.ctx, cfg);
  Matrix gu = Matrix::Zero(6, 8);
  gu(0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    backward(st, toy.params, toy.ctx, cfg, gu, Matrix::Zero(8, 8));
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("parameter block"), std::string::npos);
  }
}

namespace {

void expect_gradients_match(ModelConfig cfg, std::uint64_t seed, std::vector<std::string> blocks) {
  auto toy = testutil::make_toy(cfg, 6, 8, seed);
  if (!cfg.uniform_weights() && cfg.weighting == SimilarityWeighting::clamp) {
    ASSERT_GT(testutil::min_abs_cosine(toy), 1e-3) << "seed too close to the clamp kink";
  }
  auto r = testutil::gradient_check(toy, blocks, 12, seed);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

std::vector<std::string> all_blocks(const ModelConfig& cfg) {
  std::vector<std::string> b;
  for (std::size_t n = 0; n < cfg.num_graphs(); ++n) {
    b.push_back("user_emb." + std::to_string(n));
    b.push_back("item_emb." + std::to_string(n));
  }
  if (cfg.concat_mlp_fusion) {
    b.insert(b.end(), {"W1", "fusion_bias"});
  } else {
    b.insert(b.end(), {"W1", "W2", "W3", "W4"});
  }
  if (cfg.train_attribute_vectors) b.push_back("attr_vec");
  return b;
}

}  // namespace

TEST(GradCheck, Full) {
  auto cfg = small_cfg(2, 4);
  expect_gradients_match(cfg, 7, all_blocks(cfg));
}

// Where h = 1e-4 is not fine enough, the residual is central-difference
// truncation: it must shrink roughly a hundredfold per tenfold smaller step.
TEST(GradCheck, ResidualIsSecondOrderInStep) {
  auto cfg = small_cfg(2, 4);
  auto toy = testutil::make_toy(cfg, 6, 8, 101);
  std::vector<std::string> blocks = {"user_emb.0"};
  auto coarse = testutil::gradient_check(toy, blocks, 12, 101, 1e-3);
  auto fine = testutil::gradient_check(toy, blocks, 12, 101, 1e-4);
  auto finer = testutil::gradient_check(toy, blocks, 12, 101, 1e-5);
  EXPECT_LT(fine.max_rel_error, coarse.max_rel_error / 50);
  EXPECT_LT(finer.max_rel_error, fine.max_rel_error / 50);
  EXPECT_LT(finer.max_rel_error, 1e-5);
}

TEST(GradCheck, TwoLayers) {
  auto cfg = small_cfg(2, 3);
  cfg.layers = 2;
  expect_gradients_match(cfg, 102, all_blocks(cfg));
}

TEST(GradCheck, Softmax) {
  auto cfg = small_cfg(2, 3);
  cfg.weighting = SimilarityWeighting::softmax;
  expect_gradients_match(cfg, 103, all_blocks(cfg));
}

TEST(GradCheck, UnfrozenAttributeVectors) {
  auto cfg = small_cfg(2, 3);
  cfg.train_attribute_vectors = true;
  expect_gradients_match(cfg, 104, all_blocks(cfg));
}

TEST(GradCheck, Ablations) {
  for (int v = 0; v < 4; ++v) {
    auto cfg = small_cfg(2, 3);
    cfg.no_diversity = v == 0;
    cfg.no_opinion = v == 1;
    cfg.coarse_single_graph = v == 2;
    cfg.concat_mlp_fusion = v == 3;
    SCOPED_TRACE(v);
    expect_gradients_match(cfg, 110 + static_cast<std::uint64_t>(v), all_blocks(cfg));
  }
}

// ---------------------------------------------------------------------------
// checkpoint

TEST(Checkpoint, RoundTripGivesIdenticalScores) {
  TempDir tmp;
  auto cfg = small_cfg(2, 4);
  cfg.layers = 2;
  cfg.weighting = SimilarityWeighting::softmax;
  auto toy = testutil::make_toy(cfg, 6, 8, 5);
  Checkpoint ck{cfg, toy.params, {}};
  ck.meta["seed"] = 42;
  save_checkpoint(ck, tmp / "m.ckpt");
  EXPECT_FALSE(std::filesystem::exists(tmp / "m.ckpt.tmp"));
  auto back = load_checkpoint(tmp / "m.ckpt");
  EXPECT_EQ(back.config, cfg);
  EXPECT_TRUE(back.params == toy.params);
  EXPECT_EQ(back.meta["seed"], 42);
  auto s1 = forward(toy.params, toy.ctx, cfg);
  auto s2 = forward(back.params, toy.ctx, back.config);
  EXPECT_EQ(s1.user_fused, s2.user_fused);
  EXPECT_EQ(s1.item_fused, s2.item_fused);
  EXPECT_EQ(testutil::read_file(tmp / "m.ckpt").substr(0, 9), std::string("FINERECK\x01", 9));
}

TEST(Checkpoint, UnlimitedTwoHopCapSurvives) {
  TempDir tmp;
  auto cfg = small_cfg(1, 2);
  cfg.two_hop_cap = kUnlimitedNeighbors;
  Checkpoint ck{cfg, init_params(cfg, 1, 2, 2, Matrix::Zero(1, 2)), {}};
  save_checkpoint(ck, tmp / "m.ckpt");
  EXPECT_EQ(load_checkpoint(tmp / "m.ckpt").config.two_hop_cap, kUnlimitedNeighbors);
}

TEST(Checkpoint, ShapeConflictNamed) {
  TempDir tmp;
  auto cfg = small_cfg(2, 4);
  auto p = init_params(cfg, 1, 3, 3, Matrix::Zero(2, 4));
  p.w2 = Matrix::Zero(5, 5);
  save_checkpoint({cfg, p, {}}, tmp / "bad.ckpt");
  try {
    load_checkpoint(tmp / "bad.ckpt");
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("'W2' is 5x5"), std::string::npos) << msg;
    EXPECT_NE(msg.find("8x8"), std::string::npos) << msg;
  }
}

TEST(Checkpoint, BadMagicAndTruncation) {
  TempDir tmp;
  testutil::write_file(tmp / "x.ckpt", "NOTACKPT");
  EXPECT_THROW(load_checkpoint(tmp / "x.ckpt"), ParseError);
  auto cfg = small_cfg(1, 2);
  save_checkpoint({cfg, init_params(cfg, 1, 2, 2, Matrix::Zero(1, 2)), {}}, tmp / "ok.ckpt");
  auto bytes = testutil::read_file(tmp / "ok.ckpt");
  testutil::write_file(tmp / "cut.ckpt", bytes.substr(0, bytes.size() - 5));
  EXPECT_THROW(load_checkpoint(tmp / "cut.ckpt"), ParseError);
}

// ---------------------------------------------------------------------------
// training

TEST(Instances, PerPositionExpansion) {
  SplitCorpus s;
  s.train = Corpus::from_records(std::vector<InteractionRecord>{{"u", "A", 1, ""}, {"u", "B", 2, ""}, {"u", "C", 3, ""}});
  auto inst = make_training_instances(s);
  const auto A = *s.train.item_index("A"), B = *s.train.item_index("B"), C = *s.train.item_index("C");
  ASSERT_EQ(inst.size(), 2u);
  EXPECT_EQ(inst[0].target, B);
  EXPECT_EQ(inst[0].history, std::vector<std::size_t>{A});
  EXPECT_EQ(inst[1].target, C);
  EXPECT_EQ(inst[1].history, (std::vector<std::size_t>{A, B}));
  SplitCorpus two;
  two.train = Corpus::from_records(std::vector<InteractionRecord>{{"u", "A", 1, ""}, {"u", "B", 2, ""}});
  EXPECT_EQ(make_training_instances(two).size(), 1u);
  EXPECT_TRUE(make_training_instances(SplitCorpus{}).empty());
}

TEST(Bce, AllZeroScores) {
  std::vector<double> s(7, 0.0);
  auto r = bce_loss(s, 3);
  EXPECT_NEAR(r.loss, 7 * std::log(2.0), 1e-12);
  EXPECT_NEAR(r.gradient[3], -0.5, 1e-15);
  EXPECT_NEAR(r.gradient[0], 0.5, 1e-15);
}

TEST(Bce, LimitPathDecreasesToZero) {
  double prev = 1e300;
  for (double t = 0; t <= 60; t += 2) {
    std::vector<double> s = {-t, t, -t, -t};
    auto r = bce_loss(s, 1);
    EXPECT_LT(r.loss, prev);
    prev = r.loss;
  }
  EXPECT_LT(prev, 1e-20);
  EXPECT_TRUE(std::isfinite(bce_loss(std::vector<double>{-800, 800}, 1).loss));
}

TEST(Bce, GradientMatchesFiniteDifferences) {
  std::vector<double> s = {0.3, -1.2, 2.5, 0.0, -0.7};
  auto r = bce_loss(s, 2);
  double sum_g = 0, sum_direct = 0;
  for (std::size_t j = 0; j < s.size(); ++j) {
    auto p = s, m = s;
    p[j] += 1e-5;
    m[j] -= 1e-5;
    const double num = (bce_loss(p, 2).loss - bce_loss(m, 2).loss) / 2e-5;
    EXPECT_NEAR(r.gradient[j], num, 1e-8);
    sum_g += r.gradient[j];
    sum_direct += 1.0 / (1.0 + std::exp(-s[j])) - (j == 2 ? 1.0 : 0.0);
  }
  EXPECT_NEAR(sum_g, sum_direct, 1e-14);
  // Direct (non-stable) formula agrees at moderate scores.
  double direct = 0;
  for (std::size_t j = 0; j < s.size(); ++j) {
    const double y = 1.0 / (1.0 + std::exp(-s[j]));
    direct -= j == 2 ? std::log(y) : std::log(1 - y);
  }
  EXPECT_NEAR(r.loss, direct, 1e-12);
}

TEST(Adam, ZeroGradientKeepsParameters) {
  auto cfg = small_cfg(1, 2);
  auto p = init_params(cfg, 1, 2, 2, Matrix::Zero(1, 2));
  auto before = p;
  auto g = p.zeros_like();
  auto st = OptimizerState::for_params(p);
  adam_step(p, g, st);
  EXPECT_TRUE(p == before);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, SingleScalarStepByHand) {
  ModelParams p;
  p.attr_vec = Matrix::Constant(1, 1, 2.0);
  p.w1 = p.w2 = p.w3 = p.w4 = Matrix::Zero(1, 1);
  p.fusion_bias = Matrix::Zero(1, 1);
  auto g = p.zeros_like();
  g.attr_vec(0, 0) = 1.0;
  auto st = OptimizerState::for_params(p);
  adam_step(p, g, st);
  // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps).
  EXPECT_NEAR(p.attr_vec(0, 0), 2.0 - 0.001 / (1.0 + 1e-8), 1e-15);
  // Second step with g = 1 again: m_hat = v_hat = 1 still.
  adam_step(p, g, st);
  EXPECT_NEAR(p.attr_vec(0, 0), 2.0 - 2 * 0.001 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, NonFiniteUpdateNamesBlock) {
  ModelParams p;
  p.attr_vec = Matrix::Zero(1, 1);
  p.w1 = p.w2 = p.w3 = p.w4 = Matrix::Zero(1, 1);
  p.fusion_bias = Matrix::Zero(1, 1);
  auto g = p.zeros_like();
  g.w3(0, 0) = std::numeric_limits<double>::infinity();
  auto st = OptimizerState::for_params(p);
  try {
    adam_step(p, g, st);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("W3"), std::string::npos);
  }
}

TEST(Adam, FrozenBlocksUntouched) {
  auto cfg = small_cfg(2, 3);
  auto toy = testutil::make_toy(cfg, 5, 6, 8);
  auto before = toy.params;
  auto r = batch_loss_and_gradients(toy.params, toy.ctx, cfg, toy.instances);
  r.grads.attr_vec.setConstant(1.0);
  auto st = OptimizerState::for_params(toy.params);
  adam_step(toy.params, r.grads, st, trainable_blocks(cfg));
  EXPECT_EQ(toy.params.attr_vec, before.attr_vec);
  EXPECT_EQ(toy.params.fusion_bias, before.fusion_bias);
  EXPECT_NE(toy.params.w1, before.w1);
}

namespace {

// Toy split with held-out targets for training-loop tests.
SplitCorpus toy_split(std::uint64_t seed) {
  Xoshiro256 rng(seed);
  std::vector<InteractionRecord> recs;
  for (int u = 0; u < 12; ++u) {
    std::vector<int> items = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    rng.shuffle(items);
    for (int k = 0; k < 6; ++k) {
      recs.push_back({"u" + std::to_string(u), "i" + std::to_string(items[k]), k, ""});
    }
  }
  return leave_one_out_split(Corpus::from_records(recs));
}

GraphContext context_for(const SplitCorpus& s, const ModelConfig& cfg) {
  std::vector<AttributeGraph> graphs;
  for (std::size_t n = 0; n < cfg.num_attributes; ++n) {
    auto g = graph_of(s.train.num_users(), s.train.num_items(), {}, cfg.dim);
    g.attribute_index = n;
    graphs.push_back(g);
  }
  return make_context(std::move(graphs), build_global_graph(s.train));
}

}  // namespace

TEST(Train, PatienceZeroRunsOneEpoch) {
  auto s = toy_split(1);
  auto cfg = small_cfg(1, 4);
  auto ctx = context_for(s, cfg);
  TrainHyper h;
  h.patience = 0;
  auto r = train(s, ctx, cfg, init_params(cfg, 1, s.train.num_users(), s.train.num_items(), Matrix::Zero(1, 4)), h);
  EXPECT_EQ(r.log.size(), 1u);
  EXPECT_EQ(r.best_epoch, 1u);
}

TEST(Train, SameSeedSameLogAndCheckpoints) {
  TempDir a, b;
  auto s = toy_split(2);
  auto cfg = small_cfg(1, 4);
  auto ctx = context_for(s, cfg);
  TrainHyper h;
  h.max_epochs = 6;
  h.batch_size = 8;
  h.adam.lr = 0.01;
  auto p0 = init_params(cfg, 1, s.train.num_users(), s.train.num_items(), Matrix::Zero(1, 4));
  TrainOptions oa, ob;
  oa.checkpoint_dir = a.path();
  ob.checkpoint_dir = b.path();
  auto ra = train(s, ctx, cfg, p0, h, oa);
  auto rb = train(s, ctx, cfg, p0, h, ob);
  std::ostringstream la, lb;
  write_metric_log(ra.log, la, false);
  write_metric_log(rb.log, lb, false);
  EXPECT_EQ(la.str(), lb.str());
  EXPECT_EQ(testutil::read_file(a / "best.ckpt"), testutil::read_file(b / "best.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(a / "last.ckpt"));
  EXPECT_TRUE(load_checkpoint(a / "best.ckpt").params == ra.best_params);
  EXPECT_EQ(la.str().substr(0, la.str().find('\n')), "epoch,train_loss,valid_prec20,valid_ndcg20");
}

TEST(Train, FirstStepLossFinitePositive) {
  auto cfg = small_cfg(2, 4);
  auto toy = testutil::make_toy(cfg, 6, 8, 5);
  auto r = batch_loss_and_gradients(toy.params, toy.ctx, cfg, toy.instances);
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_GT(r.loss, 0.0);
  EXPECT_NEAR(r.loss, batch_loss(toy.params, toy.ctx, cfg, toy.instances), 1e-12);
}

TEST(Train, NegativeSamplingRestrictsGradient) {
  auto cfg = small_cfg(1, 3);
  auto toy = testutil::make_toy(cfg, 4, 6, 5);
  std::vector<TrainingInstance> one = {toy.instances.front()};
  std::vector<std::vector<std::size_t>> neg = {{(one[0].target + 1) % 6}};
  auto r = batch_loss_and_gradients(toy.params, toy.ctx, cfg, one, neg);
  auto st = forward(toy.params, toy.ctx, cfg);
  std::vector<double> s;
  model_scores(st, cfg, one[0].user, one[0].history, s);
  const double expect = softplus(s[one[0].target]) - s[one[0].target] + softplus(s[neg[0][0]]);
  EXPECT_NEAR(r.loss, expect, 1e-12);
  TrainHyper h;
  h.negative_samples = 3;
  h.max_epochs = 2;
  auto s2 = toy_split(3);
  auto ctx = context_for(s2, cfg);
  auto res = train(s2, ctx, cfg, init_params(cfg, 1, s2.train.num_users(), s2.train.num_items(), Matrix::Zero(1, 3)), h);
  EXPECT_EQ(res.log.size(), 2u);
}

// ---------------------------------------------------------------------------
// evaluation

TEST(Metrics, RankBoundaries) {
  std::vector<double> scores(20);
  for (std::size_t j = 0; j < 20; ++j) scores[j] = 20.0 - static_cast<double>(j);
  auto ranked = rank_items(scores);
  EXPECT_EQ(precision_at_k(ranked, 0, 10), 1.0);
  EXPECT_EQ(precision_at_k(ranked, 10, 10), 0.0);
  EXPECT_EQ(ndcg_at_k(ranked, 0, 10), 1.0);
  EXPECT_DOUBLE_EQ(ndcg_at_k(ranked, 2, 10), 0.5);
  EXPECT_EQ(ndcg_at_k(ranked, 14, 10), 0.0);
  std::vector<std::size_t> excl = {3};
  EXPECT_THROW(precision_at_k(rank_items(scores, excl), 3, 10), Error);
  EXPECT_THROW(target_rank(scores, 3, excl), Error);
}

TEST(Metrics, MeanOverUsers) {
  std::vector<UserMetrics> per = {{0, 0, 1}, {1, 0, 50}, {2, 0, 3}, {3, 0, 10}};
  std::vector<std::size_t> ks = {10};
  auto t = MetricTable::from_ranks(per, ks);
  EXPECT_DOUBLE_EQ(t.precision.at(10), 0.75);
  EXPECT_EQ(t.csv(), "metric,k,value\nPrec,10,0.750000\nNDCG,10," +
                         [&] {
                           char b[32];
                           std::snprintf(b, sizeof b, "%.6f", (1.0 + 0.5 + 1 / std::log2(11.0)) / 4);
                           return std::string(b);
                         }() + "\n");
}

TEST(Metrics, TiesBreakByIndex) {
  std::vector<double> s = {1, 3, 3, 0, 3};
  EXPECT_EQ(rank_items(s), (RankedList{1, 2, 4, 0, 3}));
  EXPECT_EQ(rank_items(s), rank_items(s));
  for (std::size_t t = 0; t < s.size(); ++t) EXPECT_EQ(target_rank(s, t), rank_of(rank_items(s), t));
}

TEST(Metrics, BruteForceOracleOnRandomScores) {
  Xoshiro256 rng(77);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t nx = 2 + rng.below(40);
    std::vector<double> s(nx);
    for (auto& v : s) v = static_cast<double>(rng.below(6));  // many ties
    std::vector<std::size_t> excl;
    for (std::size_t x = 0; x < nx; ++x) {
      if (rng.bernoulli(0.2)) excl.push_back(x);
    }
    std::size_t target;
    do {
      target = rng.below(nx);
    } while (std::find(excl.begin(), excl.end(), target) != excl.end());
    // Oracle: count strictly better candidates by the documented order.
    std::size_t better = 0;
    for (std::size_t x = 0; x < nx; ++x) {
      if (x == target || std::find(excl.begin(), excl.end(), x) != excl.end()) continue;
      if (s[x] > s[target] || (s[x] == s[target] && x < target)) ++better;
    }
    const auto ranked = rank_items(s, excl);
    ASSERT_EQ(rank_of(ranked, target), better + 1);
    ASSERT_EQ(target_rank(s, target, excl), better + 1);
    for (std::size_t k : {1, 5, 10, 20}) {
      const double hit = better < k ? 1.0 : 0.0;
      ASSERT_EQ(precision_at_k(ranked, target, k), hit);
      ASSERT_NEAR(ndcg_at_k(ranked, target, k), hit / (std::log(better + 2.0) / std::log(2.0)), 1e-12);
    }
  }
}

TEST(Evaluate, PerfectScoresGiveOne) {
  auto s = toy_split(4);
  auto cases = make_eval_cases(s, EvalTarget::test);
  std::vector<std::size_t> ks = {1, 10};
  auto t = evaluate_cases(std::span<const EvalCase>(cases), s.train.num_items(), ks, true,
                          [](const EvalCase& c, std::vector<double>& sc) {
                            std::fill(sc.begin(), sc.end(), 0.0);
                            sc[c.target] = 1.0;
                          });
  EXPECT_EQ(t.precision.at(1), 1.0);
  EXPECT_EQ(t.ndcg.at(10), 1.0);
}

TEST(Evaluate, TestHistoryIncludesValidation) {
  auto s = toy_split(5);
  auto cases = make_eval_cases(s, EvalTarget::test);
  for (const auto& c : cases) {
    const auto& user = s.train.users()[c.user];
    EXPECT_EQ(c.history.back(), *s.train.item_index(s.validation.at(user)));
    EXPECT_EQ(c.history.size(), s.train.sequence(user).size() + 1);
  }
}

TEST(Evaluate, RandomModelNearChance) {
  // 100 items, 400 users with 5 interactions: random parameters should hit
  // at chance, 10 / 97 candidates, within 3 binomial sigma.
  Xoshiro256 rng(9);
  std::vector<InteractionRecord> recs;
  for (int u = 0; u < 400; ++u) {
    std::vector<int> items(100);
    for (int i = 0; i < 100; ++i) items[i] = i;
    rng.shuffle(items);
    for (int k = 0; k < 5; ++k) recs.push_back({"u" + std::to_string(u), "i" + std::to_string(items[k]), k, ""});
  }
  auto s = leave_one_out_split(Corpus::from_records(recs));
  auto cfg = small_cfg(1, 8);
  auto ctx = context_for(s, cfg);
  auto p = init_params(cfg, 3, s.train.num_users(), s.train.num_items(), Matrix::Zero(1, 8));
  // Scramble item rows so the popularity structure of the fusion terms does
  // not bias the ranking: scores then depend on random vectors only.
  auto cases = make_eval_cases(s, EvalTarget::test);
  std::vector<std::size_t> ks = {10};
  auto t = evaluate_model(p, ctx, cfg, cases, ks);
  const double p0 = 10.0 / 96.0;
  const double sigma = std::sqrt(p0 * (1 - p0) / static_cast<double>(cases.size()));
  EXPECT_NEAR(t.precision.at(10), p0, 3 * sigma);
}

TEST(Evaluate, PerUserInvariants) {
  auto s = toy_split(6);
  auto cfg = small_cfg(1, 4);
  auto ctx = context_for(s, cfg);
  auto p = init_params(cfg, 3, s.train.num_users(), s.train.num_items(), Matrix::Zero(1, 4));
  auto cases = make_eval_cases(s, EvalTarget::test);
  std::vector<std::size_t> ks = {1, 3, 5};
  auto t = evaluate_model(p, ctx, cfg, cases, ks);
  for (const auto& m : t.per_user) {
    for (std::size_t k : ks) {
      const double hit = hit_from_rank(m.rank, k), nd = ndcg_from_rank(m.rank, k);
      if (hit == 0) {
        EXPECT_EQ(nd, 0.0);
      } else {
        EXPECT_GT(nd, 0.0);
        EXPECT_LE(nd, 1.0);
      }
    }
    EXPECT_GE(hit_from_rank(m.rank, 5), hit_from_rank(m.rank, 3));
    EXPECT_GE(ndcg_from_rank(m.rank, 5), ndcg_from_rank(m.rank, 3));
  }
  std::ostringstream dump;
  t.write_per_user(dump, s.train);
  const auto text = dump.str();
  EXPECT_EQ(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')), cases.size());
}

TEST(Baselines, PopularityDominantItem) {
  std::vector<InteractionRecord> recs;
  for (int u = 0; u < 6; ++u) {
    for (int k = 0; k < 4; ++k) recs.push_back({"u" + std::to_string(u), "f" + std::to_string(u) + "_" + std::to_string(k), k, ""});
    recs.push_back({"u" + std::to_string(u), "hot", 10, ""});
  }
  // "hot" is every user's last item and, via the other users' test rows,
  // never in a training history: make it popular in train with extra users.
  for (int v = 0; v < 3; ++v) {
    for (int k = 0; k < 4; ++k) recs.push_back({"w" + std::to_string(v), "hot" + std::to_string(k), k, ""});
  }
  SplitCorpus s;
  auto c = Corpus::from_records(recs);
  s = leave_one_out_split(c);
  // Force popularity: append "hot" to training sequences of the w users.
  std::vector<InteractionRecord> train = s.train.records();
  for (int v = 0; v < 3; ++v) train.push_back({"w" + std::to_string(v), "hot", 100, ""});
  std::vector<std::string> users = s.train.users(), items = s.train.items();
  s.train = Corpus::from_records(train, users, items);
  for (auto& [u, t] : s.test) {
    if (u[0] == 'w') t = s.train.sequence(u).front().item_id;
  }
  std::map<std::string, std::string> only_u;
  for (const auto& [u, t] : s.test) {
    if (u[0] == 'u') only_u[u] = t;
  }
  s.test = only_u;
  std::vector<std::size_t> ks = {1};
  auto t = popularity_baseline(s, EvalTarget::test, ks);
  EXPECT_EQ(t.precision.at(1), 1.0);
}

TEST(Baselines, SknnSingleIdenticalNeighbourFirst) {
  // u0 and u1 share history {A,B}; u1 also has C. u2 is unrelated.
  SplitCorpus s;
  s.train = Corpus::from_records(std::vector<InteractionRecord>{
      {"u0", "A", 1, ""}, {"u0", "B", 2, ""}, {"u1", "A", 1, ""}, {"u1", "B", 2, ""},
      {"u1", "C", 3, ""}, {"u2", "D", 1, ""}, {"u2", "E", 2, ""}, {"u3", "D", 1, ""}, {"u3", "E", 1, ""}});
  SknnRecommender rec(s.train, 50);
  std::vector<std::size_t> hist = {*s.train.item_index("A"), *s.train.item_index("B")};
  auto ranked = rec.rank(0, hist, true);
  EXPECT_EQ(ranked.front(), *s.train.item_index("C"));
  EXPECT_EQ(rec.rank_target(0, hist, *s.train.item_index("C"), true), 1u);
  // Similarity by hand: |{A,B}| overlap 2 / sqrt(2 * 3).
  auto v = rec.votes(0, hist);
  EXPECT_NEAR(v[*s.train.item_index("C")], 2.0 / std::sqrt(6.0), 1e-15);
}

TEST(Baselines, SknnFallsBackToPopularity) {
  SplitCorpus s;
  s.train = Corpus::from_records(std::vector<InteractionRecord>{
      {"u0", "Z", 1, ""}, {"u1", "A", 1, ""}, {"u2", "A", 1, ""}, {"u2", "B", 1, ""}, {"u3", "C", 1, ""}});
  SknnRecommender rec(s.train, 50);
  std::vector<std::size_t> hist = {*s.train.item_index("Z")};
  auto ranked = rec.rank(0, hist, true);
  const auto A = *s.train.item_index("A"), B = *s.train.item_index("B"), C = *s.train.item_index("C");
  EXPECT_EQ(ranked, (RankedList{A, B, C}));
  auto pop = item_popularity(s.train);
  auto by_pop = rank_items(pop, hist);
  EXPECT_EQ(ranked, by_pop);
}
