#pragma once

// End-to-end pipeline steps shared by the command-line tool and the
// acceptance suite. Each run_* function corresponds to one CLI subcommand.

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "finerec/checkpoint.hpp"
#include "finerec/corpus.hpp"
#include "finerec/encoder.hpp"
#include "finerec/evaluation.hpp"
#include "finerec/extraction.hpp"
#include "finerec/graphs.hpp"
#include "finerec/model.hpp"
#include "finerec/synth.hpp"
#include "finerec/training.hpp"

namespace finerec {

// A preprocessed dataset directory: attributes.json, train/valid/test.jsonl
// and pairs.jsonl.
struct Dataset {
  AttributeSet attributes;
  SplitCorpus split;
  PairStore pairs;  // every pair of the preprocessed corpus
};

struct PreprocessStats {
  std::size_t loaded = 0;
  std::size_t with_pairs = 0;
  std::size_t after_core = 0;
  std::size_t users = 0;
  std::size_t items = 0;
};

// drop attributeless reviews -> 5-core -> leave-one-out.
// `cored_out`, when given, receives the filtered corpus before splitting.
inline Dataset prepare_dataset(const Corpus& corpus, const AttributeSet& attrs,
                               const PairStore& pairs, PreprocessStats* stats = nullptr,
                               Corpus* cored_out = nullptr) {
  auto filtered = drop_attributeless_reviews(corpus, pairs);
  auto cored = five_core_filter(filtered);
  Dataset ds;
  ds.attributes = attrs;
  ds.split = leave_one_out_split(cored);
  ds.pairs = restrict_pairs(pairs, cored);
  if (stats) {
    stats->loaded = corpus.num_interactions();
    stats->with_pairs = filtered.num_interactions();
    stats->after_core = cored.num_interactions();
    stats->users = ds.split.train.num_users();
    stats->items = ds.split.train.num_items();
  }
  if (cored_out) *cored_out = std::move(cored);
  return ds;
}

inline void save_dataset(const Dataset& ds, const Corpus& cored, const std::filesystem::path& dir) {
  save_split(ds.split, cored, dir);
  save_pairs(ds.pairs, ds.attributes, dir / "pairs.jsonl");
  save_attributes(ds.attributes, dir / "attributes.json");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.attributes = load_attributes((dir / "attributes.json").string());
  ds.split = load_split(dir);
  ds.pairs = load_pairs(dir / "pairs.jsonl", ds.attributes);
  return ds;
}

// Graphs (from training interactions only) plus the frozen attribute vectors
// for a model configuration.
struct ModelInputs {
  GraphContext context;
  Matrix attr_vectors;
};

inline ModelInputs build_model_inputs(const Dataset& ds, const ModelConfig& cfg,
                                      const TextEncoder& encoder) {
  cfg.validate();
  if (cfg.num_attributes != ds.attributes.size()) {
    throw ConfigError("model expects " + std::to_string(cfg.num_attributes) +
                      " attributes, dataset has " + std::to_string(ds.attributes.size()));
  }
  const auto& train = ds.split.train;
  ModelInputs in;
  std::vector<AttributeGraph> graphs;
  if (cfg.coarse_single_graph) {
    graphs.push_back(build_review_graph(train, encoder, cfg.graph_dim()));
    in.attr_vectors = Matrix::Zero(1, static_cast<Eigen::Index>(cfg.graph_dim()));
  } else {
    graphs = build_attribute_graphs(restrict_pairs(ds.pairs, train), train, cfg.num_attributes,
                                    encoder, cfg.dim);
    in.attr_vectors.resize(static_cast<Eigen::Index>(cfg.num_attributes),
                           static_cast<Eigen::Index>(cfg.dim));
    for (std::size_t n = 0; n < cfg.num_attributes; ++n) {
      auto v = encoder.encode(ds.attributes[n], cfg.dim);
      for (std::size_t k = 0; k < cfg.dim; ++k) {
        in.attr_vectors(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k)) = v[k];
      }
    }
  }
  in.context = make_context(std::move(graphs), build_global_graph(train, cfg.two_hop_cap));
  return in;
}

// ---------------------------------------------------------------------------
// Subcommands

struct SynthRun {
  SynthConfig config;
  std::filesystem::path out_dir;
};

inline SynthOutput run_synth(const SynthRun& run) {
  auto out = generate(run.config);
  write_synth(out, run.config, run.out_dir);
  return out;
}

struct ExtractRun {
  std::string mode = "lexicon";  // lexicon | llm
  std::filesystem::path input;
  InputFormat format = InputFormat::jsonl;
  std::string attributes;  // file or preset
  std::filesystem::path lexicon;
  std::filesystem::path out;
  // llm mode
  std::size_t runs = 5;
  std::string endpoint;
  std::string model = "gpt-3.5-turbo";
  std::filesystem::path cassette;
  std::size_t concurrency = 4;
  double requests_per_second = 0.0;
  std::filesystem::path failure_log;
};

struct ExtractSummary {
  std::size_t pairs = 0;
  std::size_t failures = 0;
  std::size_t network_calls = 0;
  std::size_t cache_hits = 0;
};

// Supplied by the caller so this header does not pull in the HTTP client.
using EndpointFactory = std::function<std::unique_ptr<ChatEndpoint>(const ExtractRun&)>;

inline ExtractSummary run_extract(const ExtractRun& run, const EndpointFactory& make_endpoint = {}) {
  const auto attrs = load_attributes(run.attributes);
  const auto corpus = load_interactions(run.input, run.format);
  ExtractSummary summary;
  PairStore store;
  if (run.mode == "lexicon") {
    store = extract_with_lexicon(attrs, load_lexicon(run.lexicon), corpus);
  } else if (run.mode == "llm") {
    auto cassette = run.cassette.empty() ? Cassette{} : Cassette::load(run.cassette);
    std::unique_ptr<ChatEndpoint> endpoint;
    if (!run.endpoint.empty() && make_endpoint) endpoint = make_endpoint(run);
    LlmExtractionOptions opts;
    opts.runs = run.runs;
    opts.max_concurrency = run.concurrency;
    opts.max_requests_per_second = run.requests_per_second;
    auto result = extract_with_llm(endpoint.get(), cassette, attrs, corpus, opts);
    if (!run.cassette.empty()) cassette.save(run.cassette);
    if (!run.failure_log.empty()) save_failure_log(result.failures, run.failure_log);
    store = std::move(result.store);
    summary.failures = result.failures.size();
    summary.network_calls = result.network_calls;
    summary.cache_hits = result.cache_hits;
  } else {
    throw ConfigError("unknown extraction mode '" + run.mode + "' (expected llm or lexicon)");
  }
  save_pairs(store, attrs, run.out);
  summary.pairs = store.size();
  return summary;
}

struct PreprocessRun {
  std::filesystem::path input;
  InputFormat format = InputFormat::jsonl;
  std::string attributes;
  std::filesystem::path pairs;    // either a pair file...
  std::filesystem::path lexicon;  // ...or a lexicon to extract with
  std::filesystem::path out_dir;
};

inline PreprocessStats run_preprocess(const PreprocessRun& run) {
  if (run.pairs.empty() == run.lexicon.empty()) {
    throw ConfigError("preprocess needs exactly one of a pair file or a lexicon");
  }
  const auto attrs = load_attributes(run.attributes);
  const auto corpus = load_interactions(run.input, run.format);
  const auto pairs = run.pairs.empty() ? extract_with_lexicon(attrs, load_lexicon(run.lexicon), corpus)
                                       : load_pairs(run.pairs, attrs);
  PreprocessStats stats;
  Corpus cored;
  auto ds = prepare_dataset(corpus, attrs, pairs, &stats, &cored);
  save_dataset(ds, cored, run.out_dir);
  return stats;
}

struct BuildGraphsRun {
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;
  ModelConfig config;
};

inline GraphContext run_build_graphs(const BuildGraphsRun& run) {
  const auto ds = load_dataset(run.data_dir);
  auto cfg = run.config;
  cfg.num_attributes = ds.attributes.size();
  HashingEncoder encoder;
  auto inputs = build_model_inputs(ds, cfg, encoder);
  dump_graphs(inputs.context.graphs, ds.split.train, run.out_dir);
  return std::move(inputs.context);
}

struct TrainRun {
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;
  ModelConfig config;
  TrainHyper hyper;
  bool verbose = false;
};

struct TrainSummary {
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  double best_valid_prec = 0.0;
};

inline TrainResult train_on_dataset(const Dataset& ds, ModelConfig cfg, const TrainHyper& hyper,
                                    const TrainOptions& opts = {}) {
  cfg.num_attributes = ds.attributes.size();
  HashingEncoder encoder;
  auto inputs = build_model_inputs(ds, cfg, encoder);
  auto params = init_params(cfg, hyper.seed, ds.split.train.num_users(),
                            ds.split.train.num_items(), inputs.attr_vectors);
  return train(ds.split, inputs.context, cfg, std::move(params), hyper, opts);
}

// Writes best.ckpt, last.ckpt and metrics.csv into out_dir.
inline TrainSummary run_train(const TrainRun& run) {
  const auto ds = load_dataset(run.data_dir);
  TrainOptions opts;
  opts.checkpoint_dir = run.out_dir;
  opts.meta["seed"] = run.hyper.seed;
  if (run.verbose) {
    opts.on_epoch = [](const EpochLog& e) {
      std::cerr << "epoch " << e.epoch << " loss " << e.train_loss << " valid Prec@20 "
                << e.valid_prec << " NDCG@20 " << e.valid_ndcg << '\n';
    };
  }
  auto result = train_on_dataset(ds, run.config, run.hyper, opts);
  std::ofstream log(run.out_dir / "metrics.csv", std::ios::binary);
  write_metric_log(result.log, log);
  return {result.log.size(), result.best_epoch, result.best_valid_prec};
}

struct EvaluateRun {
  std::filesystem::path checkpoint;
  std::filesystem::path data_dir;
  std::vector<std::size_t> ks = {10, 20};
  EvalTarget target = EvalTarget::test;
  std::string method = "finerec";  // finerec | popularity | sknn
  std::size_t sknn_neighbors = 50;
  bool exclude_history = true;
  std::filesystem::path per_user;  // optional JSONL dump
};

inline MetricTable run_evaluate(const EvaluateRun& run) {
  const auto ds = load_dataset(run.data_dir);
  MetricTable table;
  if (run.method == "popularity") {
    table = popularity_baseline(ds.split, run.target, run.ks, run.exclude_history);
  } else if (run.method == "sknn") {
    table = sknn_baseline(ds.split, run.target, run.ks, run.sknn_neighbors, run.exclude_history);
  } else if (run.method == "finerec") {
    const auto ck = load_checkpoint(run.checkpoint);
    if (ck.config.num_attributes != ds.attributes.size()) {
      throw ShapeError("checkpoint has " + std::to_string(ck.config.num_attributes) +
                       " attributes, dataset has " + std::to_string(ds.attributes.size()));
    }
    if (ck.params.num_users() != ds.split.train.num_users() ||
        ck.params.num_items() != ds.split.train.num_items()) {
      throw ShapeError("checkpoint is for " + std::to_string(ck.params.num_users()) + " users x " +
                       std::to_string(ck.params.num_items()) + " items, dataset has " +
                       std::to_string(ds.split.train.num_users()) + " x " +
                       std::to_string(ds.split.train.num_items()));
    }
    HashingEncoder encoder;
    auto inputs = build_model_inputs(ds, ck.config, encoder);
    const auto cases = make_eval_cases(ds.split, run.target);
    table = evaluate_model(ck.params, inputs.context, ck.config, cases, run.ks, run.exclude_history);
  } else {
    throw ConfigError("unknown method '" + run.method + "' (expected finerec, popularity or sknn)");
  }
  if (!run.per_user.empty()) {
    std::ofstream out(run.per_user, std::ios::binary);
    table.write_per_user(out, ds.split.train);
  }
  return table;
}

struct Recommendation {
  std::string item;
  double score = 0.0;
  // "Attribute: opinion" for the opinion about the item closest to the
  // user's attribute embedding, one per attribute the item has opinions on.
  std::vector<std::string> explanations;
};

struct RecommendRun {
  std::filesystem::path checkpoint;
  std::filesystem::path data_dir;
  std::string user;
  std::size_t top = 20;
};

inline std::vector<Recommendation> run_recommend(const RecommendRun& run) {
  const auto ds = load_dataset(run.data_dir);
  const auto ck = load_checkpoint(run.checkpoint);
  const auto& train = ds.split.train;
  if (ck.params.num_users() != train.num_users() || ck.params.num_items() != train.num_items()) {
    throw ShapeError("checkpoint does not match the dataset's user/item counts");
  }
  const auto u = train.user_index(run.user);
  if (!u) throw Error("unknown user '" + run.user + "'");
  HashingEncoder encoder;
  auto inputs = build_model_inputs(ds, ck.config, encoder);
  const auto st = forward(ck.params, inputs.context, ck.config);

  std::vector<std::size_t> history;
  for (const auto& e : train.sequence(run.user)) history.push_back(*train.item_index(e.item_id));
  for (const auto* held : {&ds.split.validation, &ds.split.test}) {
    auto it = held->find(run.user);
    if (it != held->end()) history.push_back(*train.item_index(it->second));
  }
  std::vector<double> scores;
  model_scores(st, ck.config, *u, history, scores);
  const auto ranked = rank_items(scores, history);

  // Opinions voiced about each item in training, per attribute.
  std::map<std::pair<std::string, std::size_t>, std::set<std::string>> item_opinions;
  const auto train_pairs = restrict_pairs(ds.pairs, train);
  for (const auto& p : train_pairs.pairs()) {
    item_opinions[{p.item_id, p.attribute_index}].insert(p.opinion_text);
  }

  std::vector<Recommendation> out;
  for (std::size_t r = 0; r < std::min(run.top, ranked.size()); ++r) {
    const auto x = ranked[r];
    Recommendation rec{train.items()[x], scores[x], {}};
    if (!ck.config.coarse_single_graph) {
      for (std::size_t n = 0; n < ds.attributes.size(); ++n) {
        auto it = item_opinions.find({rec.item, n});
        if (it == item_opinions.end()) continue;
        const Vector user_vec = st.user_layers[n].back().row(static_cast<Eigen::Index>(*u));
        std::string best;
        double best_sim = -2.0;
        for (const auto& o : it->second) {
          const auto v = encoder.encode(o, ck.config.dim);
          const Vector ov = Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
          const double sim = cosine(user_vec, ov);
          if (sim > best_sim) {
            best_sim = sim;
            best = o;
          }
        }
        rec.explanations.push_back(ds.attributes[n] + ": " + best);
      }
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace finerec
