// finerec command-line tool.
//
// Every subcommand accepts --config FILE, a flat JSON object whose keys are
// flag names (dashes or underscores). Values from the file are applied first
// and flags given on the command line override them.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "finerec/app.hpp"
#include "finerec/http_endpoint.hpp"

namespace {

using finerec::ModelConfig;

struct ModelFlags {
  std::size_t dim = 16;
  std::size_t layers = 1;
  std::size_t recent_window = 5;
  std::string weighting = "clamp";
  std::string variant = "full";
  long long two_hop_cap = 100;
  double init_noise = 1.0;
  bool train_attribute_vectors = false;

  void add(CLI::App* cmd) {
    cmd->add_option("--dim", dim, "Per-attribute embedding width")->capture_default_str();
    cmd->add_option("--layers", layers, "Convolution rounds")->capture_default_str();
    cmd->add_option("--recent-window", recent_window, "Items averaged into recent interest")
        ->capture_default_str();
    cmd->add_option("--weighting", weighting, "Neighbour weighting")
        ->check(CLI::IsMember({"clamp", "softmax"}))
        ->capture_default_str();
    cmd->add_option("--variant", variant, "Model variant")
        ->check(CLI::IsMember({"full", "no-diversity", "no-opinion", "coarse", "concat-mlp"}))
        ->capture_default_str();
    cmd->add_option("--two-hop-cap", two_hop_cap, "Two-hop neighbour cap (-1 = unlimited)")
        ->capture_default_str();
    cmd->add_option("--init-noise", init_noise, "Noise scale on identity-initialised W")
        ->capture_default_str();
    cmd->add_flag("--train-attribute-vectors", train_attribute_vectors,
                  "Update attribute vectors during training");
  }

  ModelConfig config(std::size_t num_attributes) const {
    ModelConfig c;
    c.num_attributes = num_attributes;
    c.dim = dim;
    c.layers = layers;
    c.recent_window = recent_window;
    c.weighting = weighting == "softmax" ? finerec::SimilarityWeighting::softmax
                                         : finerec::SimilarityWeighting::clamp;
    c.two_hop_cap = two_hop_cap < 0 ? finerec::kUnlimitedNeighbors
                                    : static_cast<std::size_t>(two_hop_cap);
    c.init_noise = init_noise;
    c.train_attribute_vectors = train_attribute_vectors;
    c.no_diversity = variant == "no-diversity";
    c.no_opinion = variant == "no-opinion";
    c.coarse_single_graph = variant == "coarse";
    c.concat_mlp_fusion = variant == "concat-mlp";
    return c;
  }
};

std::string flag_name(std::string key) {
  for (char& c : key) {
    if (c == '_') c = '-';
  }
  return key;
}

std::string scalar_token(const nlohmann::json& v) {
  return v.is_string() ? v.get<std::string>() : v.dump();
}

// Turns the config file into leading command-line tokens for `cmd`. Keys with
// no matching flag are returned in `rest` for subcommands that take
// structured settings.
std::vector<std::string> config_tokens(const CLI::App& cmd, const std::string& path,
                                       nlohmann::json& rest) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw finerec::Error("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw finerec::ParseError(path, 0, e.what());
  }
  if (!j.is_object()) throw finerec::ParseError(path, 0, "config must be a JSON object");
  std::vector<std::string> tokens;
  rest = nlohmann::json::object();
  for (const auto& [key, value] : j.items()) {
    const auto name = "--" + flag_name(key);
    const CLI::Option* opt = nullptr;
    try {
      opt = cmd.get_option(name);
    } catch (const CLI::OptionNotFound&) {
    }
    if (!opt || name == "--config") {
      rest[key] = value;
      continue;
    }
    if (opt->get_expected_max() == 0) {
      if (!value.is_boolean()) {
        throw finerec::ConfigError(path + ": '" + key + "' must be true or false");
      }
      if (value.get<bool>()) tokens.push_back(name);
      continue;
    }
    std::string joined;
    if (value.is_array()) {
      for (const auto& v : value) joined += (joined.empty() ? "" : ",") + scalar_token(v);
    } else {
      joined = scalar_token(value);
    }
    tokens.push_back(name);
    tokens.push_back(joined);
  }
  return tokens;
}

void reject_rest(const nlohmann::json& rest, const std::string& path) {
  if (!rest.empty()) {
    throw finerec::ConfigError(path + ": unknown setting '" + rest.begin().key() + "'");
  }
}

finerec::InputFormat input_format(const std::string& s) { return finerec::parse_input_format(s); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attribute-opinion graph recommender"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  std::string config_path;
  std::uint64_t seed = 42;
  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON file mirroring the flags");
    cmd->add_option("--seed", seed, "Seed for all randomness")->capture_default_str();
  };

  // synth
  finerec::SynthRun synth;
  auto* synth_cmd = app.add_subcommand("synth", "Write a planted-signal dataset");
  common(synth_cmd);
  synth_cmd->add_option("--out-dir", synth.out_dir, "Output directory")->required();
  synth_cmd->add_option("--num-users", synth.config.num_users)->capture_default_str();
  synth_cmd->add_option("--num-items", synth.config.num_items)->capture_default_str();
  synth_cmd->add_option("--interactions-per-user", synth.config.interactions_per_user)
      ->capture_default_str();
  synth_cmd->add_option("--noise", synth.config.noise)->capture_default_str();
  synth_cmd->add_option("--mention-prob", synth.config.mention_prob)->capture_default_str();
  synth_cmd->add_option("--filler-per-review", synth.config.filler_per_review)
      ->capture_default_str();

  // extract
  finerec::ExtractRun extract;
  std::string extract_format = "jsonl";
  auto* extract_cmd = app.add_subcommand("extract", "Extract attribute-opinion pairs");
  common(extract_cmd);
  extract_cmd->add_option("--mode", extract.mode)
      ->check(CLI::IsMember({"llm", "lexicon"}))
      ->capture_default_str();
  extract_cmd->add_option("--in", extract.input, "Interaction file")->required();
  extract_cmd->add_option("--format", extract_format)
      ->check(CLI::IsMember({"jsonl", "tsv"}))
      ->capture_default_str();
  extract_cmd->add_option("--attributes", extract.attributes, "Attribute file or preset name")
      ->required();
  extract_cmd->add_option("--lexicon", extract.lexicon, "Lexicon file (lexicon mode)");
  extract_cmd->add_option("--out", extract.out, "Pair file to write")->required();
  extract_cmd->add_option("--runs", extract.runs, "Sampling runs per prompt")->capture_default_str();
  extract_cmd->add_option("--endpoint", extract.endpoint, "Chat-completions URL");
  extract_cmd->add_option("--model", extract.model)->capture_default_str();
  extract_cmd->add_option("--cassette", extract.cassette, "Response cache file");
  extract_cmd->add_option("--concurrency", extract.concurrency)->capture_default_str();
  extract_cmd->add_option("--requests-per-second", extract.requests_per_second,
                          "Rate limit (0 = none)");
  extract_cmd->add_option("--failure-log", extract.failure_log);

  // preprocess
  finerec::PreprocessRun prep;
  std::string prep_format = "jsonl";
  auto* prep_cmd = app.add_subcommand("preprocess", "Filter, 5-core and split a corpus");
  common(prep_cmd);
  prep_cmd->add_option("--in", prep.input, "Interaction file")->required();
  prep_cmd->add_option("--format", prep_format)
      ->check(CLI::IsMember({"jsonl", "tsv"}))
      ->capture_default_str();
  prep_cmd->add_option("--attributes", prep.attributes, "Attribute file or preset name")
      ->required();
  prep_cmd->add_option("--pairs", prep.pairs, "Pair file");
  prep_cmd->add_option("--lexicon", prep.lexicon, "Lexicon to extract pairs with");
  prep_cmd->add_option("--out-dir", prep.out_dir, "Dataset directory to write")->required();

  // build-graphs
  finerec::BuildGraphsRun graphs_run;
  ModelFlags graph_flags;
  auto* graphs_cmd = app.add_subcommand("build-graphs", "Dump attribute graphs as edge lists");
  common(graphs_cmd);
  graphs_cmd->add_option("--data-dir", graphs_run.data_dir)->required();
  graphs_cmd->add_option("--out-dir", graphs_run.out_dir)->required();
  graph_flags.add(graphs_cmd);

  // train
  finerec::TrainRun train;
  ModelFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "Train and write checkpoints plus metrics.csv");
  common(train_cmd);
  train_cmd->add_option("--data-dir", train.data_dir)->required();
  train_cmd->add_option("--out", train.out_dir, "Output directory")->required();
  train_flags.add(train_cmd);
  train_cmd->add_option("--lr", train.hyper.adam.lr)->capture_default_str();
  train_cmd->add_option("--batch-size", train.hyper.batch_size)->capture_default_str();
  train_cmd->add_option("--epochs", train.hyper.max_epochs, "Maximum epochs")->capture_default_str();
  train_cmd->add_option("--patience", train.hyper.patience)->capture_default_str();
  train_cmd->add_option("--negative-samples", train.hyper.negative_samples,
                        "Sampled negatives per instance (0 = full ranking)")
      ->capture_default_str();
  train_cmd->add_flag("--verbose", train.verbose, "Log every epoch to stderr");

  // evaluate
  finerec::EvaluateRun eval;
  std::string eval_split = "test";
  std::filesystem::path eval_out;
  auto* eval_cmd = app.add_subcommand("evaluate", "Print Prec@k / NDCG@k as CSV");
  common(eval_cmd);
  eval_cmd->add_option("--ckpt", eval.checkpoint, "Checkpoint (model method)");
  eval_cmd->add_option("--data-dir", eval.data_dir)->required();
  eval_cmd->add_option("--k", eval.ks, "Cut-offs")->delimiter(',')->capture_default_str();
  eval_cmd->add_option("--split", eval_split)
      ->check(CLI::IsMember({"valid", "test"}))
      ->capture_default_str();
  eval_cmd->add_option("--method", eval.method)
      ->check(CLI::IsMember({"finerec", "popularity", "sknn"}))
      ->capture_default_str();
  eval_cmd->add_option("--neighbors", eval.sknn_neighbors, "SKNN neighbourhood size")
      ->capture_default_str();
  eval_cmd->add_option("--per-user", eval.per_user, "Per-user JSONL dump");
  eval_cmd->add_option("--out", eval_out, "Also write the CSV here");

  // recommend
  finerec::RecommendRun rec;
  auto* rec_cmd = app.add_subcommand("recommend", "Top-N items with opinion explanations");
  common(rec_cmd);
  rec_cmd->add_option("--ckpt", rec.checkpoint)->required();
  rec_cmd->add_option("--data-dir", rec.data_dir)->required();
  rec_cmd->add_option("--user", rec.user)->required();
  rec_cmd->add_option("--top", rec.top)->capture_default_str();

  // Config files are expanded into leading tokens of the subcommand, so a
  // config needs a first pass to find the subcommand and the file.
  std::vector<std::string> args(argv + 1, argv + argc);
  nlohmann::json rest = nlohmann::json::object();
  try {
    for (std::size_t i = 0; i < args.size(); ++i) {
      std::string path;
      if (args[i] == "--config" && i + 1 < args.size()) {
        path = args[i + 1];
      } else if (args[i].rfind("--config=", 0) == 0) {
        path = args[i].substr(9);
      } else {
        continue;
      }
      if (args.empty() || args[0].rfind("-", 0) == 0) break;
      const CLI::App* cmd = nullptr;
      try {
        cmd = app.get_subcommand(args[0]);
      } catch (const CLI::OptionNotFound&) {
        break;
      }
      auto tokens = config_tokens(*cmd, path, rest);
      args.insert(args.begin() + 1, tokens.begin(), tokens.end());
      break;
    }
  } catch (const finerec::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (synth_cmd->parsed()) {
      // Structured settings (vocabulary, filler words) only come from the file.
      finerec::update_from_json(synth.config, rest);
      synth.config.seed = seed;
      auto out = finerec::run_synth(synth);
      std::cout << "wrote " << out.corpus.num_interactions() << " interactions, "
                << out.planted.size() << " planted pairs to " << synth.out_dir.string() << '\n';
    } else if (extract_cmd->parsed()) {
      reject_rest(rest, config_path);
      extract.format = input_format(extract_format);
      auto summary = finerec::run_extract(extract, [](const finerec::ExtractRun& r) {
        return std::make_unique<finerec::HttpChatEndpoint>(
            finerec::HttpChatEndpoint::config_from_env(r.endpoint, r.model));
      });
      std::cout << "wrote " << summary.pairs << " pairs to " << extract.out.string();
      if (extract.mode == "llm") {
        std::cout << " (" << summary.cache_hits << " cached, " << summary.network_calls
                  << " requested, " << summary.failures << " failed)";
      }
      std::cout << '\n';
      if (summary.failures > 0) return 1;
    } else if (prep_cmd->parsed()) {
      reject_rest(rest, config_path);
      prep.format = input_format(prep_format);
      auto s = finerec::run_preprocess(prep);
      std::cout << "loaded " << s.loaded << ", with pairs " << s.with_pairs << ", 5-core "
                << s.after_core << " (" << s.users << " users, " << s.items << " items)\n";
    } else if (graphs_cmd->parsed()) {
      reject_rest(rest, config_path);
      const auto attrs = finerec::load_attributes((graphs_run.data_dir / "attributes.json").string());
      graphs_run.config = graph_flags.config(attrs.size());
      auto ctx = finerec::run_build_graphs(graphs_run);
      std::cout << "wrote " << ctx.graphs.size() << " graphs to " << graphs_run.out_dir.string()
                << '\n';
    } else if (train_cmd->parsed()) {
      reject_rest(rest, config_path);
      const auto attrs = finerec::load_attributes((train.data_dir / "attributes.json").string());
      train.config = train_flags.config(attrs.size());
      train.hyper.seed = seed;
      auto s = finerec::run_train(train);
      std::printf("trained %zu epochs, best epoch %zu (valid Prec@20 %.6f)\n", s.epochs,
                  s.best_epoch, s.best_valid_prec);
    } else if (eval_cmd->parsed()) {
      reject_rest(rest, config_path);
      eval.target = eval_split == "valid" ? finerec::EvalTarget::validation : finerec::EvalTarget::test;
      if (eval.method == "finerec" && eval.checkpoint.empty()) {
        std::cerr << "usage error: --ckpt is required for --method finerec\n";
        return 2;
      }
      const auto table = finerec::run_evaluate(eval);
      const auto csv = table.csv();
      std::cout << csv;
      if (!eval_out.empty()) {
        std::ofstream out(eval_out, std::ios::binary);
        if (!out) throw finerec::Error("cannot write " + eval_out.string());
        out << csv;
      }
    } else if (rec_cmd->parsed()) {
      reject_rest(rest, config_path);
      const auto recs = finerec::run_recommend(rec);
      for (std::size_t r = 0; r < recs.size(); ++r) {
        std::string why;
        for (const auto& e : recs[r].explanations) why += (why.empty() ? "" : "; ") + e;
        std::printf("%zu\t%s\t%.6f\t%s\n", r + 1, recs[r].item.c_str(), recs[r].score, why.c_str());
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
