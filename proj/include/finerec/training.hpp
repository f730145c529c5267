#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "finerec/checkpoint.hpp"
#include "finerec/corpus.hpp"
#include "finerec/error.hpp"
#include "finerec/evaluation.hpp"
#include "finerec/model.hpp"
#include "finerec/rng.hpp"

namespace finerec {

struct TrainingInstance {
  std::size_t user = 0;
  std::size_t target = 0;
  std::vector<std::size_t> history;
};

// One instance per position t >= 2 of every train sequence: target x_t with
// history x_1..x_{t-1}. Ordered by user index, then t.
inline std::vector<TrainingInstance> make_training_instances(const SplitCorpus& split) {
  const auto& train = split.train;
  std::vector<TrainingInstance> out;
  for (const auto& [user, seq] : train.sequences()) {
    const auto u = *train.user_index(user);
    std::vector<std::size_t> items;
    for (const auto& e : seq) items.push_back(*train.item_index(e.item_id));
    for (std::size_t t = 1; t < items.size(); ++t) {
      out.push_back({u, items[t], std::vector<std::size_t>(items.begin(), items.begin() + t)});
    }
  }
  return out;
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> gradient;
};

// Binary cross-entropy over every item with the target as the only positive:
//   -log s(y_t) - sum_{j != t} log(1 - s(y_j)) = sum_j softplus(y_j) - y_t
// Gradient: sigmoid(y_j) - [j == t].
inline LossAndGradient bce_loss(std::span<const double> scores, std::size_t target) {
  if (target >= scores.size()) throw Error("target index out of range");
  LossAndGradient r;
  r.gradient.resize(scores.size());
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (!std::isfinite(scores[j])) throw NumericError("non-finite score");
    // softplus(s) - s is evaluated as softplus(-s) to avoid cancellation.
    r.loss += j == target ? softplus(-scores[j]) : softplus(scores[j]);
    r.gradient[j] = j == target ? -sigmoid(-scores[j]) : sigmoid(scores[j]);
  }
  return r;
}

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  AdamConfig config;
  std::size_t step = 0;
  ModelParams m;
  ModelParams v;

  static OptimizerState for_params(const ModelParams& p, AdamConfig cfg = {}) {
    return {cfg, 0, p.zeros_like(), p.zeros_like()};
  }
};

// Adam with bias correction. Blocks rejected by `trainable` are left alone.
inline void adam_step(ModelParams& params, ModelParams& grads, OptimizerState& state,
                      const std::function<bool(const std::string&)>& trainable = {}) {
  ++state.step;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  auto pb = params.blocks();
  auto gb = grads.blocks();
  auto mb = state.m.blocks();
  auto vb = state.v.blocks();
  if (pb.size() != gb.size() || pb.size() != mb.size()) throw ShapeError("optimizer block mismatch");
  for (std::size_t i = 0; i < pb.size(); ++i) {
    const auto& name = pb[i].first;
    if (trainable && !trainable(name)) continue;
    Matrix& p = *pb[i].second;
    const Matrix& g = *gb[i].second;
    Matrix& m = *mb[i].second;
    Matrix& v = *vb[i].second;
    if (p.rows() != g.rows() || p.cols() != g.cols()) {
      throw ShapeError("gradient shape mismatch in block " + name);
    }
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseAbs2();
    const Matrix update =
        (c.lr * (m / bc1).array() / ((v / bc2).array().sqrt() + c.epsilon)).matrix();
    if (!update.allFinite()) throw NumericError("non-finite Adam update in parameter block " + name);
    p -= update;
  }
}

// Frozen blocks: attribute vectors unless unfrozen, and whichever fusion
// parameters the configured fusion does not use.
inline std::function<bool(const std::string&)> trainable_blocks(const ModelConfig& cfg) {
  return [cfg](const std::string& name) {
    if (name == "attr_vec") return cfg.train_attribute_vectors;
    if (name == "fusion_bias") return cfg.concat_mlp_fusion;
    if (name == "W2" || name == "W3" || name == "W4") return !cfg.concat_mlp_fusion;
    return true;
  };
}

struct BatchResult {
  double loss = 0.0;  // mean over the batch
  ModelParams grads;
};

// Mean BCE loss of `batch` with exact gradients. Full ranking by default;
// when `negatives` is given, instance b only scores its target plus
// negatives[b].
inline BatchResult batch_loss_and_gradients(
    const ModelParams& params, const GraphContext& ctx, const ModelConfig& cfg,
    std::span<const TrainingInstance> batch,
    std::span<const std::vector<std::size_t>> negatives = {}) {
  const auto st = forward(params, ctx, cfg);
  const auto B = static_cast<Eigen::Index>(batch.size());
  const auto D = st.item_fused.cols();
  const auto nx = st.item_fused.rows();
  Matrix q(B, D);
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto& inst = batch[static_cast<std::size_t>(b)];
    q.row(b) = st.user_fused.row(static_cast<Eigen::Index>(inst.user)) +
               recent_interest(inst.history, st.item_fused, cfg.recent_window);
  }
  const Matrix scores = q * st.item_fused.transpose();
  Matrix g_scores(B, nx);
  BatchResult r;
  const double inv_b = batch.empty() ? 0.0 : 1.0 / static_cast<double>(B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto target = batch[static_cast<std::size_t>(b)].target;
    if (negatives.empty()) {
      auto lg = bce_loss(std::span<const double>(scores.row(b).data(), static_cast<std::size_t>(nx)),
                         target);
      r.loss += lg.loss * inv_b;
      for (Eigen::Index j = 0; j < nx; ++j) {
        g_scores(b, j) = lg.gradient[static_cast<std::size_t>(j)] * inv_b;
      }
    } else {
      const auto& neg = negatives[static_cast<std::size_t>(b)];
      std::vector<double> sub;
      sub.push_back(scores(b, static_cast<Eigen::Index>(target)));
      for (auto j : neg) sub.push_back(scores(b, static_cast<Eigen::Index>(j)));
      auto lg = bce_loss(sub, 0);
      r.loss += lg.loss * inv_b;
      g_scores.row(b).setZero();
      g_scores(b, static_cast<Eigen::Index>(target)) += lg.gradient[0] * inv_b;
      for (std::size_t k = 0; k < neg.size(); ++k) {
        g_scores(b, static_cast<Eigen::Index>(neg[k])) += lg.gradient[k + 1] * inv_b;
      }
    }
  }
  const Matrix g_q = g_scores * st.item_fused;
  Matrix g_item_fused = g_scores.transpose() * q;
  Matrix g_user_fused = Matrix::Zero(st.user_fused.rows(), D);
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto& inst = batch[static_cast<std::size_t>(b)];
    g_user_fused.row(static_cast<Eigen::Index>(inst.user)) += g_q.row(b);
    const std::size_t take = std::min(cfg.recent_window, inst.history.size());
    const double w = 1.0 / static_cast<double>(take);
    for (std::size_t k = inst.history.size() - take; k < inst.history.size(); ++k) {
      g_item_fused.row(static_cast<Eigen::Index>(inst.history[k])) += w * g_q.row(b);
    }
  }
  r.grads = backward(st, params, ctx, cfg, g_user_fused, g_item_fused);
  return r;
}

// Loss only (used by finite-difference checks).
inline double batch_loss(const ModelParams& params, const GraphContext& ctx, const ModelConfig& cfg,
                         std::span<const TrainingInstance> batch) {
  const auto st = forward(params, ctx, cfg);
  double loss = 0.0;
  std::vector<double> scores;
  for (const auto& inst : batch) {
    model_scores(st, cfg, inst.user, inst.history, scores);
    loss += bce_loss(scores, inst.target).loss;
  }
  return batch.empty() ? 0.0 : loss / static_cast<double>(batch.size());
}

struct TrainHyper {
  std::size_t batch_size = 512;
  AdamConfig adam;
  std::size_t max_epochs = 200;
  std::size_t patience = 10;
  std::uint64_t seed = 42;
  std::size_t select_k = 20;   // model selection on validation Prec@k
  bool exclude_history = true;
  // 0 = full ranking over all items; otherwise this many uniformly sampled
  // non-target items per instance.
  std::size_t negative_samples = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double valid_prec = 0.0;
  double valid_ndcg = 0.0;
  double seconds = 0.0;
};

inline void write_metric_log(const std::vector<EpochLog>& log, std::ostream& out,
                             bool with_seconds = true) {
  out << "epoch,train_loss,valid_prec20,valid_ndcg20" << (with_seconds ? ",seconds" : "") << '\n';
  char buf[160];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof(buf), "%zu,%.10f,%.6f,%.6f", e.epoch, e.train_loss, e.valid_prec,
                  e.valid_ndcg);
    out << buf;
    if (with_seconds) {
      std::snprintf(buf, sizeof(buf), ",%.3f", e.seconds);
      out << buf;
    }
    out << '\n';
  }
}

struct TrainResult {
  ModelParams best_params;
  std::size_t best_epoch = 0;
  double best_valid_prec = -1.0;
  double best_valid_ndcg = -1.0;
  std::vector<EpochLog> log;
};

struct TrainOptions {
  // When set, last.ckpt is written after every epoch and best.ckpt whenever
  // validation improves.
  std::optional<std::filesystem::path> checkpoint_dir;
  // Extra metadata stored in checkpoint headers.
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  std::function<void(const EpochLog&)> on_epoch;
};

// Seeded mini-batch Adam over per-position instances. After every epoch the
// model is scored on validation; the best (Prec@k, then NDCG@k) parameters
// are kept and training stops after `patience` epochs without improvement.
inline TrainResult train(const SplitCorpus& split, const GraphContext& ctx, const ModelConfig& cfg,
                         ModelParams params, const TrainHyper& hyper, const TrainOptions& opts = {}) {
  if (hyper.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  auto instances = make_training_instances(split);
  const auto valid_cases = make_eval_cases(split, EvalTarget::validation);
  const std::vector<std::size_t> ks = {hyper.select_k};
  auto state = OptimizerState::for_params(params, hyper.adam);
  const auto trainable = trainable_blocks(cfg);
  Xoshiro256 rng(hyper.seed ^ 0x5eed5eed5eed5eedULL);

  TrainResult result;
  result.best_params = params;
  std::size_t since_improvement = 0;
  auto save = [&](const ModelParams& p, const std::string& name, std::size_t epoch) {
    if (!opts.checkpoint_dir) return;
    std::filesystem::create_directories(*opts.checkpoint_dir);
    Checkpoint ck{cfg, p, opts.meta};
    ck.meta["epoch"] = epoch;
    save_checkpoint(ck, *opts.checkpoint_dir / name);
  };

  for (std::size_t epoch = 1; epoch <= hyper.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    rng.shuffle(instances);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < instances.size(); start += hyper.batch_size) {
      const auto end = std::min(instances.size(), start + hyper.batch_size);
      std::span<const TrainingInstance> batch(instances.data() + start, end - start);
      std::vector<std::vector<std::size_t>> negatives;
      if (hyper.negative_samples > 0) {
        const auto nx = params.num_items();
        if (nx < 2) throw ConfigError("negative sampling needs at least two items");
        for (const auto& inst : batch) {
          auto& neg = negatives.emplace_back();
          while (neg.size() < hyper.negative_samples) {
            const auto j = static_cast<std::size_t>(rng.below(nx));
            if (j != inst.target) neg.push_back(j);
          }
        }
      }
      auto br = batch_loss_and_gradients(params, ctx, cfg, batch, negatives);
      if (!std::isfinite(br.loss)) throw NumericError("non-finite training loss");
      adam_step(params, br.grads, state, trainable);
      loss_sum += br.loss;
      ++batches;
    }
    const auto metrics = evaluate_model(params, ctx, cfg, valid_cases, ks, hyper.exclude_history);
    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    entry.valid_prec = metrics.precision.at(hyper.select_k);
    entry.valid_ndcg = metrics.ndcg.at(hyper.select_k);
    entry.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(entry);
    if (opts.on_epoch) opts.on_epoch(entry);

    const bool improved = entry.valid_prec > result.best_valid_prec ||
                          (entry.valid_prec == result.best_valid_prec &&
                           entry.valid_ndcg > result.best_valid_ndcg);
    if (improved) {
      result.best_params = params;
      result.best_epoch = epoch;
      result.best_valid_prec = entry.valid_prec;
      result.best_valid_ndcg = entry.valid_ndcg;
      since_improvement = 0;
      save(params, "best.ckpt", epoch);
    } else {
      ++since_improvement;
    }
    save(params, "last.ckpt", epoch);
    if (since_improvement >= hyper.patience) break;
  }
  return result;
}

}  // namespace finerec
