// SPDX-License-Identifier: Apache-2.0
//
// Data-parallel training with simulated AllReduce.
//
// Each global batch is split into N worker shards. Every worker computes the
// mean-loss gradient of its shard on a private tape; the shard gradients are
// averaged (ascending worker index) and one optimizer step is applied to the
// shared parameters. Because each worker reports a mean, averaging equal-size
// shards reproduces the full-batch gradient; unequal shards are weighted by
// sample count.
#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "cmt/checkpoint.hpp"
#include "cmt/metrics.hpp"

namespace cmt {

enum class OptimizerKind { sgd, adamw };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adamw") return OptimizerKind::adamw;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adamw)");
}

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adamw;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  GradientSet first_moment;
  GradientSet second_moment;
  std::uint64_t step = 0;
};

/// One worker's slice of a global batch. `noise[i]` seeds the dropout of
/// `samples[i]`; it depends only on the sample's global batch position.
struct WorkerShard {
  std::size_t node = 0;
  std::vector<const MultimodalSample*> samples;
  std::vector<Rng> noise;
};

struct ShardGradient {
  GradientSet gradients;
  double loss = 0.0;  ///< mean cross-entropy over the shard
  std::size_t count = 0;
};

inline void check_finite(const GradientSet& g) {
  for (const auto& [name, t] : g)
    if (!t.all_finite()) throw TrainingError("non-finite gradient in parameter '" + name + "'");
}

/// Mean-loss gradient of one shard. Sample gradients are summed in shard order.
inline ShardGradient compute_shard_gradient(const WorkerShard& shard, const CmtModel& model, bool training = true) {
  if (shard.samples.empty()) throw InputError("worker " + std::to_string(shard.node) + " received an empty shard");
  if (shard.noise.size() != shard.samples.size()) throw InputError("shard noise streams do not match its samples");
  ShardGradient out;
  out.count = shard.samples.size();
  for (std::size_t i = 0; i < shard.samples.size(); ++i) {
    Tape tape;
    ParamBinder bind(tape, model.params);
    Var loss = sample_loss(bind, model.config, *shard.samples[i], shard.noise[i], training);
    tape.backward(loss);
    out.loss += loss.value()[0];
    GradientSet g = bind.gradients();
    if (i == 0) {
      out.gradients = std::move(g);
    } else {
      for (auto& [name, acc] : out.gradients) {
        const Tensor& gi = g.at(name);
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += gi[j];
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(out.count);
  for (auto& [_, acc] : out.gradients)
    for (auto& v : acc.data()) v *= inv;
  out.loss *= inv;
  return out;
}

namespace detail {
inline void check_congruent(const std::vector<GradientSet>& sets) {
  if (sets.empty()) throw InputError("allreduce over zero workers");
  for (std::size_t i = 1; i < sets.size(); ++i) {
    if (sets[i].size() != sets[0].size()) throw DimensionError("allreduce: worker " + std::to_string(i) + " has a different parameter count");
    for (const auto& [name, t] : sets[0]) {
      auto it = sets[i].find(name);
      if (it == sets[i].end()) throw DimensionError("allreduce: worker " + std::to_string(i) + " lacks parameter '" + name + "'");
      if (it->second.shape() != t.shape())
        throw DimensionError("allreduce: parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                             " on worker " + std::to_string(i) + " but " + shape_str(t.shape()) + " on worker 0");
    }
  }
}
}  // namespace detail

/// Element-wise mean (1/N) sum_i g_i, summed in ascending worker order.
inline GradientSet allreduce(const std::vector<GradientSet>& sets) {
  detail::check_congruent(sets);
  GradientSet out = sets[0];
  for (std::size_t i = 1; i < sets.size(); ++i)
    for (auto& [name, acc] : out) {
      const Tensor& g = sets[i].at(name);
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += g[j];
    }
  const double inv = 1.0 / static_cast<double>(sets.size());
  for (auto& [_, acc] : out)
    for (auto& v : acc.data()) v *= inv;
  return out;
}

/// Sample-count-weighted mean sum_i n_i g_i / sum_i n_i, for uneven shards.
inline GradientSet allreduce_weighted(const std::vector<GradientSet>& sets, const std::vector<std::size_t>& counts) {
  detail::check_congruent(sets);
  if (counts.size() != sets.size()) throw InputError("allreduce_weighted: one count per worker required");
  const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  GradientSet out;
  for (const auto& [name, t] : sets[0]) {
    Tensor acc(t.shape(), 0.0);
    for (std::size_t i = 0; i < sets.size(); ++i) {
      const Tensor& g = sets[i].at(name);
      const double w = static_cast<double>(counts[i]);
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += w * g[j];
    }
    for (auto& v : acc.data()) v /= total;
    out.emplace(name, std::move(acc));
  }
  return out;
}

/// theta <- theta - lr * g.
inline void sgd_step(CmtModel& model, const GradientSet& grads, double lr) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  check_finite(grads);
  for (auto& [name, theta] : model.params) {
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    const Tensor& g = it->second;
    for (std::size_t j = 0; j < theta.size(); ++j) theta[j] -= lr * g[j];
  }
}

/// AdamW with bias-corrected moments and decoupled weight decay.
inline void adamw_step(CmtModel& model, const GradientSet& grads, OptimizerState& s) {
  if (s.kind != OptimizerKind::adamw) throw ConfigError("adamw_step on a non-AdamW optimizer state");
  if (!(s.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  check_finite(grads);
  ++s.step;
  const double t = static_cast<double>(s.step);
  const double bc1 = 1.0 - std::pow(s.beta1, t);
  const double bc2 = 1.0 - std::pow(s.beta2, t);
  for (auto& [name, theta] : model.params) {
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    const Tensor& g = it->second;
    Tensor& m = s.first_moment.try_emplace(name, theta.shape(), 0.0).first->second;
    Tensor& v = s.second_moment.try_emplace(name, theta.shape(), 0.0).first->second;
    for (std::size_t j = 0; j < theta.size(); ++j) {
      m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * g[j];
      v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      theta[j] -= s.learning_rate * (mhat / (std::sqrt(vhat) + s.eps) + s.weight_decay * theta[j]);
    }
  }
}

/// Scales all gradients so their global L2 norm is at most max_norm.
inline void clip_gradients(GradientSet& g, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, t] : g)
    for (double v : t.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const double f = max_norm / norm;
  for (auto& [_, t] : g)
    for (auto& v : t.data()) v *= f;
}

/// Splits `batch` over `workers`: floor(B/N) each, the last takes the remainder.
inline std::vector<std::vector<std::size_t>> partition_batch(const std::vector<std::size_t>& batch, std::size_t workers) {
  if (workers == 0) throw ConfigError("need at least one worker");
  std::vector<std::vector<std::size_t>> parts(workers);
  const std::size_t base = batch.size() / workers;
  std::size_t pos = 0;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t take = w + 1 == workers ? batch.size() - pos : base;
    parts[w].assign(batch.begin() + static_cast<std::ptrdiff_t>(pos), batch.begin() + static_cast<std::ptrdiff_t>(pos + take));
    pos += take;
  }
  return parts;
}

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adamw;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 80;
  std::size_t patience = 8;
  double min_delta = 1e-4;
  std::size_t workers = 1;
  bool parallel_workers = true;
  std::uint64_t seed = 0;
  double clip_norm = 0.0;  ///< 0 disables clipping
  bool shuffle = true;
  std::string checkpoint_path;  ///< written at each best-validation epoch when set
};

/// Preset for full-width backbones: small learning rate, larger batches.
inline TrainConfig full_scale_train_config() {
  TrainConfig c;
  c.learning_rate = 2e-5;
  c.batch_size = 64;
  c.max_epochs = 80;
  return c;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double seconds = 0.0;
};

struct TrainingLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
};

struct ValidationResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

using Validator = std::function<ValidationResult(const CmtModel&, std::size_t epoch)>;

/// Called after every optimizer step with (epoch, step-in-epoch, model, averaged gradient).
using StepObserver = std::function<void(std::size_t, std::size_t, const CmtModel&, const GradientSet&)>;

struct TrainResult {
  CmtModel model;  ///< parameters of the best validation epoch
  TrainingLog log;
};

inline Validator dataset_validator(const std::vector<MultimodalSample>& val) {
  return [&val](const CmtModel& m, std::size_t) {
    const Evaluation e = evaluate(m, val);
    return ValidationResult{e.report.cross_entropy, e.report.accuracy};
  };
}

/// Dropout stream of the sample at `position` in batch `batch` of `epoch`.
inline Rng sample_noise(std::uint64_t seed, std::size_t epoch, std::size_t batch, std::size_t position) {
  return Rng(seed).split({0x6e6f697365ULL, epoch, batch, position});
}

/// One data-parallel step over a global batch of sample indices.
/// Returns the sample-weighted mean loss and leaves the averaged gradient in `avg`.
inline double parallel_gradient(const CmtModel& model, const std::vector<MultimodalSample>& data,
                                const std::vector<std::size_t>& batch, std::size_t workers, bool parallel,
                                std::uint64_t seed, std::size_t epoch, std::size_t batch_index, GradientSet& avg) {
  auto parts = partition_batch(batch, workers);
  std::vector<WorkerShard> shards;
  std::size_t position = 0;
  for (std::size_t w = 0; w < parts.size(); ++w) {
    WorkerShard s{w, {}, {}};
    for (auto idx : parts[w]) {
      s.samples.push_back(&data[idx]);
      s.noise.push_back(sample_noise(seed, epoch, batch_index, position++));
    }
    if (!s.samples.empty()) shards.push_back(std::move(s));
  }
  std::vector<ShardGradient> results(shards.size());
  if (parallel && shards.size() > 1) {
    std::vector<std::exception_ptr> errors(shards.size());
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < shards.size(); ++i)
      threads.emplace_back([&, i] {
        try {
          results[i] = compute_shard_gradient(shards[i], model);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    for (auto& t : threads) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  } else {
    for (std::size_t i = 0; i < shards.size(); ++i) results[i] = compute_shard_gradient(shards[i], model);
  }
  std::vector<GradientSet> sets;
  std::vector<std::size_t> counts;
  double loss = 0.0;
  for (auto& r : results) {
    loss += r.loss * static_cast<double>(r.count);
    counts.push_back(r.count);
    sets.push_back(std::move(r.gradients));
  }
  const bool even = std::all_of(counts.begin(), counts.end(), [&](std::size_t c) { return c == counts[0]; });
  avg = even ? allreduce(sets) : allreduce_weighted(sets, counts);
  return loss / static_cast<double>(batch.size());
}

inline TrainResult train(CmtModel model, const std::vector<MultimodalSample>& train_set, const Validator& validate,
                         const TrainConfig& cfg, const StepObserver& observer = {}) {
  if (train_set.empty()) throw InputError("training split is empty");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (cfg.workers == 0) throw ConfigError("workers must be positive");
  OptimizerState opt;
  opt.kind = cfg.optimizer;
  opt.learning_rate = cfg.learning_rate;
  opt.weight_decay = cfg.weight_decay;

  TrainResult result{model, {}};
  double best = std::numeric_limits<double>::infinity();
  double best_for_patience = best;
  std::size_t stale = 0;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    if (cfg.shuffle) {
      Rng rng = Rng(cfg.seed).split({0x73687566ULL, epoch});
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    }
    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
      GradientSet grads;
      const double loss = parallel_gradient(model, train_set, batch, cfg.workers, cfg.parallel_workers, cfg.seed,
                                            epoch, batch_index, grads);
      if (!std::isfinite(loss))
        throw TrainingError("training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_index));
      if (cfg.clip_norm > 0.0) clip_gradients(grads, cfg.clip_norm);
      if (cfg.optimizer == OptimizerKind::sgd)
        sgd_step(model, grads, cfg.learning_rate);
      else
        adamw_step(model, grads, opt);
      if (observer) observer(epoch, batch_index, model, grads);
      loss_sum += loss * static_cast<double>(batch.size());
    }
    const ValidationResult val = validate(model, epoch);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!std::isfinite(val.loss))
      throw TrainingError("training diverged: non-finite validation loss at epoch " + std::to_string(epoch));
    result.log.epochs.push_back({epoch, loss_sum / static_cast<double>(train_set.size()), val.loss, val.accuracy, secs});

    if (val.loss < best) {
      best = val.loss;
      result.model = model;
      result.log.best_epoch = epoch;
      if (!cfg.checkpoint_path.empty()) save_checkpoint(cfg.checkpoint_path, model);
    }
    if (val.loss < best_for_patience - cfg.min_delta) {
      best_for_patience = val.loss;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      result.log.early_stopped = true;
      break;
    }
  }
  return result;
}

inline TrainResult train(CmtModel model, const std::vector<MultimodalSample>& train_set,
                         const std::vector<MultimodalSample>& val_set, const TrainConfig& cfg,
                         const StepObserver& observer = {}) {
  if (val_set.empty()) throw InputError("validation split is empty");
  return train(std::move(model), train_set, dataset_validator(val_set), cfg, observer);
}

/// epoch,train_loss,val_loss,val_accuracy,seconds. Without wall time the
/// seconds column is written as 0 so the file is reproducible byte-for-byte.
inline std::string training_log_csv(const TrainingLog& log, bool wall_time) {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss,val_accuracy,seconds\n";
  char buf[256];
  for (const auto& e : log.epochs) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.3f\n", e.epoch, e.train_loss, e.val_loss, e.val_accuracy,
                  wall_time ? e.seconds : 0.0);
    os << buf;
  }
  return os.str();
}

inline void write_training_log(const std::string& path, const TrainingLog& log, bool wall_time) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path);
  out << training_log_csv(log, wall_time);
}

}  // namespace cmt
