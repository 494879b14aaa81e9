#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

#include "mpt/adamw.hpp"
#include "mpt/bayes.hpp"
#include "mpt/markov.hpp"
#include "mpt/model.hpp"
#include "mpt/ops.hpp"
#include "mpt/tensor.hpp"

// Next-state-prediction pre-training on freshly sampled Markov chains.

namespace mpt {

struct PretrainConfig {
  std::size_t num_states = 30;
  double alpha = 0.05;
  std::size_t seq_len = 1024;
  std::size_t batch_size = 32;
  std::uint64_t total_tokens = 10'000'000;
  double lr = 3e-4;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  std::size_t eval_every = 100;
  std::size_t eval_batches = 4;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  std::uint64_t tokens_per_step() const {
    return static_cast<std::uint64_t>(batch_size) * (seq_len - 1);
  }
  std::uint64_t steps() const { return total_tokens / tokens_per_step(); }

  void validate(const ModelConfig& model) const {
    model.validate();
    if (num_states == 0) throw ConfigError("num_states must be >= 1");
    if (num_states > model.hidden)
      throw ConfigError("num_states " + std::to_string(num_states) + " exceeds hidden " +
                        std::to_string(model.hidden) + " (orthonormal frame infeasible)");
    if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
    if (seq_len < 2) throw ConfigError("seq_len must be >= 2");
    if (seq_len > model.max_seq_len) throw ConfigError("seq_len exceeds model max_seq_len");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (eval_every == 0) throw ConfigError("eval_every must be >= 1");
    if (eval_batches == 0) throw ConfigError("eval_batches must be >= 1");
  }

  markov::DirichletPrior prior() const { return markov::DirichletPrior::symmetric(num_states, alpha); }
};

/// B trajectories, each with its own transition matrix and frame.
template <typename T>
struct NspBatch {
  Tensor<T> inputs;                         // B×T×d, row (b,t) = frame_b[s_t]
  Tensor<T> reps;                           // B×S×d
  std::vector<int> targets;                 // B×(T−1), targets[b,t] = s_{t+1}
  std::vector<markov::Trajectory> trajectories;

  std::size_t batch() const { return trajectories.size(); }
  std::size_t length() const { return inputs.dim(1); }
};

/// Trajectory g of the batch stream draws its matrix and states from
/// (traj_stream, g) and its frame from (frame_stream, g).
template <typename T>
NspBatch<T> sample_batch(const PretrainConfig& cfg, std::size_t hidden, std::uint64_t first_index,
                         Stream traj_stream = Stream::kTrajectory,
                         Stream frame_stream = Stream::kFrame) {
  if (cfg.num_states > hidden)
    throw ConfigError("num_states " + std::to_string(cfg.num_states) + " exceeds hidden " +
                      std::to_string(hidden));
  const std::size_t B = cfg.batch_size, L = cfg.seq_len, S = cfg.num_states, d = hidden;
  const auto prior = cfg.prior();
  NspBatch<T> batch;
  std::vector<T> inputs(B * L * d), reps(B * S * d);
  batch.targets.reserve(B * (L - 1));
  for (std::size_t b = 0; b < B; ++b) {
    const std::uint64_t g = first_index + b;
    auto trng = make_stream(cfg.seed, traj_stream, g);
    const auto p = markov::sample_transition_matrix(prior, trng, g);
    auto traj = markov::sample_trajectory(p, L, trng);
    auto frng = make_stream(cfg.seed, frame_stream, g);
    const auto frame = markov::sample_orthonormal_reps(S, d, frng);
    for (std::size_t i = 0; i < S * d; ++i) reps[b * S * d + i] = static_cast<T>(frame.vectors[i]);
    for (std::size_t t = 0; t < L; ++t) {
      const auto row = frame.row(static_cast<std::size_t>(traj.states[t]));
      for (std::size_t k = 0; k < d; ++k) inputs[(b * L + t) * d + k] = static_cast<T>(row[k]);
      if (t + 1 < L) batch.targets.push_back(traj.states[t + 1]);
    }
    batch.trajectories.push_back(std::move(traj));
  }
  batch.inputs = Tensor<T>({B, L, d}, std::move(inputs));
  batch.reps = Tensor<T>({B, S, d}, std::move(reps));
  return batch;
}

/// Targets laid out per position (B×T) with the final position ignored.
template <typename T>
std::vector<int> padded_targets(const NspBatch<T>& batch) {
  const std::size_t B = batch.batch(), L = batch.length();
  std::vector<int> out(B * L, kIgnoreTarget);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t + 1 < L; ++t) out[b * L + t] = batch.targets[b * (L - 1) + t];
  return out;
}

/// Mean next-state cross-entropy over all B·(T−1) supervised positions.
template <typename T>
Tensor<T> nsp_loss(Tape<T>& tape, const TransformerWeights<T>& w, const ModelConfig& cfg,
                   const NspBatch<T>& batch, const ForwardOptions<T>& opt = {}) {
  auto hidden = forward(tape, w, cfg, batch.inputs, opt);
  auto logits = nsp_logits(tape, hidden, batch.reps);
  return cross_entropy(tape, logits, padded_targets(batch));
}

struct TrainRecord {
  long step = 0;
  std::uint64_t tokens = 0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double eval_stderr = 0.0;
  double bayes_limit = 0.0;
  double bayes_stderr = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<TrainRecord> records;
};

struct NspEvaluation {
  markov::MeanWithError loss;   // model, per trajectory
  markov::MeanWithError bayes;  // Bayes estimator on the same trajectories
  markov::MeanWithError gap;    // paired model − Bayes
};

/// Maps a batch to logits [B×T×S]; lets stub predictors share the evaluator.
template <typename T>
using NspPredictor = std::function<Tensor<T>(const NspBatch<T>&)>;

template <typename T>
NspPredictor<T> model_predictor(const TransformerWeights<T>& w, const ModelConfig& cfg) {
  return [&w, &cfg](const NspBatch<T>& batch) {
    Tape<T> tape;
    tape.set_recording(false);
    auto hidden = forward(tape, w, cfg, batch.inputs);
    return nsp_logits(tape, hidden, batch.reps);
  };
}

/// Mean cross-entropy per trajectory from logits [B×T×S], in double.
template <typename T>
std::vector<double> per_trajectory_nsp_loss(const Tensor<T>& logits, const NspBatch<T>& batch) {
  const std::size_t B = batch.batch(), L = batch.length(), S = logits.dim(2);
  std::vector<double> out(B, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    double acc = 0.0;
    for (std::size_t t = 0; t + 1 < L; ++t) {
      const T* row = logits.data() + (b * L + t) * S;
      double mx = static_cast<double>(row[0]);
      for (std::size_t j = 1; j < S; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      double z = 0.0;
      for (std::size_t j = 0; j < S; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
      const int target = batch.targets[b * (L - 1) + t];
      acc += std::log(z) + mx - static_cast<double>(row[target]);
    }
    out[b] = acc / static_cast<double>(L - 1);
  }
  return out;
}

/// Held-out NSP loss on `num_batches` fresh batches drawn from the eval
/// streams starting at trajectory index `offset`, with the Bayes estimator
/// scored on the very same trajectories. Batches run on up to `threads`
/// workers; results are combined in batch order.
template <typename T>
NspEvaluation evaluate_nsp(const NspPredictor<T>& predict, const PretrainConfig& cfg,
                           std::size_t hidden, std::size_t num_batches, std::uint64_t offset = 0,
                           std::size_t threads = 1) {
  const auto prior = cfg.prior();
  std::vector<std::vector<double>> model_loss(num_batches), bayes_loss(num_batches);
  auto run = [&](std::size_t i) {
    const auto batch = sample_batch<T>(cfg, hidden, offset + i * cfg.batch_size,
                                       Stream::kEvalTrajectory, Stream::kEvalFrame);
    const auto logits = predict(batch);
    if (logits.rank() != 3 || logits.dim(2) != cfg.num_states)
      throw DimensionError("predictor returned " + shape_str(logits.shape()));
    model_loss[i] = per_trajectory_nsp_loss(logits, batch);
    for (const auto& traj : batch.trajectories)
      bayes_loss[i].push_back(markov::bayes_trajectory_loss(traj, prior));
  };
  threads = std::max<std::size_t>(1, std::min(threads, num_batches));
  if (threads == 1) {
    for (std::size_t i = 0; i < num_batches; ++i) run(i);
  } else {
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w)
      pool.emplace_back([&, w]() {
        try {
          for (std::size_t i = w; i < num_batches; i += threads) run(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  std::vector<double> m, b, g;
  for (std::size_t i = 0; i < num_batches; ++i)
    for (std::size_t k = 0; k < model_loss[i].size(); ++k) {
      m.push_back(model_loss[i][k]);
      b.push_back(bayes_loss[i][k]);
      g.push_back(model_loss[i][k] - bayes_loss[i][k]);
    }
  return {markov::mean_and_stderr(m), markov::mean_and_stderr(b), markov::mean_and_stderr(g)};
}

template <typename T>
NspEvaluation evaluate_nsp(const TransformerWeights<T>& w, const ModelConfig& model,
                           const PretrainConfig& cfg, std::size_t num_batches,
                           std::uint64_t offset = 0, std::size_t threads = 1) {
  if (cfg.num_states > model.hidden) throw DimensionError("checkpoint hidden smaller than num_states");
  return evaluate_nsp<T>(model_predictor(w, model), cfg, model.hidden, num_batches, offset, threads);
}

/// Parameters handed to the optimizer. Norm gains and biases are exempt
/// from weight decay.
template <typename T>
std::vector<Param<T>> backbone_params(const TransformerWeights<T>& w) {
  std::vector<Param<T>> out;
  for (auto& [name, t] : w.named()) out.push_back({name, t, t.rank() == 2});
  return out;
}

struct PretrainHooks {
  /// Called with (weights, step) after every evaluation and at the end.
  std::function<void(const TransformerWeights<float>&, long)> checkpoint;
  /// Called after each evaluation record is appended.
  std::function<void(const TrainRecord&)> on_eval;
};

struct PretrainResult {
  TransformerWeights<float> weights;
  TrainReport report;
  long steps = 0;
};

/// Fixed-lr AdamW with global-norm clipping. Step s trains on trajectories
/// [s·B, (s+1)·B) of the training streams; evaluation round r uses eval
/// trajectories starting at r·eval_batches·B.
inline PretrainResult pretrain_run(const ModelConfig& model, const PretrainConfig& cfg,
                                   const PretrainHooks& hooks = {}) {
  cfg.validate(model);
  PretrainResult result{init_model<float>(model, cfg.seed), {}, 0};
  auto params = backbone_params(result.weights);
  AdamW<float> opt(params, {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  const long total_steps = static_cast<long>(cfg.steps());
  const auto start = std::chrono::steady_clock::now();
  double interval_loss = 0.0;
  long interval_steps = 0;
  long eval_round = 0;

  auto evaluate = [&](long step) {
    const auto ev = evaluate_nsp(result.weights, model, cfg, cfg.eval_batches,
                                 static_cast<std::uint64_t>(eval_round) * cfg.eval_batches * cfg.batch_size,
                                 cfg.threads);
    ++eval_round;
    TrainRecord rec;
    rec.step = step;
    rec.tokens = static_cast<std::uint64_t>(step) * cfg.tokens_per_step();
    rec.train_loss = interval_steps ? interval_loss / static_cast<double>(interval_steps) : ev.loss.mean;
    rec.eval_loss = ev.loss.mean;
    rec.eval_stderr = ev.loss.stderr_;
    rec.bayes_limit = ev.bayes.mean;
    rec.bayes_stderr = ev.bayes.stderr_;
    rec.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.report.records.push_back(rec);
    interval_loss = 0.0;
    interval_steps = 0;
    if (hooks.on_eval) hooks.on_eval(rec);
    if (hooks.checkpoint) hooks.checkpoint(result.weights, step);
  };

  for (long step = 0; step < total_steps; ++step) {
    const auto batch = sample_batch<float>(cfg, model.hidden,
                                           static_cast<std::uint64_t>(step) * cfg.batch_size);
    Tape<float> tape;
    auto loss = nsp_loss(tape, result.weights, model, batch);
    if (!std::isfinite(loss.item()))
      throw DivergenceError("non-finite training loss at step " + std::to_string(step));
    opt.zero_grad();
    tape.backward(loss);
    tape.clear();
    clip_grad_norm(params, cfg.grad_clip);
    opt.step();
    interval_loss += loss.item();
    ++interval_steps;
    result.steps = step + 1;
    if ((step + 1) % static_cast<long>(cfg.eval_every) == 0 && step + 1 < total_steps)
      evaluate(step + 1);
  }
  if (total_steps > 0) evaluate(total_steps);
  else if (hooks.checkpoint) hooks.checkpoint(result.weights, 0);
  opt.zero_grad();
  return result;
}

}  // namespace mpt
