#pragma once

#include <functional>
#include <span>
#include <thread>
#include <vector>

#include "mpt/model.hpp"
#include "mpt/rec/adaptor.hpp"
#include "mpt/rec/dataset.hpp"
#include "mpt/rec/metrics.hpp"
#include "mpt/rec/synth.hpp"

namespace mpt::rec {

struct CutoffMetrics {
  std::size_t n = 0;
  double hr = 0.0;
  double ndcg = 0.0;
};

struct ModeMetrics {
  ShuffleMode mode = ShuffleMode::kChronological;
  std::vector<CutoffMetrics> cutoffs;
  std::size_t users = 0;

  const CutoffMetrics& at(std::size_t n) const {
    for (const auto& c : cutoffs)
      if (c.n == n) return c;
    throw ContractError("cutoff " + std::to_string(n) + " was not evaluated");
  }
};

struct RecEvalReport {
  std::vector<ModeMetrics> modes;
  std::uint64_t seed = 0;

  const ModeMetrics& mode(ShuffleMode m) const {
    for (const auto& r : modes)
      if (r.mode == m) return r;
    throw ContractError("mode was not evaluated");
  }
};

enum class EvalTarget { kValid, kTest };

/// Scores every item for each context of a batch; returns row-major
/// [contexts × num_items]. `users[i]` is the split entry behind context i.
using BatchScorer = std::function<std::vector<float>(const std::vector<std::vector<int>>& contexts,
                                                     const std::vector<const UserSplit*>& users)>;

inline std::vector<int> truncate_recent(std::span<const int> seq, std::size_t max_len) {
  const std::size_t start = seq.size() > max_len ? seq.size() - max_len : 0;
  return {seq.begin() + static_cast<std::ptrdiff_t>(start), seq.end()};
}

struct RankingOptions {
  std::vector<ShuffleMode> modes{ShuffleMode::kChronological};
  std::vector<std::size_t> cutoffs{1, 10, 20};
  std::uint64_t seed = 0;
  EvalTarget target = EvalTarget::kTest;
  std::size_t max_len = 50;
  std::size_t batch_size = 64;
  std::size_t threads = 1;
};

/// Per user: context truncated to its most recent max_len items, shuffled
/// per mode with stream (kShuffle, 3·user + mode), scored over all items,
/// ranked; HR/NDCG averaged over users. Chronological contexts are never
/// passed through the shuffler.
inline RecEvalReport evaluate_ranking(const LeaveOneOutSplit& split, std::size_t num_items,
                                      const BatchScorer& scorer, const RankingOptions& opt) {
  for (auto n : opt.cutoffs)
    if (n == 0) throw ConfigError("cutoffs must be >= 1");
  RecEvalReport report;
  report.seed = opt.seed;
  const std::size_t num_users = split.users.size();
  const std::size_t bs = std::max<std::size_t>(1, opt.batch_size);
  const std::size_t num_batches = (num_users + bs - 1) / bs;
  for (const auto mode : opt.modes) {
    std::vector<std::size_t> ranks(num_users, 0);
    auto run_batch = [&](std::size_t b) {
      std::vector<std::vector<int>> contexts;
      std::vector<const UserSplit*> users;
      for (std::size_t i = b * bs; i < std::min(num_users, (b + 1) * bs); ++i) {
        const auto& u = split.users[i];
        const auto ctx = opt.target == EvalTarget::kTest ? u.test_context : u.valid_context;
        auto recent = truncate_recent(ctx, opt.max_len);
        if (mode != ShuffleMode::kChronological) {
          auto rng = make_stream(opt.seed, Stream::kShuffle,
                                 3 * static_cast<std::uint64_t>(u.user) + static_cast<std::uint64_t>(mode));
          recent = shuffle_sequence(recent, mode, rng);
        }
        contexts.push_back(std::move(recent));
        users.push_back(&u);
      }
      const auto scores = scorer(contexts, users);
      if (scores.size() != contexts.size() * num_items)
        throw DimensionError("scorer returned " + std::to_string(scores.size()) + " scores");
      for (std::size_t k = 0; k < contexts.size(); ++k) {
        const auto& u = *users[k];
        const int target = opt.target == EvalTarget::kTest ? u.test_target : u.valid_target;
        ranks[b * bs + k] = rank_of_target(std::span<const float>(scores).subspan(k * num_items, num_items),
                                           static_cast<std::size_t>(target));
      }
    };
    const std::size_t threads = std::max<std::size_t>(1, std::min(opt.threads, num_batches));
    if (threads == 1) {
      for (std::size_t b = 0; b < num_batches; ++b) run_batch(b);
    } else {
      std::vector<std::exception_ptr> errors(threads);
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < threads; ++w)
        pool.emplace_back([&, w]() {
          try {
            for (std::size_t b = w; b < num_batches; b += threads) run_batch(b);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      for (auto& th : pool) th.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }
    ModeMetrics mm{mode, {}, num_users};
    for (auto n : opt.cutoffs) {
      CutoffMetrics c{n, 0.0, 0.0};
      for (auto r : ranks) {
        c.hr += hr_at(r, n);
        c.ndcg += ndcg_at(r, n);
      }
      if (num_users) {
        c.hr /= static_cast<double>(num_users);
        c.ndcg /= static_cast<double>(num_users);
      }
      mm.cutoffs.push_back(c);
    }
    report.modes.push_back(std::move(mm));
  }
  return report;
}

/// Raw item embeddings as a constant tensor [num_items × d_text].
inline Tensor<float> item_tensor(const InteractionDataset& ds) {
  return Tensor<float>({ds.num_items, ds.embedding_dim}, ds.embeddings);
}

/// Adapted item representations [num_items × d].
inline Tensor<float> item_representations(const AdaptorWeights<float>& adaptor, const Tensor<float>& items) {
  Tape<float> tape;
  tape.set_recording(false);
  return adaptor_forward(tape, adaptor, items);
}

/// Right-pads contexts into one batch; returns inputs [B×L×d] and each
/// context's last position.
inline std::pair<Tensor<float>, std::vector<std::size_t>> pack_contexts(
    const std::vector<std::vector<int>>& contexts, const Tensor<float>& reprs) {
  const std::size_t d = reprs.dim(1);
  std::size_t len = 1;
  for (const auto& c : contexts) len = std::max(len, c.size());
  std::vector<float> inputs(contexts.size() * len * d, 0.0f);
  std::vector<std::size_t> last(contexts.size(), 0);
  for (std::size_t b = 0; b < contexts.size(); ++b) {
    if (contexts[b].empty()) throw ContractError("empty context");
    for (std::size_t t = 0; t < contexts[b].size(); ++t)
      std::copy_n(reprs.data() + static_cast<std::size_t>(contexts[b][t]) * d, d,
                  inputs.data() + (b * len + t) * d);
    last[b] = contexts[b].size() - 1;
  }
  return {Tensor<float>({contexts.size(), len, d}, std::move(inputs)), std::move(last)};
}

/// Cosine/temperature scores from the fine-tuned model. Item
/// representations are computed once and shared by all batches.
inline BatchScorer model_scorer(const TransformerWeights<float>& backbone, const ModelConfig& cfg,
                                const AdaptorWeights<float>& adaptor, const LoRAWeights<float>* lora,
                                const Tensor<float>& items, double tau) {
  if (adaptor.output_dim() != cfg.hidden)
    throw DimensionError("adaptor output " + std::to_string(adaptor.output_dim()) +
                         " differs from backbone hidden " + std::to_string(cfg.hidden));
  auto reprs = item_representations(adaptor, items);
  Tape<float> tape;
  tape.set_recording(false);
  auto normed = l2_normalize_rows(tape, reprs);
  return [&backbone, &cfg, lora, reprs, normed, tau](const std::vector<std::vector<int>>& contexts,
                                                     const std::vector<const UserSplit*>&) {
    Tape<float> t;
    t.set_recording(false);
    auto [inputs, last] = pack_contexts(contexts, reprs);
    ForwardOptions<float> opt;
    opt.lora = lora;
    auto hidden = forward(t, backbone, cfg, inputs, opt);
    const std::size_t d = cfg.hidden, len = inputs.dim(1);
    std::vector<float> rows(contexts.size() * d);
    for (std::size_t b = 0; b < contexts.size(); ++b)
      std::copy_n(hidden.data() + (b * len + last[b]) * d, d, rows.data() + b * d);
    auto h = l2_normalize_rows(t, Tensor<float>({contexts.size(), d}, std::move(rows)));
    auto scores = scale(t, linear(t, h, normed, true), static_cast<float>(1.0 / tau));
    return std::vector<float>(scores.values().begin(), scores.values().end());
  };
}

/// Training-split item frequencies (valid and test targets excluded).
inline std::vector<float> popularity_baseline(const LeaveOneOutSplit& split, std::size_t num_items) {
  std::vector<float> freq(num_items, 0.0f);
  for (const auto& u : split.users)
    for (int item : u.train) freq[static_cast<std::size_t>(item)] += 1.0f;
  return freq;
}

inline BatchScorer static_scorer(std::vector<float> scores) {
  return [scores = std::move(scores)](const std::vector<std::vector<int>>& contexts,
                                      const std::vector<const UserSplit*>&) {
    std::vector<float> out;
    out.reserve(contexts.size() * scores.size());
    for (std::size_t i = 0; i < contexts.size(); ++i) out.insert(out.end(), scores.begin(), scores.end());
    return out;
  };
}

/// Ground-truth ceiling: scores are the true transition row of the user's
/// chain at the last context item.
inline BatchScorer chain_oracle_scorer(const SynthGroundTruth& truth) {
  return [&truth](const std::vector<std::vector<int>>& contexts, const std::vector<const UserSplit*>& users) {
    std::vector<float> out;
    for (std::size_t i = 0; i < contexts.size(); ++i) {
      const auto& chain = truth.chains[static_cast<std::size_t>(truth.user_chain[users[i]->user])];
      for (double p : chain.row(static_cast<std::size_t>(contexts[i].back())))
        out.push_back(static_cast<float>(p));
    }
    return out;
  };
}

}  // namespace mpt::rec
