#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "mpt/adamw.hpp"
#include "mpt/model.hpp"
#include "mpt/rec/adaptor.hpp"
#include "mpt/rec/dataset.hpp"
#include "mpt/rec/evaluate.hpp"

namespace mpt::rec {

enum class FinetuneMode { kAdaptorOnly, kAdaptorPlusLora };

inline std::string_view to_string(FinetuneMode m) {
  return m == FinetuneMode::kAdaptorOnly ? "adaptor_only" : "adaptor_plus_lora";
}

inline FinetuneMode parse_finetune_mode(std::string_view s) {
  if (s == "adaptor_only") return FinetuneMode::kAdaptorOnly;
  if (s == "adaptor_plus_lora") return FinetuneMode::kAdaptorPlusLora;
  throw ConfigError("unknown fine-tuning mode '" + std::string(s) + "'");
}

struct FinetuneConfig {
  double lr = 1e-3;
  double weight_decay = 0.1;
  std::size_t max_len = 50;
  double dropout = 0.2;
  double temperature = 0.07;
  FinetuneMode mode = FinetuneMode::kAdaptorOnly;
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  std::size_t patience = 5;
  std::size_t adaptor_hidden = 0;  // 0 → backbone hidden
  LoraConfig lora;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  std::size_t hidden_units(const ModelConfig& m) const { return adaptor_hidden ? adaptor_hidden : m.hidden; }

  void validate(const ModelConfig& m) const {
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (max_len == 0 || max_len > m.max_seq_len)
      throw ConfigError("max_len must be in [1, max_seq_len=" + std::to_string(m.max_seq_len) + "]");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (patience == 0) throw ConfigError("patience must be positive");
    if (threads == 0) throw ConfigError("threads must be positive");
  }
};

/// Training sequences: each user's training view truncated to its most
/// recent max_len + 1 items (max_len inputs, each followed by its target).
/// Users with fewer than two training items contribute no transition.
inline std::vector<std::span<const int>> training_sequences(const LeaveOneOutSplit& split, std::size_t max_len) {
  std::vector<std::span<const int>> out;
  for (const auto& u : split.users) {
    if (u.train.size() < 2) continue;
    const std::size_t keep = std::min(u.train.size(), max_len + 1);
    out.push_back(u.train.subspan(u.train.size() - keep));
  }
  return out;
}

struct NipRandom {
  Xoshiro256pp* attn_dropout = nullptr;
  Xoshiro256pp* lora_dropout = nullptr;
};

/// Next-item loss: every position t of every sequence is scored against the
/// whole corpus by cos(hidden_t, adaptor(item))/τ and cross-entropy is taken
/// against item t+1; mean over supervised positions. Dropout is active only
/// when the corresponding rng is supplied.
template <typename T>
Tensor<T> nip_loss(Tape<T>& tape, const TransformerWeights<T>& backbone, const ModelConfig& mcfg,
                   const AdaptorWeights<T>& adaptor, const std::type_identity_t<LoRAWeights<T>>* lora,
                   const Tensor<T>& items,
                   std::span<const std::span<const int>> sequences, const FinetuneConfig& fcfg,
                   NipRandom rnd = {}) {
  if (sequences.empty()) throw ContractError("nip_loss: empty batch");
  const std::size_t batch = sequences.size();
  std::size_t len = 1;
  for (const auto& s : sequences) {
    if (s.size() < 2) throw ContractError("nip_loss: sequences need at least two items");
    len = std::max(len, s.size() - 1);
  }
  if (len > fcfg.max_len) throw LengthError("nip_loss: sequences must be truncated to max_len");
  std::vector<int> idx(batch * len, 0);
  std::vector<int> targets(batch * len, kIgnoreTarget);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t + 1 < sequences[b].size(); ++t) {
      idx[b * len + t] = sequences[b][t];
      targets[b * len + t] = sequences[b][t + 1];
    }
  auto reprs = adaptor_forward(tape, adaptor, items);
  if (reprs.dim(1) != mcfg.hidden)
    throw DimensionError("adaptor output " + std::to_string(reprs.dim(1)) + " differs from backbone hidden " +
                         std::to_string(mcfg.hidden));
  auto inputs = reshape(tape, gather_rows(tape, reprs, idx), {batch, len, mcfg.hidden});
  ForwardOptions<T> opt;
  opt.lora = lora;
  if (rnd.attn_dropout && fcfg.dropout > 0.0) {
    opt.attn_dropout = fcfg.dropout;
    opt.dropout_rng = rnd.attn_dropout;
  }
  opt.lora_dropout_rng = rnd.lora_dropout;
  auto hidden = forward(tape, backbone, mcfg, inputs, opt);
  auto h = l2_normalize_rows(tape, reshape(tape, hidden, {batch * len, mcfg.hidden}));
  auto r = l2_normalize_rows(tape, reprs);
  auto logits = scale(tape, linear(tape, h, r, true), static_cast<T>(1.0 / fcfg.temperature));
  return cross_entropy(tape, logits, targets);
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double valid_hr10 = 0.0;
  double valid_ndcg10 = 0.0;
};

struct FinetuneResult {
  AdaptorWeights<float> adaptor;
  std::optional<LoRAWeights<float>> lora;
  std::vector<EpochRecord> curve;
  std::size_t best_epoch = 0;  // 0: the initialization
  double best_valid_ndcg10 = 0.0;
  bool diverged = false;
  bool early_stopped = false;
};

/// Chronological validation NDCG@10/HR@10 for a set of weights.
inline CutoffMetrics validation_metrics(const TransformerWeights<float>& backbone, const ModelConfig& mcfg,
                                        const AdaptorWeights<float>& adaptor, const LoRAWeights<float>* lora,
                                        const Tensor<float>& items, const LeaveOneOutSplit& split,
                                        const FinetuneConfig& fcfg) {
  RankingOptions opt;
  opt.cutoffs = {10};
  opt.target = EvalTarget::kValid;
  opt.max_len = fcfg.max_len;
  opt.seed = fcfg.seed;
  opt.threads = fcfg.threads;
  const auto scorer = model_scorer(backbone, mcfg, adaptor, lora, items, fcfg.temperature);
  return evaluate_ranking(split, items.dim(0), scorer, opt).modes.front().cutoffs.front();
}

/// Epoch loop over the training views. The backbone is copied and frozen;
/// only the adaptor (and LoRA in adaptor_plus_lora mode) is updated. After
/// each epoch the chronological validation NDCG@10 is measured; the best
/// weights are kept and training stops after `patience` epochs without
/// improvement, or on a non-finite loss.
inline FinetuneResult finetune_run(const TransformerWeights<float>& backbone_in, const ModelConfig& mcfg,
                                   const InteractionDataset& ds, const FinetuneConfig& fcfg) {
  fcfg.validate(mcfg);
  ds.validate();
  auto backbone = backbone_in.clone();
  backbone.set_trainable(false);
  const auto split = leave_one_out_split(ds);
  const auto items = item_tensor(ds);
  const auto seqs = training_sequences(split, fcfg.max_len);

  FinetuneResult result;
  result.adaptor = init_adaptor<float>(ds.embedding_dim, mcfg.hidden, fcfg.hidden_units(mcfg), fcfg.seed);
  if (fcfg.mode == FinetuneMode::kAdaptorPlusLora) result.lora = init_lora<float>(mcfg, fcfg.lora, fcfg.seed);

  auto adaptor = result.adaptor.clone();
  std::optional<LoRAWeights<float>> lora;
  if (result.lora) {
    lora = LoRAWeights<float>{result.lora->cfg, {}};
    for (const auto& layer : result.lora->layers) {
      std::array<LoraPair<float>, 4> c;
      for (std::size_t p = 0; p < 4; ++p) c[p] = {layer[p].a.clone(), layer[p].b.clone()};
      lora->layers.push_back(c);
    }
  }
  auto snapshot = [&]() {
    result.adaptor = adaptor.clone();
    if (lora) {
      for (std::size_t i = 0; i < lora->layers.size(); ++i)
        for (std::size_t p = 0; p < 4; ++p)
          result.lora->layers[i][p] = {lora->layers[i][p].a.clone(), lora->layers[i][p].b.clone()};
    }
  };
  if (fcfg.epochs == 0) return result;

  std::vector<Param<float>> params;
  for (auto& [name, t] : adaptor.named()) params.push_back({name, t, t.rank() == 2});
  if (lora)
    for (auto& [name, t] : lora->named()) params.push_back({name, t, true});
  AdamW<float> opt(params, {fcfg.lr, 0.9, 0.999, 1e-8, fcfg.weight_decay});

  const auto* lora_ptr = lora ? &*lora : nullptr;
  result.best_valid_ndcg10 =
      validation_metrics(backbone, mcfg, adaptor, lora_ptr, items, split, fcfg).ndcg;
  auto attn_rng = make_stream(fcfg.seed, Stream::kDropout, 1);
  auto lora_rng = make_stream(fcfg.seed, Stream::kDropout, 2);
  std::size_t since_best = 0;
  std::vector<std::size_t> order(seqs.size());
  for (std::size_t epoch = 1; epoch <= fcfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    auto order_rng = make_stream(fcfg.seed, Stream::kEpochOrder, epoch);
    order_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += fcfg.batch_size) {
      std::vector<std::span<const int>> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + fcfg.batch_size); ++i)
        batch.push_back(seqs[order[i]]);
      Tape<float> tape;
      NipRandom rnd{&attn_rng, lora ? &lora_rng : nullptr};
      auto loss = nip_loss(tape, backbone, mcfg, adaptor, lora_ptr, items, batch, fcfg, rnd);
      if (!std::isfinite(loss.item())) {
        result.diverged = true;
        return result;
      }
      opt.zero_grad();
      tape.backward(loss);
      tape.clear();
      try {
        opt.step();
      } catch (const DivergenceError&) {
        result.diverged = true;
        return result;
      }
      loss_sum += loss.item();
      ++batches;
    }
    const auto vm = validation_metrics(backbone, mcfg, adaptor, lora_ptr, items, split, fcfg);
    result.curve.push_back({epoch, batches ? loss_sum / static_cast<double>(batches) : 0.0, vm.hr, vm.ndcg});
    if (vm.ndcg > result.best_valid_ndcg10) {
      result.best_valid_ndcg10 = vm.ndcg;
      result.best_epoch = epoch;
      since_best = 0;
      snapshot();
    } else if (++since_best >= fcfg.patience) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

/// Attention probabilities for one interaction sequence, [layers × heads × T × T].
inline Tensor<float> dump_attention(const TransformerWeights<float>& backbone, const ModelConfig& mcfg,
                                    const AdaptorWeights<float>& adaptor, const LoRAWeights<float>* lora,
                                    const Tensor<float>& items, std::span<const int> sequence,
                                    std::size_t max_len) {
  if (sequence.empty()) throw ContractError("dump_attention: empty sequence");
  if (sequence.size() > max_len)
    throw LengthError("sequence length " + std::to_string(sequence.size()) + " exceeds max_len " +
                      std::to_string(max_len));
  for (int v : sequence)
    if (v < 0 || static_cast<std::size_t>(v) >= items.dim(0))
      throw IndexError("item " + std::to_string(v) + " outside the corpus");
  const auto reprs = item_representations(adaptor, items);
  auto [inputs, last] = pack_contexts({std::vector<int>(sequence.begin(), sequence.end())}, reprs);
  std::vector<Tensor<float>> maps;
  ForwardOptions<float> opt;
  opt.lora = lora;
  opt.attention_maps = &maps;
  Tape<float> tape;
  tape.set_recording(false);
  forward(tape, backbone, mcfg, inputs, opt);
  const std::size_t n = sequence.size();
  std::vector<float> out;
  out.reserve(mcfg.num_layers * mcfg.heads * n * n);
  for (const auto& m : maps) out.insert(out.end(), m.values().begin(), m.values().end());
  return Tensor<float>({mcfg.num_layers, mcfg.heads, n, n}, std::move(out));
}

}  // namespace mpt::rec
