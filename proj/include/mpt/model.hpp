#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mpt/errors.hpp"
#include "mpt/ops.hpp"
#include "mpt/rng.hpp"
#include "mpt/tensor.hpp"

// Llama-style decoder-only backbone: pre-norm RMSNorm, rotary positions,
// SwiGLU feed-forward. The output head is an inner product against a
// caller-supplied representation frame; there is no vocabulary table.

namespace mpt {

struct ModelConfig {
  std::size_t num_layers = 4;
  std::size_t hidden = 256;
  std::size_t heads = 2;
  std::size_t max_seq_len = 1024;
  std::size_t ffn_hidden = 0;  // 0 → default_ffn(hidden)
  double rope_base = 10000.0;
  double attn_dropout = 0.0;
  double norm_eps = 1e-5;
  bool attn_bias = true;  // additive biases on the q/k/v projections

  /// 4d·2/3 rounded to the nearest multiple of 8.
  static std::size_t default_ffn(std::size_t d) {
    const double raw = 4.0 * static_cast<double>(d) * 2.0 / 3.0;
    const auto units = static_cast<std::size_t>(std::lround(raw / 8.0));
    return std::max<std::size_t>(8, units * 8);
  }

  std::size_t ffn() const { return ffn_hidden ? ffn_hidden : default_ffn(hidden); }
  std::size_t head_dim() const { return hidden / heads; }

  void validate() const {
    if (num_layers == 0) throw ConfigError("num_layers must be >= 1");
    if (hidden == 0 || heads == 0) throw ConfigError("hidden and heads must be positive");
    if (hidden % heads != 0)
      throw ConfigError("hidden " + std::to_string(hidden) + " not divisible by heads " +
                        std::to_string(heads));
    if (head_dim() % 2 != 0) throw ConfigError("head_dim must be even for rotary pairing");
    if (max_seq_len < 2) throw ConfigError("max_seq_len must be >= 2");
    if (!(attn_dropout >= 0.0 && attn_dropout < 1.0)) throw ConfigError("attn_dropout must be in [0, 1)");
    if (!(norm_eps >= 0.0)) throw ConfigError("norm_eps must be >= 0");
    if (!(rope_base > 0.0)) throw ConfigError("rope_base must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct LayerWeights {
  Tensor<T> wq, wk, wv, wo;         // d×d
  Tensor<T> bq, bk, bv;             // d (present when attn_bias)
  Tensor<T> w_gate, w_up;           // d×ffn
  Tensor<T> w_down;                 // ffn×d
  Tensor<T> attn_norm, ffn_norm;    // d
};

template <typename T>
struct TransformerWeights {
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_norm;

  /// Every tensor under its checkpoint name, in a fixed order.
  std::vector<std::pair<std::string, Tensor<T>>> named() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      const std::string p = "layer" + std::to_string(i) + ".";
      out.emplace_back(p + "wq", l.wq);
      out.emplace_back(p + "wk", l.wk);
      out.emplace_back(p + "wv", l.wv);
      out.emplace_back(p + "wo", l.wo);
      if (l.bq.defined()) {
        out.emplace_back(p + "bq", l.bq);
        out.emplace_back(p + "bk", l.bk);
        out.emplace_back(p + "bv", l.bv);
      }
      out.emplace_back(p + "w_gate", l.w_gate);
      out.emplace_back(p + "w_up", l.w_up);
      out.emplace_back(p + "w_down", l.w_down);
      out.emplace_back(p + "attn_norm", l.attn_norm);
      out.emplace_back(p + "ffn_norm", l.ffn_norm);
    }
    out.emplace_back("final_norm", final_norm);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named()) n += t.numel();
    return n;
  }

  void set_trainable(bool on) {
    for (auto& [name, t] : named()) {
      auto h = t;
      h.set_requires_grad(on);
    }
  }

  TransformerWeights clone() const {
    TransformerWeights c;
    auto cp = [](const Tensor<T>& t) { return t.defined() ? t.clone() : Tensor<T>(); };
    for (const auto& l : layers)
      c.layers.push_back({cp(l.wq), cp(l.wk), cp(l.wv), cp(l.wo), cp(l.bq), cp(l.bk), cp(l.bv),
                          cp(l.w_gate), cp(l.w_up), cp(l.w_down), cp(l.attn_norm), cp(l.ffn_norm)});
    c.final_norm = cp(final_norm);
    return c;
  }

  template <typename U>
  TransformerWeights<U> cast() const {
    TransformerWeights<U> c;
    auto cp = [](const Tensor<T>& t) { return t.defined() ? t.template cast<U>() : Tensor<U>(); };
    for (const auto& l : layers)
      c.layers.push_back({cp(l.wq), cp(l.wk), cp(l.wv), cp(l.wo), cp(l.bq), cp(l.bk), cp(l.bv),
                          cp(l.w_gate), cp(l.w_up), cp(l.w_down), cp(l.attn_norm), cp(l.ffn_norm)});
    c.final_norm = cp(final_norm);
    return c;
  }
};

/// Linear weights ~ N(0, 0.02²) truncated at ±2σ, norm gains 1, biases 0.
/// Draws come from stream (kInit, 0) of `seed` in named() order.
template <typename T>
TransformerWeights<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  auto rng = make_stream(seed, Stream::kInit, 0);
  const std::size_t d = cfg.hidden, f = cfg.ffn();
  auto normal = [&rng](Shape shape) {
    const auto n = shape_numel(shape);
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.truncated_normal(0.02));
    return Tensor<T>(std::move(shape), std::move(v), true);
  };
  auto ones = [](std::size_t n) { return Tensor<T>::full({n}, T(1), true); };
  auto zeros = [](std::size_t n) { return Tensor<T>::zeros({n}, true); };
  TransformerWeights<T> w;
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    LayerWeights<T> l;
    l.wq = normal({d, d});
    l.wk = normal({d, d});
    l.wv = normal({d, d});
    l.wo = normal({d, d});
    if (cfg.attn_bias) {
      l.bq = zeros(d);
      l.bk = zeros(d);
      l.bv = zeros(d);
    }
    l.w_gate = normal({d, f});
    l.w_up = normal({d, f});
    l.w_down = normal({f, d});
    l.attn_norm = ones(d);
    l.ffn_norm = ones(d);
    w.layers.push_back(std::move(l));
  }
  w.final_norm = ones(d);
  for (auto& [name, t] : w.named()) {
    auto h = t;
    h.set_name(name);
  }
  return w;
}

/// Low-rank update for one projection: W x + scaling · B(A x).
template <typename T>
struct LoraPair {
  Tensor<T> a;  // r×d
  Tensor<T> b;  // d×r
};

struct LoraConfig {
  std::size_t rank = 16;
  double alpha = 16.0;
  double dropout = 0.1;

  double scaling() const { return alpha / static_cast<double>(rank); }
  friend bool operator==(const LoraConfig&, const LoraConfig&) = default;
};

/// LoRA adapters on the four attention projections of every layer.
template <typename T>
struct LoRAWeights {
  LoraConfig cfg;
  std::vector<std::array<LoraPair<T>, 4>> layers;  // q, k, v, o

  static constexpr std::array<const char*, 4> kProjNames{"q", "k", "v", "o"};

  std::vector<std::pair<std::string, Tensor<T>>> named() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t i = 0; i < layers.size(); ++i)
      for (std::size_t p = 0; p < 4; ++p) {
        const std::string base = "lora.layer" + std::to_string(i) + "." + kProjNames[p];
        out.emplace_back(base + ".A", layers[i][p].a);
        out.emplace_back(base + ".B", layers[i][p].b);
      }
    return out;
  }
};

/// A ~ U(−1/√d, 1/√d) from stream (kLoraInit, 0); B = 0 so the adapted
/// model starts out identical to the base model.
template <typename T>
LoRAWeights<T> init_lora(const ModelConfig& model, const LoraConfig& cfg, std::uint64_t seed) {
  if (cfg.rank == 0 || cfg.rank > model.hidden)
    throw ConfigError("LoRA rank must be in [1, hidden], got " + std::to_string(cfg.rank));
  if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0)) throw ConfigError("LoRA dropout must be in [0, 1)");
  auto rng = make_stream(seed, Stream::kLoraInit, 0);
  const std::size_t d = model.hidden, r = cfg.rank;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  LoRAWeights<T> lora{cfg, {}};
  for (std::size_t i = 0; i < model.num_layers; ++i) {
    std::array<LoraPair<T>, 4> projs;
    for (auto& p : projs) {
      std::vector<T> a(r * d);
      for (auto& x : a) x = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
      p.a = Tensor<T>({r, d}, std::move(a), true);
      p.b = Tensor<T>::zeros({d, r}, true);
    }
    lora.layers.push_back(std::move(projs));
  }
  return lora;
}

template <typename T>
struct ForwardOptions {
  bool causal = true;
  bool use_rope = true;
  double attn_dropout = 0.0;
  Xoshiro256pp* dropout_rng = nullptr;  // required when attn_dropout > 0
  const LoRAWeights<T>* lora = nullptr;
  Xoshiro256pp* lora_dropout_rng = nullptr;  // LoRA input dropout when set
  std::vector<Tensor<T>>* attention_maps = nullptr;  // per layer, [B·H×T×T]
};

namespace detail {

template <typename T>
Tensor<T> project(Tape<T>& tape, const Tensor<T>& h, const Tensor<T>& w, const Tensor<T>& bias,
                  const LoraPair<T>* lora, const LoraConfig* lcfg, Xoshiro256pp* lora_rng) {
  auto y = linear(tape, h, w);
  if (bias.defined()) y = add_bias(tape, y, bias);
  if (lora) {
    auto z = h;
    if (lora_rng && lcfg->dropout > 0.0) z = dropout(tape, z, lcfg->dropout, *lora_rng);
    z = linear(tape, z, lora->a, true);
    z = linear(tape, z, lora->b, true);
    z = scale(tape, z, static_cast<T>(lcfg->scaling()));
    y = add(tape, y, z);
  }
  return y;
}

}  // namespace detail

/// Backbone forward pass: inputs [B×T×d] → hidden [B×T×d].
template <typename T>
Tensor<T> forward(Tape<T>& tape, const TransformerWeights<T>& w, const ModelConfig& cfg,
                  const Tensor<T>& inputs, const ForwardOptions<T>& opt = {}) {
  if (inputs.rank() != 3 || inputs.dim(2) != cfg.hidden)
    throw DimensionError("forward: expected [B×T×" + std::to_string(cfg.hidden) + "], got " +
                         shape_str(inputs.shape()));
  const std::size_t batch = inputs.dim(0), len = inputs.dim(1), d = cfg.hidden;
  if (len > cfg.max_seq_len)
    throw LengthError("sequence length " + std::to_string(len) + " exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  if (w.layers.size() != cfg.num_layers) throw DimensionError("weights do not match num_layers");
  if (opt.lora && opt.lora->layers.size() != cfg.num_layers)
    throw DimensionError("LoRA weights do not match num_layers");
  const T eps = static_cast<T>(cfg.norm_eps);
  const T attn_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.head_dim())));
  const LoraConfig* lcfg = opt.lora ? &opt.lora->cfg : nullptr;

  auto x = reshape(tape, inputs, {batch * len, d});
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    const auto& l = w.layers[i];
    const auto* lp = opt.lora ? opt.lora->layers[i].data() : nullptr;
    auto h = rmsnorm(tape, x, l.attn_norm, eps);
    auto q = detail::project(tape, h, l.wq, l.bq, lp ? lp + 0 : nullptr, lcfg, opt.lora_dropout_rng);
    auto k = detail::project(tape, h, l.wk, l.bk, lp ? lp + 1 : nullptr, lcfg, opt.lora_dropout_rng);
    auto v = detail::project(tape, h, l.wv, l.bv, lp ? lp + 2 : nullptr, lcfg, opt.lora_dropout_rng);
    q = split_heads(tape, q, batch, len, cfg.heads);
    k = split_heads(tape, k, batch, len, cfg.heads);
    v = split_heads(tape, v, batch, len, cfg.heads);
    if (opt.use_rope) {
      q = rope(tape, q, cfg.rope_base);
      k = rope(tape, k, cfg.rope_base);
    }
    auto scores = scale(tape, batched_matmul(tape, q, k, true), attn_scale);
    auto probs = softmax_rows(tape, scores, opt.causal);
    if (opt.attention_maps) opt.attention_maps->push_back(probs.clone());
    if (opt.attn_dropout > 0.0) {
      if (!opt.dropout_rng) throw ContractError("attention dropout requested without an rng");
      probs = dropout(tape, probs, opt.attn_dropout, *opt.dropout_rng);
    }
    auto ctx = merge_heads(tape, batched_matmul(tape, probs, v), batch, cfg.heads);
    auto attn_out = detail::project(tape, ctx, l.wo, Tensor<T>(), lp ? lp + 3 : nullptr, lcfg,
                                    opt.lora_dropout_rng);
    x = add(tape, x, attn_out);

    auto h2 = rmsnorm(tape, x, l.ffn_norm, eps);
    auto gate = silu(tape, linear(tape, h2, l.w_gate));
    auto up = linear(tape, h2, l.w_up);
    x = add(tape, x, linear(tape, mul(tape, gate, up), l.w_down));
  }
  x = rmsnorm(tape, x, w.final_norm, eps);
  return reshape(tape, x, {batch, len, d});
}

/// Next-state logits: hidden[B×T×d] against frames reps[B×S×d], divided by
/// √d so that a unit-RMS hidden state scores a unit-norm representation on
/// the cosine scale.
template <typename T>
Tensor<T> nsp_logits(Tape<T>& tape, const Tensor<T>& hidden, const Tensor<T>& reps) {
  if (hidden.rank() != 3 || reps.rank() != 3 || hidden.dim(0) != reps.dim(0) ||
      hidden.dim(2) != reps.dim(2))
    throw DimensionError("nsp_logits: hidden " + shape_str(hidden.shape()) + " vs reps " +
                         shape_str(reps.shape()));
  const T s = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hidden.dim(2))));
  return scale(tape, batched_matmul(tape, hidden, reps, true), s);
}

}  // namespace mpt
