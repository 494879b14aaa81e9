#pragma once

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "mpt/io/checkpoint.hpp"
#include "mpt/model.hpp"
#include "mpt/pretrain.hpp"
#include "mpt/rec/finetune.hpp"
#include "mpt/rec/synth.hpp"

// Run configuration: a flat key → value map validated against a fixed
// schema. Layers merge as defaults ← preset ← config file ← flags.

namespace mpt::config {

using json = io::json;

enum class Kind { kUInt, kReal, kBool, kString, kUIntList, kRealList, kStringList };

struct Key {
  const char* name;
  Kind kind;
  json fallback;
  const char* help;
};

inline const std::vector<Key>& schema() {
  static const std::vector<Key> keys = {
      {"preset", Kind::kString, "paper", "paper | desk"},
      {"seed", Kind::kUInt, 0, "root seed"},
      {"threads", Kind::kUInt, 1, "worker threads for sampling and evaluation"},
      {"out_dir", Kind::kString, "out", "directory receiving every artifact"},
      // model
      {"num_layers", Kind::kUInt, 4, "transformer blocks"},
      {"hidden", Kind::kUInt, 256, "hidden width d"},
      {"heads", Kind::kUInt, 2, "attention heads"},
      {"max_seq_len", Kind::kUInt, 1024, "longest supported input"},
      {"ffn_hidden", Kind::kUInt, 0, "SwiGLU width (0: 4d*2/3 rounded to 8)"},
      {"rope_base", Kind::kReal, 10000.0, "rotary base"},
      {"norm_eps", Kind::kReal, 1e-5, "RMSNorm epsilon"},
      {"attn_bias", Kind::kBool, true, "biases on q/k/v projections"},
      // pre-training
      {"num_states", Kind::kUInt, 30, "Markov states |S|"},
      {"alpha", Kind::kReal, 0.05, "symmetric Dirichlet concentration"},
      {"seq_len", Kind::kUInt, 1024, "trajectory length T"},
      {"batch_size", Kind::kUInt, 32, "trajectories per step"},
      {"total_tokens", Kind::kUInt, 10'000'000, "supervised tokens to train on"},
      {"lr", Kind::kReal, 3e-4, "pre-training learning rate"},
      {"weight_decay", Kind::kReal, 0.1, "pre-training weight decay"},
      {"grad_clip", Kind::kReal, 1.0, "global gradient-norm clip"},
      {"eval_every", Kind::kUInt, 100, "steps between held-out evaluations"},
      {"eval_batches", Kind::kUInt, 4, "held-out batches per evaluation"},
      {"chains", Kind::kUInt, 2000, "Monte-Carlo chains for bayes-limit"},
      // fine-tuning
      {"checkpoint", Kind::kString, "", "model checkpoint to read"},
      {"sequences", Kind::kString, "", "interaction sequences file"},
      {"embeddings", Kind::kString, "", "item embeddings file (text or MPT1 container)"},
      {"truth", Kind::kString, "", "synthetic ground-truth container (oracle scorer)"},
      {"mode", Kind::kString, "adaptor_only", "adaptor_only | adaptor_plus_lora"},
      {"ft_lr", Kind::kReal, 1e-3, "fine-tuning learning rate"},
      {"ft_weight_decay", Kind::kReal, 0.1, "fine-tuning weight decay"},
      {"max_len", Kind::kUInt, 50, "most recent items kept per context"},
      {"dropout", Kind::kReal, 0.2, "attention dropout while fine-tuning"},
      {"temperature", Kind::kReal, 0.07, "cosine score temperature"},
      {"epochs", Kind::kUInt, 100, "fine-tuning epochs (early stopping usually ends sooner)"},
      {"ft_batch_size", Kind::kUInt, 16, "sequences per fine-tuning step"},
      {"patience", Kind::kUInt, 5, "epochs without validation gain before stopping"},
      {"adaptor_hidden", Kind::kUInt, 0, "adaptor MLP width (0: backbone hidden)"},
      {"lora_rank", Kind::kUInt, 16, "LoRA rank"},
      {"lora_alpha", Kind::kReal, 16.0, "LoRA alpha"},
      {"lora_dropout", Kind::kReal, 0.1, "LoRA input dropout"},
      // ranking evaluation
      {"modes", Kind::kStringList, json::array({"chronological"}), "shuffle modes to evaluate"},
      {"cutoffs", Kind::kUIntList, json::array({1, 10, 20}), "ranking cut-offs N"},
      {"scorer", Kind::kString, "model", "model | popularity | oracle"},
      {"user", Kind::kUInt, 0, "user whose test context dump-attention reads"},
      // synthetic data
      {"users", Kind::kUInt, 500, "synthetic users"},
      {"items", Kind::kUInt, 200, "synthetic items"},
      {"latent_chains", Kind::kUInt, 3, "latent item-level chains K"},
      {"synth_alpha", Kind::kReal, 0.0075, "Dirichlet concentration of synthetic chains (per item)"},
      {"min_seq", Kind::kUInt, 20, "shortest synthetic sequence"},
      {"max_seq", Kind::kUInt, 50, "longest synthetic sequence"},
      {"d_text", Kind::kUInt, 32, "synthetic item embedding width"},
      // sweep
      {"sweep_alpha", Kind::kRealList, json::array(), "alpha values (empty: current alpha)"},
      {"sweep_num_states", Kind::kUIntList, json::array(), "num_states values"},
      {"sweep_hidden", Kind::kUIntList, json::array(), "hidden values"},
      {"sweep_tokens", Kind::kUIntList, json::array(), "total_tokens values"},
  };
  return keys;
}

inline const Key* find_key(std::string_view name) {
  for (const auto& k : schema())
    if (name == k.name) return &k;
  return nullptr;
}

inline std::string flag_name(std::string_view key) {
  std::string s(key);
  for (auto& c : s)
    if (c == '_') c = '-';
  return s;
}

/// Values applied on top of the defaults by a named preset. The desk preset
/// is the single-machine configuration used for verification runs.
inline json preset_values(std::string_view name) {
  if (name == "paper") return json::object();
  if (name == "desk")
    return {{"num_states", 10}, {"seq_len", 256}, {"max_seq_len", 256}, {"num_layers", 2},
            {"hidden", 64},     {"heads", 2},     {"batch_size", 32},   {"total_tokens", 2'000'000},
            {"lr", 1e-3},       {"eval_every", 50}};
  throw ConfigError("unknown preset '" + std::string(name) + "'");
}

/// Checks one value against its key's type; integers are accepted for
/// real-valued keys.
inline json coerce(const Key& key, const json& v) {
  auto bad = [&]() {
    return ConfigError("invalid value " + v.dump() + " for key '" + key.name + "'");
  };
  auto uint_of = [&](const json& x) -> json {
    if (x.is_number_unsigned()) return x;
    if (x.is_number_integer() && x.get<long long>() >= 0) return x.get<std::uint64_t>();
    if (x.is_number_float()) {
      const double d = x.get<double>();
      if (d >= 0.0 && std::floor(d) == d && d < 1.8e19) return static_cast<std::uint64_t>(d);
    }
    throw bad();
  };
  auto real_of = [&](const json& x) -> json {
    if (!x.is_number() || !std::isfinite(x.get<double>())) throw bad();
    return x.get<double>();
  };
  switch (key.kind) {
    case Kind::kUInt: return uint_of(v);
    case Kind::kReal: return real_of(v);
    case Kind::kBool:
      if (!v.is_boolean()) throw bad();
      return v;
    case Kind::kString:
      if (!v.is_string()) throw bad();
      return v;
    case Kind::kUIntList:
    case Kind::kRealList:
    case Kind::kStringList: {
      if (!v.is_array()) throw bad();
      json out = json::array();
      for (const auto& x : v) {
        if (key.kind == Kind::kUIntList) out.push_back(uint_of(x));
        else if (key.kind == Kind::kRealList) out.push_back(real_of(x));
        else if (x.is_string()) out.push_back(x);
        else throw bad();
      }
      return out;
    }
  }
  throw bad();
}

/// Parses a command-line string for a key.
inline json parse_flag(const Key& key, const std::string& text) {
  auto split = [](const std::string& s) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : s) {
      if (c == ',') {
        parts.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (!cur.empty() || !parts.empty()) parts.push_back(cur);
    return parts;
  };
  auto number = [&](const std::string& s) -> json {
    try {
      return json::parse(s);
    } catch (const json::exception&) {
      throw ConfigError("invalid value '" + text + "' for key '" + key.name + "'");
    }
  };
  switch (key.kind) {
    case Kind::kString: return coerce(key, text);
    case Kind::kBool:
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw ConfigError("invalid value '" + text + "' for key '" + key.name + "'");
    case Kind::kUInt:
    case Kind::kReal: return coerce(key, number(text));
    case Kind::kStringList: {
      json arr = json::array();
      for (auto& p : split(text)) arr.push_back(p);
      return coerce(key, arr);
    }
    default: {
      json arr = json::array();
      for (auto& p : split(text)) arr.push_back(number(p));
      return coerce(key, arr);
    }
  }
}

/// A config file is either a flat key object or a report carrying one
/// under "config".
inline json file_values(const json& doc) {
  const json& flat = doc.contains("config") && doc["config"].is_object() ? doc["config"] : doc;
  if (!flat.is_object()) throw ConfigError("config file must hold a JSON object");
  json out = json::object();
  for (const auto& [k, v] : flat.items()) {
    if (k == "command") continue;
    const auto* key = find_key(k);
    if (!key) throw ConfigError("unknown config key '" + k + "'");
    out[k] = coerce(*key, v);
  }
  return out;
}

/// defaults ← preset ← file ← flags. The preset is taken from the flags,
/// else the file, else "paper".
inline json merge(const json& file, const json& flags) {
  json cfg = json::object();
  for (const auto& k : schema()) cfg[k.name] = k.fallback;
  std::string preset = "paper";
  if (file.contains("preset")) preset = file["preset"].get<std::string>();
  if (flags.contains("preset")) preset = flags["preset"].get<std::string>();
  cfg["preset"] = preset;
  const json preset_cfg = preset_values(preset);
  for (const auto& [k, v] : preset_cfg.items()) cfg[k] = v;
  for (const auto& [k, v] : file.items()) cfg[k] = v;
  for (const auto& [k, v] : flags.items()) cfg[k] = v;
  cfg["preset"] = preset;
  return cfg;
}

inline ModelConfig model_config(const json& c) {
  ModelConfig m;
  m.num_layers = c.at("num_layers").get<std::size_t>();
  m.hidden = c.at("hidden").get<std::size_t>();
  m.heads = c.at("heads").get<std::size_t>();
  m.max_seq_len = c.at("max_seq_len").get<std::size_t>();
  m.ffn_hidden = c.at("ffn_hidden").get<std::size_t>();
  m.rope_base = c.at("rope_base").get<double>();
  m.norm_eps = c.at("norm_eps").get<double>();
  m.attn_bias = c.at("attn_bias").get<bool>();
  return m;
}

inline PretrainConfig pretrain_config(const json& c) {
  PretrainConfig p;
  p.num_states = c.at("num_states").get<std::size_t>();
  p.alpha = c.at("alpha").get<double>();
  p.seq_len = c.at("seq_len").get<std::size_t>();
  p.batch_size = c.at("batch_size").get<std::size_t>();
  p.total_tokens = c.at("total_tokens").get<std::uint64_t>();
  p.lr = c.at("lr").get<double>();
  p.weight_decay = c.at("weight_decay").get<double>();
  p.grad_clip = c.at("grad_clip").get<double>();
  p.eval_every = c.at("eval_every").get<std::size_t>();
  p.eval_batches = c.at("eval_batches").get<std::size_t>();
  p.seed = c.at("seed").get<std::uint64_t>();
  p.threads = std::max<std::size_t>(1, c.at("threads").get<std::size_t>());
  return p;
}

inline rec::FinetuneConfig finetune_config(const json& c) {
  rec::FinetuneConfig f;
  f.lr = c.at("ft_lr").get<double>();
  f.weight_decay = c.at("ft_weight_decay").get<double>();
  f.max_len = c.at("max_len").get<std::size_t>();
  f.dropout = c.at("dropout").get<double>();
  f.temperature = c.at("temperature").get<double>();
  f.mode = rec::parse_finetune_mode(c.at("mode").get<std::string>());
  f.epochs = c.at("epochs").get<std::size_t>();
  f.batch_size = c.at("ft_batch_size").get<std::size_t>();
  f.patience = c.at("patience").get<std::size_t>();
  f.adaptor_hidden = c.at("adaptor_hidden").get<std::size_t>();
  f.lora = {c.at("lora_rank").get<std::size_t>(), c.at("lora_alpha").get<double>(),
            c.at("lora_dropout").get<double>()};
  f.seed = c.at("seed").get<std::uint64_t>();
  f.threads = std::max<std::size_t>(1, c.at("threads").get<std::size_t>());
  return f;
}

inline rec::SynthConfig synth_config(const json& c) {
  rec::SynthConfig s;
  s.num_users = c.at("users").get<std::size_t>();
  s.num_items = c.at("items").get<std::size_t>();
  s.num_chains = c.at("latent_chains").get<std::size_t>();
  s.alpha = c.at("synth_alpha").get<double>();
  s.min_len = c.at("min_seq").get<std::size_t>();
  s.max_len = c.at("max_seq").get<std::size_t>();
  s.d_text = c.at("d_text").get<std::size_t>();
  s.seed = c.at("seed").get<std::uint64_t>();
  return s;
}

inline std::vector<rec::ShuffleMode> shuffle_modes(const json& c) {
  std::vector<rec::ShuffleMode> out;
  for (const auto& m : c.at("modes")) out.push_back(rec::parse_shuffle_mode(m.get<std::string>()));
  if (out.empty()) throw ConfigError("modes must name at least one shuffle mode");
  return out;
}

inline std::vector<std::size_t> cutoffs(const json& c) {
  std::vector<std::size_t> out;
  for (const auto& n : c.at("cutoffs")) {
    out.push_back(n.get<std::size_t>());
    if (out.back() == 0) throw ConfigError("cutoffs must be >= 1");
  }
  if (out.empty()) throw ConfigError("cutoffs must not be empty");
  return out;
}

/// Validation shared by every command: model/pre-training feasibility plus
/// the enumerated string keys.
inline void validate(const json& c) {
  pretrain_config(c).validate(model_config(c));
  finetune_config(c);
  shuffle_modes(c);
  cutoffs(c);
  const auto scorer = c.at("scorer").get<std::string>();
  if (scorer != "model" && scorer != "popularity" && scorer != "oracle")
    throw ConfigError("unknown scorer '" + scorer + "'");
  if (c.at("out_dir").get<std::string>().empty()) throw ConfigError("out_dir must not be empty");
}

}  // namespace mpt::config
