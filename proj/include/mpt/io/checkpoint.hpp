#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "mpt/errors.hpp"
#include "mpt/model.hpp"
#include "mpt/rec/adaptor.hpp"
#include "mpt/tensor.hpp"

// Named-tensor checkpoint container.
//
// Layout: magic "MPT1" | u64 little-endian header length | UTF-8 JSON header
// | payload. The header carries format_version, model_config, training_step,
// a tensor index (name → shape, dtype, byte offset, byte length) in payload
// order, and payload_crc32. The payload is every tensor as little-endian
// f32, row-major, concatenated in index order.

namespace mpt::io {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using json = nlohmann::ordered_json;

inline constexpr char kMagic[4] = {'M', 'P', 'T', '1'};
inline constexpr int kFormatVersion = 1;
inline constexpr std::uint64_t kMaxHeaderBytes = 64ull << 20;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct CheckpointContents {
  json header;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline std::uint32_t crc32_of(const std::vector<char>& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

/// `fields` supplies everything except the tensor index and checksum.
inline std::vector<char> encode_checkpoint(const json& fields, const std::vector<NamedTensor>& tensors) {
  json header = fields;
  header["format_version"] = kFormatVersion;
  json index = json::object();
  std::vector<char> payload;
  for (const auto& t : tensors) {
    if (shape_numel(t.shape) != t.data.size())
      throw CheckpointError("tensor '" + t.name + "' shape does not match its data");
    if (index.contains(t.name)) throw CheckpointError("duplicate tensor name '" + t.name + "'");
    const std::size_t bytes = t.data.size() * sizeof(float);
    index[t.name] = {{"shape", t.shape}, {"dtype", "f32"}, {"offset", payload.size()}, {"length", bytes}};
    const auto* p = reinterpret_cast<const char*>(t.data.data());
    payload.insert(payload.end(), p, p + bytes);
  }
  header["tensors"] = index;
  header["payload_crc32"] = crc32_of(payload);
  const std::string text = header.dump();
  std::vector<char> out(kMagic, kMagic + 4);
  const std::uint64_t len = text.size();
  const auto* lp = reinterpret_cast<const char*>(&len);
  out.insert(out.end(), lp, lp + 8);
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

inline CheckpointContents decode_checkpoint(const std::vector<char>& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw CheckpointError("not a checkpoint: bad magic");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 4, 8);
  if (len > kMaxHeaderBytes || 12 + len > bytes.size())
    throw CheckpointError("truncated checkpoint: header length " + std::to_string(len));
  CheckpointContents c;
  try {
    c.header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(len));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  try {
    if (c.header.at("format_version").get<int>() != kFormatVersion)
      throw CheckpointError("unsupported checkpoint format_version " +
                            c.header.at("format_version").dump());
    const std::vector<char> payload(bytes.begin() + 12 + static_cast<std::ptrdiff_t>(len), bytes.end());
    std::uint64_t expected_offset = 0;
    for (const auto& [name, entry] : c.header.at("tensors").items()) {
      if (entry.at("dtype").get<std::string>() != "f32")
        throw CheckpointError("tensor '" + name + "': unsupported dtype");
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto length = entry.at("length").get<std::uint64_t>();
      if (shape_numel(shape) * sizeof(float) != length)
        throw CheckpointError("tensor '" + name + "': shape " + shape_str(shape) +
                              " does not match byte length " + std::to_string(length));
      if (offset != expected_offset)
        throw CheckpointError("tensor '" + name + "': offsets not contiguous");
      if (offset + length > payload.size())
        throw CheckpointError("truncated checkpoint payload at tensor '" + name + "'");
      NamedTensor t{name, shape, std::vector<float>(length / sizeof(float))};
      std::memcpy(t.data.data(), payload.data() + offset, length);
      c.tensors.push_back(std::move(t));
      expected_offset = offset + length;
    }
    if (expected_offset != payload.size())
      throw CheckpointError("checkpoint payload length " + std::to_string(payload.size()) +
                            " differs from indexed " + std::to_string(expected_offset));
    if (c.header.at("payload_crc32").get<std::uint32_t>() != crc32_of(payload))
      throw CheckpointError("checkpoint checksum mismatch");
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  return c;
}

inline void write_checkpoint(const std::filesystem::path& path, const json& fields,
                             const std::vector<NamedTensor>& tensors) {
  const auto bytes = encode_checkpoint(fields, tensors);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointContents read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("checkpoint not found: " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

// ---- configuration <-> JSON ----------------------------------------------

inline json to_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers}, {"hidden", c.hidden},         {"heads", c.heads},
          {"max_seq_len", c.max_seq_len}, {"ffn_hidden", c.ffn()},    {"rope_base", c.rope_base},
          {"attn_dropout", c.attn_dropout}, {"norm_eps", c.norm_eps}, {"attn_bias", c.attn_bias}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.ffn_hidden = j.at("ffn_hidden").get<std::size_t>();
  c.rope_base = j.at("rope_base").get<double>();
  c.attn_dropout = j.at("attn_dropout").get<double>();
  c.norm_eps = j.at("norm_eps").get<double>();
  c.attn_bias = j.at("attn_bias").get<bool>();
  return c;
}

inline json to_json(const LoraConfig& c) {
  return {{"rank", c.rank}, {"alpha", c.alpha}, {"dropout", c.dropout}};
}

inline LoraConfig lora_config_from_json(const json& j) {
  return {j.at("rank").get<std::size_t>(), j.at("alpha").get<double>(), j.at("dropout").get<double>()};
}

// ---- model bundles ---------------------------------------------------------

/// Backbone plus optional adaptor and LoRA weights, with free-form metadata.
struct ModelBundle {
  ModelConfig config;
  long step = 0;
  TransformerWeights<float> backbone;
  std::optional<rec::AdaptorWeights<float>> adaptor;
  std::optional<LoRAWeights<float>> lora;
  json metadata = json::object();
};

namespace detail {

inline NamedTensor to_named(const std::string& name, const Tensor<float>& t) {
  return {name, t.shape(), std::vector<float>(t.values().begin(), t.values().end())};
}

inline Tensor<float> take(const CheckpointContents& c, const std::string& name, const Shape& expected) {
  const auto* t = c.find(name);
  if (!t) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
  if (t->shape != expected)
    throw DimensionError("tensor '" + name + "' has shape " + shape_str(t->shape) + ", expected " +
                         shape_str(expected));
  Tensor<float> out(t->shape, t->data, true);
  out.set_name(name);
  return out;
}

}  // namespace detail

inline void save_model(const std::filesystem::path& path, const ModelBundle& b) {
  json fields = {{"model_config", to_json(b.config)}, {"training_step", b.step}};
  if (b.adaptor)
    fields["adaptor"] = {{"input_dim", b.adaptor->input_dim()}, {"hidden", b.adaptor->w1.dim(1)}};
  if (b.lora) fields["lora"] = to_json(b.lora->cfg);
  fields["metadata"] = b.metadata;
  std::vector<NamedTensor> tensors;
  for (const auto& [name, t] : b.backbone.named()) tensors.push_back(detail::to_named(name, t));
  if (b.adaptor)
    for (const auto& [name, t] : b.adaptor->named()) tensors.push_back(detail::to_named(name, t));
  if (b.lora)
    for (const auto& [name, t] : b.lora->named()) tensors.push_back(detail::to_named(name, t));
  write_checkpoint(path, fields, tensors);
}

inline ModelBundle bundle_from_contents(const CheckpointContents& c) {
  ModelBundle b;
  try {
    b.config = model_config_from_json(c.header.at("model_config"));
    b.step = c.header.at("training_step").get<long>();
    if (c.header.contains("metadata")) b.metadata = c.header.at("metadata");
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint header lacks model fields: ") + e.what());
  }
  b.config.validate();
  const std::size_t d = b.config.hidden, f = b.config.ffn();
  for (std::size_t i = 0; i < b.config.num_layers; ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    LayerWeights<float> l;
    l.wq = detail::take(c, p + "wq", {d, d});
    l.wk = detail::take(c, p + "wk", {d, d});
    l.wv = detail::take(c, p + "wv", {d, d});
    l.wo = detail::take(c, p + "wo", {d, d});
    if (b.config.attn_bias) {
      l.bq = detail::take(c, p + "bq", {d});
      l.bk = detail::take(c, p + "bk", {d});
      l.bv = detail::take(c, p + "bv", {d});
    }
    l.w_gate = detail::take(c, p + "w_gate", {d, f});
    l.w_up = detail::take(c, p + "w_up", {d, f});
    l.w_down = detail::take(c, p + "w_down", {f, d});
    l.attn_norm = detail::take(c, p + "attn_norm", {d});
    l.ffn_norm = detail::take(c, p + "ffn_norm", {d});
    b.backbone.layers.push_back(std::move(l));
  }
  b.backbone.final_norm = detail::take(c, "final_norm", {d});
  if (c.header.contains("adaptor")) {
    const auto in = c.header["adaptor"].at("input_dim").get<std::size_t>();
    const auto h1 = c.header["adaptor"].at("hidden").get<std::size_t>();
    b.adaptor = rec::AdaptorWeights<float>{
        detail::take(c, "adaptor.gain", {in}), detail::take(c, "adaptor.w1", {in, h1}),
        detail::take(c, "adaptor.b1", {h1}), detail::take(c, "adaptor.w2", {h1, d}),
        detail::take(c, "adaptor.b2", {d})};
  }
  if (c.header.contains("lora")) {
    LoRAWeights<float> lora{lora_config_from_json(c.header["lora"]), {}};
    const std::size_t r = lora.cfg.rank;
    for (std::size_t i = 0; i < b.config.num_layers; ++i) {
      std::array<LoraPair<float>, 4> projs;
      for (std::size_t p = 0; p < 4; ++p) {
        const std::string base =
            "lora.layer" + std::to_string(i) + "." + LoRAWeights<float>::kProjNames[p];
        projs[p] = {detail::take(c, base + ".A", {r, d}), detail::take(c, base + ".B", {d, r})};
      }
      lora.layers.push_back(std::move(projs));
    }
    b.lora = std::move(lora);
  }
  return b;
}

inline ModelBundle load_model(const std::filesystem::path& path) {
  return bundle_from_contents(read_checkpoint(path));
}

}  // namespace mpt::io
