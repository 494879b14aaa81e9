#pragma once

#include <filesystem>
#include <fstream>

#include "mpt/io/checkpoint.hpp"
#include "mpt/rec/dataset.hpp"

namespace mpt::io {

inline constexpr const char* kItemEmbeddingTensor = "item_embeddings";

inline bool has_checkpoint_magic(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  char magic[4] = {};
  in.read(magic, 4);
  return in.gcount() == 4 && std::equal(magic, magic + 4, kMagic);
}

/// Text embedding file, or a checkpoint container holding a 2-D
/// `item_embeddings` tensor.
inline rec::EmbeddingMatrix load_embeddings(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingFileError("embeddings file not found: " + path.string());
  if (has_checkpoint_magic(path)) {
    const auto c = read_checkpoint(path);
    const auto* t = c.find(kItemEmbeddingTensor);
    if (!t || t->shape.size() != 2)
      throw FormatError(path.string() + ": no 2-D '" + kItemEmbeddingTensor + "' tensor");
    return {t->shape[0], t->shape[1], t->data};
  }
  std::ifstream in(path);
  try {
    return rec::parse_embeddings(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// Reads and validates a sequences file against an embeddings file.
inline rec::InteractionDataset load_dataset(const std::filesystem::path& sequences_path,
                                            const std::filesystem::path& embeddings_path) {
  auto emb = load_embeddings(embeddings_path);
  if (!std::filesystem::exists(sequences_path))
    throw MissingFileError("sequences file not found: " + sequences_path.string());
  std::ifstream in(sequences_path);
  std::vector<std::vector<int>> seqs;
  try {
    seqs = rec::parse_sequences(in, emb.rows);
  } catch (const FormatError& e) {
    throw FormatError(sequences_path.string() + ": " + e.what());
  }
  return rec::make_dataset(std::move(seqs), std::move(emb));
}

inline void save_dataset(const std::filesystem::path& sequences_path, const std::filesystem::path& embeddings_path,
                         const rec::InteractionDataset& ds) {
  for (const auto* p : {&sequences_path, &embeddings_path})
    if (p->has_parent_path()) std::filesystem::create_directories(p->parent_path());
  std::ofstream s(sequences_path), e(embeddings_path);
  if (!s || !e) throw Error("cannot write dataset files");
  rec::write_sequences(s, ds.sequences);
  rec::write_embeddings(e, ds);
}

}  // namespace mpt::io
