#pragma once

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "mpt/errors.hpp"

namespace mpt::rec {

/// Per-user chronological item sequences plus one raw embedding per item.
struct InteractionDataset {
  std::vector<std::vector<int>> sequences;
  std::size_t num_items = 0;
  std::size_t embedding_dim = 0;
  std::vector<float> embeddings;  // num_items × embedding_dim, row k is item k

  std::span<const float> embedding(std::size_t item) const {
    return {embeddings.data() + item * embedding_dim, embedding_dim};
  }

  void validate() const {
    if (sequences.empty()) throw FormatError("no users");
    if (num_items == 0 || embedding_dim == 0) throw FormatError("empty item embedding matrix");
    if (embeddings.size() != num_items * embedding_dim)
      throw FormatError("embedding matrix size does not match num_items × dim");
    for (float v : embeddings)
      if (!std::isfinite(v)) throw FormatError("non-finite item embedding");
    for (std::size_t u = 0; u < sequences.size(); ++u) {
      if (sequences[u].empty()) throw FormatError("user " + std::to_string(u) + " has no items");
      for (int item : sequences[u])
        if (item < 0 || static_cast<std::size_t>(item) >= num_items)
          throw FormatError("user " + std::to_string(u) + ": item " + std::to_string(item) +
                            " outside [0, " + std::to_string(num_items) + ")");
    }
  }
};

/// One user per line, whitespace-separated item indices; blank lines and
/// lines starting with '#' are skipped. Indices are checked against
/// `num_items` when it is non-zero.
inline std::vector<std::vector<int>> parse_sequences(std::istream& in, std::size_t num_items = 0) {
  std::vector<std::vector<int>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    std::vector<int> seq;
    std::string tok;
    while (ls >> tok) {
      std::size_t used = 0;
      long long v = -1;
      try {
        v = std::stoll(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size() || v < 0 || v > INT32_MAX)
        throw FormatError("line " + std::to_string(lineno) + ": invalid item index '" + tok + "'");
      if (num_items && static_cast<std::size_t>(v) >= num_items)
        throw FormatError("line " + std::to_string(lineno) + ": item " + tok + " >= num_items " +
                          std::to_string(num_items));
      seq.push_back(static_cast<int>(v));
    }
    out.push_back(std::move(seq));
  }
  if (out.empty()) throw FormatError("no users");
  return out;
}

struct EmbeddingMatrix {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<float> values;
};

/// Header `num_items dim`, then one row of `dim` floats per item.
inline EmbeddingMatrix parse_embeddings(std::istream& in) {
  EmbeddingMatrix m;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    if (!header) {
      long long rows = 0, dim = 0;
      std::string extra;
      if (!(ls >> rows >> dim) || (ls >> extra) || rows <= 0 || dim <= 0)
        throw FormatError("line " + std::to_string(lineno) + ": expected header 'num_items dim'");
      m.rows = static_cast<std::size_t>(rows);
      m.dim = static_cast<std::size_t>(dim);
      m.values.reserve(m.rows * m.dim);
      header = true;
      continue;
    }
    std::size_t count = 0;
    std::string tok;
    while (ls >> tok) {
      std::size_t used = 0;
      float v = 0.0f;
      try {
        v = std::stof(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size() || !std::isfinite(v))
        throw FormatError("line " + std::to_string(lineno) + ": invalid float '" + tok + "'");
      m.values.push_back(v);
      ++count;
    }
    if (count != m.dim)
      throw FormatError("line " + std::to_string(lineno) + ": " + std::to_string(count) +
                        " values, header declares dim " + std::to_string(m.dim));
    if (m.values.size() > m.rows * m.dim)
      throw FormatError("line " + std::to_string(lineno) + ": more rows than header num_items");
  }
  if (!header) throw FormatError("embedding file is empty");
  if (m.values.size() != m.rows * m.dim)
    throw FormatError("embedding file has " + std::to_string(m.values.size() / m.dim) +
                      " rows, header declares " + std::to_string(m.rows));
  return m;
}

inline void write_sequences(std::ostream& out, const std::vector<std::vector<int>>& sequences) {
  for (const auto& seq : sequences) {
    for (std::size_t i = 0; i < seq.size(); ++i) out << (i ? " " : "") << seq[i];
    out << '\n';
  }
}

inline void write_embeddings(std::ostream& out, const InteractionDataset& ds) {
  out << ds.num_items << ' ' << ds.embedding_dim << '\n';
  out << std::setprecision(9);
  for (std::size_t i = 0; i < ds.num_items; ++i) {
    const auto row = ds.embedding(i);
    for (std::size_t j = 0; j < row.size(); ++j) out << (j ? " " : "") << row[j];
    out << '\n';
  }
}

/// Builds and validates a dataset from parsed parts.
inline InteractionDataset make_dataset(std::vector<std::vector<int>> sequences, EmbeddingMatrix emb) {
  InteractionDataset ds{std::move(sequences), emb.rows, emb.dim, std::move(emb.values)};
  ds.validate();
  return ds;
}

/// Views into one user's sequence under leave-one-out partitioning.
struct UserSplit {
  std::size_t user = 0;
  std::span<const int> train;          // all but the last two items
  std::span<const int> valid_context;  // same items as train
  int valid_target = 0;                // second-to-last item
  std::span<const int> test_context;   // all but the last item
  int test_target = 0;                 // last item
};

struct LeaveOneOutSplit {
  std::vector<UserSplit> users;
  std::size_t excluded = 0;  // users with fewer than 3 interactions
};

/// The returned spans point into `ds`, which must outlive the split.
inline LeaveOneOutSplit leave_one_out_split(const InteractionDataset& ds) {
  LeaveOneOutSplit split;
  for (std::size_t u = 0; u < ds.sequences.size(); ++u) {
    const auto& seq = ds.sequences[u];
    const std::size_t n = seq.size();
    if (n < 3) {
      ++split.excluded;
      continue;
    }
    const std::span<const int> all(seq);
    split.users.push_back(
        {u, all.first(n - 2), all.first(n - 2), seq[n - 2], all.first(n - 1), seq[n - 1]});
  }
  return split;
}

}  // namespace mpt::rec
