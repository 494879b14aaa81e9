#pragma once

#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mpt/errors.hpp"
#include "mpt/ops.hpp"
#include "mpt/rng.hpp"

namespace mpt::rec {

/// 1-based rank of `target` when items are sorted by descending score, ties
/// broken by ascending item index.
template <typename S>
std::size_t rank_of_target(std::span<const S> scores, std::size_t target) {
  if (target >= scores.size())
    throw IndexError("target " + std::to_string(target) + " outside [0, " +
                     std::to_string(scores.size()) + ")");
  const S ts = scores[target];
  std::size_t rank = 1;
  for (std::size_t v = 0; v < scores.size(); ++v) {
    if (scores[v] > ts || (scores[v] == ts && v < target)) ++rank;
  }
  return rank;
}

inline double hr_at(std::size_t rank, std::size_t n) { return rank <= n ? 1.0 : 0.0; }

inline double ndcg_at(std::size_t rank, std::size_t n) {
  return rank <= n ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

/// cos(hidden, repr_v) / tau for every item row of reprs[n_items×d]. A
/// vector with norm below 1e-12 scores 0 against everything.
inline std::vector<float> score_items(std::span<const float> hidden, std::span<const float> reprs,
                                      std::size_t dim, double tau) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  if (hidden.size() != dim || reprs.size() % dim != 0)
    throw DimensionError("score_items: hidden/reprs dimension mismatch");
  auto norm = [](std::span<const float> v) {
    double ss = 0.0;
    for (float x : v) ss += static_cast<double>(x) * x;
    return std::sqrt(ss);
  };
  const double hn = norm(hidden);
  const std::size_t n = reprs.size() / dim;
  std::vector<float> out(n, 0.0f);
  if (hn < kZeroNormGuard) return out;
  for (std::size_t v = 0; v < n; ++v) {
    const auto row = reprs.subspan(v * dim, dim);
    const double rn = norm(row);
    if (rn < kZeroNormGuard) continue;
    double dot = 0.0;
    for (std::size_t k = 0; k < dim; ++k) dot += static_cast<double>(hidden[k]) * row[k];
    out[v] = static_cast<float>(dot / (hn * rn) / tau);
  }
  return out;
}

enum class ShuffleMode { kChronological, kPartial, kComplete };

inline std::string_view to_string(ShuffleMode m) {
  switch (m) {
    case ShuffleMode::kChronological: return "chronological";
    case ShuffleMode::kPartial: return "partial";
    case ShuffleMode::kComplete: return "complete";
  }
  return "?";
}

inline ShuffleMode parse_shuffle_mode(std::string_view s) {
  if (s == "chronological") return ShuffleMode::kChronological;
  if (s == "partial") return ShuffleMode::kPartial;
  if (s == "complete") return ShuffleMode::kComplete;
  throw ConfigError("unknown shuffle mode '" + std::string(s) + "'");
}

/// chronological: unchanged. partial: all but the last element permuted
/// uniformly, the last stays last. complete: uniform permutation.
inline std::vector<int> shuffle_sequence(std::span<const int> seq, ShuffleMode mode, Xoshiro256pp& rng) {
  if (seq.empty()) throw ContractError("shuffle_sequence: empty sequence");
  std::vector<int> out(seq.begin(), seq.end());
  switch (mode) {
    case ShuffleMode::kChronological: break;
    case ShuffleMode::kPartial: rng.shuffle(out.begin(), out.end() - 1); break;
    case ShuffleMode::kComplete: rng.shuffle(out.begin(), out.end()); break;
  }
  return out;
}

}  // namespace mpt::rec
