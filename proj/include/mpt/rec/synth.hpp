#pragma once

#include <cmath>
#include <vector>

#include "mpt/markov.hpp"
#include "mpt/rec/dataset.hpp"
#include "mpt/rng.hpp"

// Synthetic interaction data with a known generator: every user walks one
// of K latent item-level Markov chains whose rows are Dirichlet draws.

namespace mpt::rec {

struct SynthConfig {
  std::size_t num_users = 500;
  std::size_t num_items = 200;
  std::size_t num_chains = 3;
  // 0.0075 · 200 items = 1.5, the row concentration of the |S| = 30,
  // α = 0.05 pre-training prior.
  double alpha = 0.0075;
  std::size_t min_len = 20;
  std::size_t max_len = 50;
  std::size_t d_text = 32;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_users == 0) throw ConfigError("synthetic data needs at least one user");
    if (num_items == 0 || num_items > 10'000) throw ConfigError("num_items must be in [1, 10000]");
    if (num_chains == 0) throw ConfigError("need at least one latent chain");
    if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
    if (min_len < 3 || max_len < min_len) throw ConfigError("need 3 <= min_len <= max_len");
    if (d_text == 0) throw ConfigError("d_text must be positive");
  }
};

struct SynthGroundTruth {
  std::vector<markov::TransitionMatrix> chains;
  std::vector<int> user_chain;
};

struct SyntheticDataset {
  InteractionDataset data;
  SynthGroundTruth truth;
};

/// Chains and item embeddings come from stream (kSynth, 0); user u draws its
/// chain, start item, length and walk from stream (kSynth, u + 1). Supplying
/// `chains` replaces the Dirichlet draws (their count sets K).
inline SyntheticDataset generate_synthetic_dataset(const SynthConfig& cfg,
                                                   std::vector<markov::TransitionMatrix> chains = {}) {
  cfg.validate();
  auto rng = make_stream(cfg.seed, Stream::kSynth, 0);
  if (chains.empty()) {
    const auto prior = markov::DirichletPrior::symmetric(cfg.num_items, cfg.alpha);
    for (std::size_t k = 0; k < cfg.num_chains; ++k)
      chains.push_back(markov::sample_transition_matrix(prior, rng, cfg.seed));
  }
  for (const auto& c : chains)
    if (c.num_states != cfg.num_items) throw DimensionError("chain size differs from num_items");

  SyntheticDataset out;
  auto& ds = out.data;
  ds.num_items = cfg.num_items;
  ds.embedding_dim = cfg.d_text;
  ds.embeddings.resize(cfg.num_items * cfg.d_text);
  for (std::size_t i = 0; i < cfg.num_items; ++i) {
    double ss = 0.0;
    std::vector<double> v(cfg.d_text);
    for (auto& x : v) {
      x = rng.normal();
      ss += x * x;
    }
    const double inv = 1.0 / std::sqrt(ss);
    for (std::size_t j = 0; j < cfg.d_text; ++j)
      ds.embeddings[i * cfg.d_text + j] = static_cast<float>(v[j] * inv);
  }
  for (std::size_t u = 0; u < cfg.num_users; ++u) {
    auto urng = make_stream(cfg.seed, Stream::kSynth, u + 1);
    const auto k = urng.below(chains.size());
    const auto len = cfg.min_len + urng.below(cfg.max_len - cfg.min_len + 1);
    auto traj = markov::sample_trajectory(chains[k], len, urng);
    ds.sequences.push_back(std::move(traj.states));
    out.truth.user_chain.push_back(static_cast<int>(k));
  }
  out.truth.chains = std::move(chains);
  ds.validate();
  return out;
}

}  // namespace mpt::rec
