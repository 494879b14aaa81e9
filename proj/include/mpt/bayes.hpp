#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mpt/markov.hpp"
#include "mpt/rng.hpp"

// Bayes-optimal next-state estimator under a Dirichlet prior and the
// Monte-Carlo estimate of its expected per-transition log loss.

namespace mpt::markov {

/// Row i is (counts[i] + alpha) / Σ_j (counts[i][j] + alpha_j).
inline TransitionMatrix bayes_posterior_mean(const TransitionCounts& counts,
                                             const DirichletPrior& prior) {
  prior.validate();
  const std::size_t n = counts.num_states;
  if (prior.num_states() != n)
    throw DimensionError("prior has " + std::to_string(prior.num_states()) + " components, counts " +
                         std::to_string(n));
  TransitionMatrix est{n, std::vector<double>(n * n), 0};
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += static_cast<double>(counts(i, j)) + prior.alpha[j];
    for (std::size_t j = 0; j < n; ++j)
      est.probs[i * n + j] = (static_cast<double>(counts(i, j)) + prior.alpha[j]) / total;
  }
  return est;
}

/// −log p̂(s_{t+1}) for t = 1..T−1, where p̂ is the running posterior mean
/// built from s_1..s_t only.
inline std::vector<double> bayes_stepwise_losses(const Trajectory& traj, const DirichletPrior& prior) {
  const std::size_t n = prior.num_states();
  const double alpha_total = prior.total();
  std::vector<double> counts(n * n, 0.0);
  std::vector<double> row_totals(n, 0.0);
  std::vector<double> out;
  out.reserve(traj.size() > 0 ? traj.size() - 1 : 0);
  for (std::size_t t = 0; t + 1 < traj.size(); ++t) {
    const auto i = static_cast<std::size_t>(traj.states[t]);
    const auto j = static_cast<std::size_t>(traj.states[t + 1]);
    if (i >= n || j >= n) throw IndexError("state outside prior support");
    const double p = (counts[i * n + j] + prior.alpha[j]) / (row_totals[i] + alpha_total);
    out.push_back(-std::log(p));
    counts[i * n + j] += 1.0;
    row_totals[i] += 1.0;
  }
  return out;
}

/// Mean per-transition Bayes log loss of one trajectory.
inline double bayes_trajectory_loss(const Trajectory& traj, const DirichletPrior& prior) {
  const auto losses = bayes_stepwise_losses(traj, prior);
  double acc = 0.0;
  for (double l : losses) acc += l;
  return losses.empty() ? 0.0 : acc / static_cast<double>(losses.size());
}

struct MeanWithError {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t samples = 0;
};

inline MeanWithError mean_and_stderr(const std::vector<double>& xs) {
  MeanWithError r;
  r.samples = xs.size();
  if (xs.empty()) return r;
  double acc = 0.0;
  for (double x : xs) acc += x;
  r.mean = acc / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.stderr_ = std::sqrt(ss / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size()));
  }
  return r;
}

/// Chain c draws its matrix and trajectory from stream (kBayes, c) of `seed`.
inline Trajectory bayes_chain(const DirichletPrior& prior, std::size_t length, std::uint64_t seed,
                              std::size_t chain) {
  auto rng = make_stream(seed, Stream::kBayes, chain);
  const auto p = sample_transition_matrix(prior, rng, seed);
  return sample_trajectory(p, length, rng);
}

/// Monte-Carlo estimate of E[−(1/(T−1)) Σ_t log p̂^{(t)}(s_{t+1})] over
/// chains drawn from the prior.
inline MeanWithError bayes_limit_loss(const DirichletPrior& prior, std::size_t num_states,
                                      std::size_t length, std::size_t num_chains, std::uint64_t seed) {
  prior.validate();
  if (prior.num_states() != num_states) throw DimensionError("prior size differs from num_states");
  if (num_chains == 0) throw ConfigError("bayes_limit_loss needs at least one chain");
  std::vector<double> per_chain(num_chains);
  for (std::size_t c = 0; c < num_chains; ++c)
    per_chain[c] = bayes_trajectory_loss(bayes_chain(prior, length, seed, c), prior);
  return mean_and_stderr(per_chain);
}

}  // namespace mpt::markov
