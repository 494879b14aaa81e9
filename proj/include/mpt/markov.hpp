#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "mpt/errors.hpp"
#include "mpt/rng.hpp"

// Synthetic Markov-chain world: Dirichlet-prior transition matrices,
// trajectories, orthonormal state frames and transition counts.

namespace mpt::markov {

struct DirichletPrior {
  std::vector<double> alpha;

  static DirichletPrior symmetric(std::size_t num_states, double a = 0.05) {
    DirichletPrior p{std::vector<double>(num_states, a)};
    p.validate();
    return p;
  }

  std::size_t num_states() const { return alpha.size(); }
  double total() const { return std::accumulate(alpha.begin(), alpha.end(), 0.0); }

  void validate() const {
    if (alpha.empty()) throw ConfigError("Dirichlet prior needs at least one component");
    for (double a : alpha)
      if (!(a > 0.0) || !std::isfinite(a))
        throw ConfigError("Dirichlet concentration must be positive and finite");
  }
};

/// Row-stochastic |S|×|S| matrix, row-major.
struct TransitionMatrix {
  std::size_t num_states = 0;
  std::vector<double> probs;
  std::uint64_t seed = 0;

  double operator()(std::size_t i, std::size_t j) const { return probs[i * num_states + j]; }
  std::span<const double> row(std::size_t i) const {
    return {probs.data() + i * num_states, num_states};
  }
};

struct Trajectory {
  std::vector<int> states;
  std::size_t size() const { return states.size(); }
};

/// |S| rows of length d; orthonormal.
struct StateRepresentations {
  std::size_t num_states = 0;
  std::size_t dim = 0;
  std::vector<double> vectors;

  std::span<const double> row(std::size_t i) const { return {vectors.data() + i * dim, dim}; }
};

/// counts[i][j] = number of i → j transitions, row-major.
struct TransitionCounts {
  std::size_t num_states = 0;
  std::vector<std::uint64_t> counts;

  std::uint64_t operator()(std::size_t i, std::size_t j) const { return counts[i * num_states + j]; }
  std::uint64_t total() const {
    return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
  }
};

/// One draw from Dir(alpha) by Gamma normalization.
inline std::vector<double> sample_dirichlet_row(const DirichletPrior& prior, Xoshiro256pp& rng) {
  prior.validate();
  const std::size_t n = prior.num_states();
  std::vector<double> row(n);
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = rng.gamma(prior.alpha[j]);
    total += row[j];
  }
  if (total <= 0.0) {
    // Every Gamma draw underflowed (possible for tiny alpha); fall back to a
    // point mass on a uniformly chosen component, the alpha → 0 limit.
    std::fill(row.begin(), row.end(), 0.0);
    row[rng.below(n)] = 1.0;
    return row;
  }
  for (auto& v : row) v /= total;
  return row;
}

inline TransitionMatrix sample_transition_matrix(const DirichletPrior& prior, Xoshiro256pp& rng,
                                                 std::uint64_t seed_tag = 0) {
  const std::size_t n = prior.num_states();
  TransitionMatrix p{n, {}, seed_tag};
  p.probs.reserve(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = sample_dirichlet_row(prior, rng);
    p.probs.insert(p.probs.end(), row.begin(), row.end());
  }
  return p;
}

/// Trajectory of `length` states. The first state is uniform over states
/// unless `first_state` is given.
inline Trajectory sample_trajectory(const TransitionMatrix& p, std::size_t length, Xoshiro256pp& rng,
                                    int first_state = -1) {
  if (length < 2) throw ConfigError("trajectory length must be at least 2");
  if (first_state >= static_cast<int>(p.num_states))
    throw IndexError("initial state " + std::to_string(first_state) + " out of range");
  Trajectory traj;
  traj.states.resize(length);
  traj.states[0] = first_state >= 0 ? first_state : static_cast<int>(rng.below(p.num_states));
  for (std::size_t t = 1; t < length; ++t)
    traj.states[t] = static_cast<int>(rng.categorical(p.row(static_cast<std::size_t>(traj.states[t - 1]))));
  return traj;
}

/// Orthonormal frame: rows are the Q factor columns of a d×n standard
/// Gaussian matrix, with the sign fixed so that diag(R) > 0. Computed by
/// Gram-Schmidt with one re-orthogonalization pass, which yields exactly
/// that sign convention.
inline StateRepresentations sample_orthonormal_reps(std::size_t num_states, std::size_t dim,
                                                    Xoshiro256pp& rng) {
  if (num_states == 0) throw ConfigError("need at least one state");
  if (dim < num_states)
    throw ConfigError("orthonormal frame infeasible: hidden dim " + std::to_string(dim) +
                      " < num_states " + std::to_string(num_states));
  StateRepresentations reps{num_states, dim, std::vector<double>(num_states * dim)};
  // Column j of the Gaussian matrix is drawn contiguously as row j here.
  for (auto& v : reps.vectors) v = rng.normal();
  for (std::size_t j = 0; j < num_states; ++j) {
    double* q = reps.vectors.data() + j * dim;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t i = 0; i < j; ++i) {
        const double* qi = reps.vectors.data() + i * dim;
        double dot = 0.0;
        for (std::size_t k = 0; k < dim; ++k) dot += qi[k] * q[k];
        for (std::size_t k = 0; k < dim; ++k) q[k] -= dot * qi[k];
      }
    }
    double nrm = 0.0;
    for (std::size_t k = 0; k < dim; ++k) nrm += q[k] * q[k];
    nrm = std::sqrt(nrm);
    for (std::size_t k = 0; k < dim; ++k) q[k] /= nrm;
  }
  return reps;
}

inline TransitionCounts count_transitions(const Trajectory& traj, std::size_t num_states) {
  TransitionCounts c{num_states, std::vector<std::uint64_t>(num_states * num_states, 0)};
  for (std::size_t t = 0; t < traj.states.size(); ++t) {
    const int s = traj.states[t];
    if (s < 0 || static_cast<std::size_t>(s) >= num_states)
      throw IndexError("state " + std::to_string(s) + " at step " + std::to_string(t) +
                       " outside [0, " + std::to_string(num_states) + ")");
  }
  for (std::size_t t = 0; t + 1 < traj.states.size(); ++t)
    ++c.counts[static_cast<std::size_t>(traj.states[t]) * num_states +
               static_cast<std::size_t>(traj.states[t + 1])];
  return c;
}

}  // namespace mpt::markov
