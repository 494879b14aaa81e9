#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mpt/ops.hpp"
#include "mpt/rng.hpp"
#include "mpt/tensor.hpp"

namespace mpt::rec {

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kAdaptorNormEps = 1e-5;

/// Input adaptor: RMSNorm, then W₂·LeakyReLU(W₁·x + b₁) + b₂.
template <typename T>
struct AdaptorWeights {
  Tensor<T> gain;  // d_text
  Tensor<T> w1;    // d_text × h1
  Tensor<T> b1;    // h1
  Tensor<T> w2;    // h1 × d
  Tensor<T> b2;    // d

  std::size_t input_dim() const { return w1.dim(0); }
  std::size_t output_dim() const { return w2.dim(1); }

  std::vector<std::pair<std::string, Tensor<T>>> named() const {
    return {{"adaptor.gain", gain}, {"adaptor.w1", w1}, {"adaptor.b1", b1},
            {"adaptor.w2", w2},     {"adaptor.b2", b2}};
  }

  AdaptorWeights clone() const { return {gain.clone(), w1.clone(), b1.clone(), w2.clone(), b2.clone()}; }
};

/// W₁ ~ N(0, 1/d_text); b₂ ~ N(0, 1/d) is a shared direction of about unit
/// norm and W₂ ~ N(0, 0.02/(h1·d)) a small per-item spread around it, so an
/// untrained adaptor scores the corpus nearly uniformly; b₁ = 0, gain 1.
template <typename T>
AdaptorWeights<T> init_adaptor(std::size_t d_text, std::size_t d, std::size_t h1, std::uint64_t seed) {
  if (d_text == 0 || d == 0 || h1 == 0) throw ConfigError("adaptor dimensions must be positive");
  auto rng = make_stream(seed, Stream::kAdaptorInit, 0);
  auto normal = [&rng](Shape shape, double sd) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal() * sd);
    return Tensor<T>(std::move(shape), std::move(v), true);
  };
  AdaptorWeights<T> w;
  w.gain = Tensor<T>::full({d_text}, T(1), true);
  w.w1 = normal({d_text, h1}, 1.0 / std::sqrt(static_cast<double>(d_text)));
  w.b1 = Tensor<T>::zeros({h1}, true);
  w.w2 = normal({h1, d}, 0.1 * std::sqrt(2.0 / static_cast<double>(h1 * d)));
  w.b2 = normal({d}, 1.0 / std::sqrt(static_cast<double>(d)));
  return w;
}

/// Maps raw item embeddings [n×d_text] to backbone space [n×d].
template <typename T>
Tensor<T> adaptor_forward(Tape<T>& tape, const AdaptorWeights<T>& w, const Tensor<T>& items) {
  if (items.rank() != 2 || items.dim(1) != w.input_dim())
    throw DimensionError("adaptor: expected [n×" + std::to_string(w.input_dim()) + "], got " +
                         shape_str(items.shape()));
  auto h = rmsnorm(tape, items, w.gain, static_cast<T>(kAdaptorNormEps));
  h = add_bias(tape, linear(tape, h, w.w1), w.b1);
  h = leaky_relu(tape, h, static_cast<T>(kLeakySlope));
  return add_bias(tape, linear(tape, h, w.w2), w.b2);
}

}  // namespace mpt::rec
