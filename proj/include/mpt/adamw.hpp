#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mpt/errors.hpp"
#include "mpt/tensor.hpp"

namespace mpt {

/// A trainable tensor plus whether decoupled weight decay applies to it.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> tensor;
  bool decay = true;
};

struct AdamWHyper {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

/// AdamW with decoupled weight decay and bias-corrected moments.
///
/// The update per element is
///   p ← p − lr·wd·p
///   m ← β1·m + (1−β1)·g,  v ← β2·v + (1−β2)·g²
///   p ← p − lr · m̂ / (sqrt(v̂) + ε),  m̂ = m/(1−β1^t), v̂ = v/(1−β2^t)
/// Moments are kept in double regardless of the parameter precision.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Param<T>> params, AdamWHyper hyper) : params_(std::move(params)), hyper_(hyper) {
    if (!(hyper_.lr >= 0.0)) throw ConfigError("AdamW: lr must be non-negative");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  const std::vector<Param<T>>& params() const { return params_; }
  const AdamWHyper& hyper() const { return hyper_; }
  void set_lr(double lr) { hyper_.lr = lr; }
  long step_count() const { return t_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

  /// One update from the grads currently stored on the parameters. A
  /// parameter without a grad buffer is treated as having zero gradient.
  /// Throws DivergenceError naming the first parameter that became non-finite.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      auto values = p.tensor.mutable_values();
      const auto grad = p.tensor.grad();
      if (!grad.empty() && grad.size() != values.size())
        throw DimensionError("AdamW: grad/param size mismatch for " + p.name);
      auto& m = m_[i];
      auto& v = v_[i];
      const double decay = p.decay ? hyper_.lr * hyper_.weight_decay : 0.0;
      for (std::size_t j = 0; j < values.size(); ++j) {
        const double g = grad.empty() ? 0.0 : static_cast<double>(grad[j]);
        double x = static_cast<double>(values[j]);
        x -= decay * x;
        m[j] = hyper_.beta1 * m[j] + (1.0 - hyper_.beta1) * g;
        v[j] = hyper_.beta2 * v[j] + (1.0 - hyper_.beta2) * g * g;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        x -= hyper_.lr * mhat / (std::sqrt(vhat) + hyper_.eps);
        values[j] = static_cast<T>(x);
      }
      if (!p.tensor.all_finite())
        throw DivergenceError("non-finite value in parameter '" + p.name + "' after step " +
                              std::to_string(t_));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<Param<T>> params_;
  AdamWHyper hyper_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

/// Euclidean norm over every parameter gradient.
template <typename T>
double global_grad_norm(const std::vector<Param<T>>& params) {
  double ss = 0.0;
  for (const auto& p : params)
    for (T g : p.tensor.grad()) ss += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(ss);
}

/// Rescales all gradients so their global norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::vector<Param<T>>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (!std::isfinite(norm)) throw DivergenceError("non-finite gradient norm");
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (auto& p : params)
      if (p.tensor.has_grad())
        for (auto& g : p.tensor.mutable_grad()) g = static_cast<T>(static_cast<double>(g) * s);
  }
  return norm;
}

}  // namespace mpt
