#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mpt/errors.hpp"
#include "mpt/tensor.hpp"

namespace mpt {

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` builds the loss on the tape it is given and must read the tensors in
/// `wrt` by handle, since coordinates are perturbed in place. Returns
/// max over coordinates of |analytic − numeric| / max(1, |analytic|).
/// Finite checking is on for every evaluation, so a NaN/Inf raises
/// NonFiniteError naming the op that produced it.
inline double gradient_check(const std::function<Tensor<double>(Tape<double>&)>& f,
                             std::vector<Tensor<double>> wrt, double h = 1e-5) {
  if (!(h >= 1e-6 && h <= 1e-3)) throw ConfigError("gradient_check: h must lie in [1e-6, 1e-3]");
  for (auto& x : wrt) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    tape.set_check_finite(true);
    auto loss = f(tape);
    if (loss.numel() != 1) throw ContractError("gradient_check: f must be scalar-valued");
    tape.backward(loss);
    for (auto& x : wrt) {
      x.ensure_grad();
      analytic.emplace_back(x.grad().begin(), x.grad().end());
    }
  }
  auto eval = [&f]() {
    Tape<double> tape;
    tape.set_recording(false);
    tape.set_check_finite(true);
    return f(tape).item();
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    auto values = wrt[k].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = eval();
      values[i] = saved - h;
      const double down = eval();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  for (auto& x : wrt) x.zero_grad();
  return worst;
}

/// Single-input convenience form.
inline double gradient_check(
    const std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)>& f,
    Tensor<double> x, double h = 1e-5) {
  return gradient_check([&f, x](Tape<double>& tape) { return f(tape, x); },
                        std::vector<Tensor<double>>{x}, h);
}

}  // namespace mpt
