#pragma once

#include <vector>

#include "mpt/rng.hpp"
#include "mpt/tensor.hpp"

namespace mpt::test {

template <typename T = double>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double sd = 1.0, bool requires_grad = true) {
  auto rng = make_stream(seed, Stream::kSynth, 999);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal() * sd);
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

/// Textbook triple loop, C[m×n] = A[m×k] · B[k×n].
inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                        std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

inline std::vector<double> transpose(const std::vector<double>& a, std::size_t rows, std::size_t cols) {
  std::vector<double> t(a.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

template <typename T>
std::vector<double> as_vec(const Tensor<T>& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

}  // namespace mpt::test
