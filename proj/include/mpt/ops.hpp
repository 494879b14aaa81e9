#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mpt/errors.hpp"
#include "mpt/rng.hpp"
#include "mpt/tensor.hpp"

// Differentiable operations. Each op computes its output eagerly and, when
// any input requires a gradient and the tape is recording, appends a node
// whose backward rule accumulates into the inputs' grad buffers.

namespace mpt {

namespace kernels {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C[m×n] (+)= op(A) · op(B), row-major. A is k×m when trans_a, else m×k;
/// B is n×k when trans_b, else k×n.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  using Map = Eigen::Map<const RowMatrix<T>>;
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  Eigen::Map<RowMatrix<T>> C(c, M, N);
  if (!accumulate) C.setZero();
  if (!trans_a && !trans_b)
    C.noalias() += Map(a, M, K) * Map(b, K, N);
  else if (!trans_a && trans_b)
    C.noalias() += Map(a, M, K) * Map(b, N, K).transpose();
  else if (trans_a && !trans_b)
    C.noalias() += Map(a, K, M).transpose() * Map(b, K, N);
  else
    C.noalias() += Map(a, K, M).transpose() * Map(b, N, K).transpose();
}

}  // namespace kernels

namespace detail {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename T>
Tensor<T> make_output(Tape<T>& tape, Shape shape, std::vector<T> values, bool tracked) {
  return Tensor<T>(std::move(shape), std::move(values), tracked && tape.recording());
}

}  // namespace detail

/// x[..., k] · W → [..., n], where W is k×n (or n×k when transpose_w).
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, bool transpose_w = false) {
  if (w.rank() != 2) throw DimensionError("linear: weight must be rank 2, got " + shape_str(w.shape()));
  const std::size_t k = x.dim(-1);
  const std::size_t wk = transpose_w ? w.dim(1) : w.dim(0);
  const std::size_t n = transpose_w ? w.dim(0) : w.dim(1);
  if (k != wk)
    throw DimensionError("matmul: inner extents differ, " + shape_str(x.shape()) + " by " +
                         shape_str(w.shape()));
  const std::size_t m = x.numel() / k;
  Shape shape = x.shape();
  shape.back() = n;
  std::vector<T> out(m * n);
  kernels::gemm(false, transpose_w, m, n, k, x.data(), w.data(), out.data(), false);
  const bool tracked = tape.wants(x, w);
  auto y = detail::make_output(tape, std::move(shape), std::move(out), tracked);
  tape.verify("matmul", y);
  if (tracked) {
    tape.record("matmul", {x, w}, y, [x, w, y, m, n, k, transpose_w]() mutable {
      const T* dy = y.grad().data();
      if (x.requires_grad())
        kernels::gemm(false, !transpose_w, m, k, n, dy, w.data(), x.mutable_grad().data(), true);
      if (w.requires_grad()) {
        if (transpose_w)
          kernels::gemm(true, false, n, k, m, dy, x.data(), w.mutable_grad().data(), true);
        else
          kernels::gemm(true, false, k, n, m, x.data(), dy, w.mutable_grad().data(), true);
      }
    });
  }
  return y;
}

/// Plain 2-D product a[m×k] · b[k×n].
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul: operands must be rank 2, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  return linear(tape, a, b, false);
}

/// Batched product a[B×m×k] · b[B×k×n] (b is B×n×k when transpose_b).
template <typename T>
Tensor<T> batched_matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b,
                         bool transpose_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
    throw DimensionError("batched_matmul: incompatible " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  if (k != bk)
    throw DimensionError("batched_matmul: inner extents differ, " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i)
    kernels::gemm(false, transpose_b, m, n, k, a.data() + i * m * k, b.data() + i * k * n,
                  out.data() + i * m * n, false);
  const bool tracked = tape.wants(a, b);
  auto y = detail::make_output(tape, {batch, m, n}, std::move(out), tracked);
  tape.verify("batched_matmul", y);
  if (tracked) {
    tape.record("batched_matmul", {a, b}, y, [a, b, y, batch, m, n, k, transpose_b]() mutable {
      const T* dy = y.grad().data();
      for (std::size_t i = 0; i < batch; ++i) {
        const T* dyi = dy + i * m * n;
        if (a.requires_grad())
          kernels::gemm(false, !transpose_b, m, k, n, dyi, b.data() + i * k * n,
                        a.mutable_grad().data() + i * m * k, true);
        if (b.requires_grad()) {
          if (transpose_b)
            kernels::gemm(true, false, n, k, m, dyi, a.data() + i * m * k,
                          b.mutable_grad().data() + i * k * n, true);
          else
            kernels::gemm(true, false, k, n, m, a.data() + i * m * k, dyi,
                          b.mutable_grad().data() + i * k * n, true);
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  const bool tracked = tape.wants(a, b);
  auto y = detail::make_output(tape, a.shape(), std::move(out), tracked);
  tape.verify("add", y);
  if (tracked) {
    tape.record("add", {a, b}, y, [a, b, y]() mutable {
      const auto dy = y.grad();
      if (a.requires_grad()) {
        auto g = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
      }
      if (b.requires_grad()) {
        auto g = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
      }
    });
  }
  return y;
}

/// x[..., n] + bias[n] broadcast over leading axes.
template <typename T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t n = x.dim(-1);
  if (bias.numel() != n)
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " vs " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x.data()[r * n + j] + bias.data()[j];
  const bool tracked = tape.wants(x, bias);
  auto y = detail::make_output(tape, x.shape(), std::move(out), tracked);
  tape.verify("add_bias", y);
  if (tracked) {
    tape.record("add_bias", {x, bias}, y, [x, bias, y, rows, n]() mutable {
      const auto dy = y.grad();
      if (x.requires_grad()) {
        auto g = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
      }
      if (bias.requires_grad()) {
        auto g = bias.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) g[j] += dy[r * n + j];
      }
    });
  }
  return y;
}

/// Elementwise product.
template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  const bool tracked = tape.wants(a, b);
  auto y = detail::make_output(tape, a.shape(), std::move(out), tracked);
  tape.verify("mul", y);
  if (tracked) {
    tape.record("mul", {a, b}, y, [a, b, y]() mutable {
      const auto dy = y.grad();
      if (a.requires_grad()) {
        auto g = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        auto g = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * a.data()[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  const bool tracked = tape.wants(x);
  auto y = detail::make_output(tape, x.shape(), std::move(out), tracked);
  tape.verify("scale", y);
  if (tracked) {
    tape.record("scale", {x}, y, [x, y, factor]() mutable {
      const auto dy = y.grad();
      auto g = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * factor;
    });
  }
  return y;
}

/// Sum of all elements → shape [1].
template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.values()) acc += v;
  const bool tracked = tape.wants(x);
  auto y = detail::make_output(tape, {1}, {acc}, tracked);
  tape.verify("sum", y);
  if (tracked) {
    tape.record("sum", {x}, y, [x, y]() mutable {
      const T dy = y.grad()[0];
      for (auto& g : x.mutable_grad()) g += dy;
    });
  }
  return y;
}

/// Same values under a new shape of equal element count.
template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  std::vector<T> out(x.values().begin(), x.values().end());
  const bool tracked = tape.wants(x);
  auto y = detail::make_output(tape, std::move(shape), std::move(out), tracked);
  if (tracked) {
    tape.record("reshape", {x}, y, [x, y]() mutable {
      const auto dy = y.grad();
      auto g = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
    });
  }
  return y;
}

/// Softmax over the last axis with per-row max subtraction. With `causal`,
/// x is read as [..., T, T] and entries above the diagonal get probability 0.
template <typename T>
Tensor<T> softmax_rows(Tape<T>& tape, const Tensor<T>& x, bool causal = false) {
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.numel() / n;
  if (causal && (x.rank() < 2 || x.dim(-2) != n))
    throw DimensionError("causal softmax needs square trailing axes, got " + shape_str(x.shape()));
  std::vector<T> out(x.numel(), T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t width = causal ? (r % n) + 1 : n;
    const T* in = x.data() + r * n;
    T* o = out.data() + r * n;
    T mx = in[0];
    for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, in[j]);
    T total = 0;
    for (std::size_t j = 0; j < width; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    const T inv = T(1) / total;
    for (std::size_t j = 0; j < width; ++j) o[j] *= inv;
  }
  const bool tracked = tape.wants(x);
  auto y = detail::make_output(tape, x.shape(), std::move(out), tracked);
  tape.verify("softmax", y);
  if (tracked) {
    tape.record("softmax", {x}, y, [x, y, rows, n, causal]() mutable {
      const auto dy = y.grad();
      const auto p = y.values();
      auto g = x.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t width = causal ? (r % n) + 1 : n;
        const std::size_t base = r * n;
        T dot = 0;
        for (std::size_t j = 0; j < width; ++j) dot += dy[base + j] * p[base + j];
        for (std::size_t j = 0; j < width; ++j) g[base + j] += p[base + j] * (dy[base + j] - dot);
      }
    });
  }
  return y;
}

/// y = gain ⊙ x / sqrt(mean(x²) + eps) over the last axis.
template <typename T>
Tensor<T> rmsnorm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  const std::size_t d = x.dim(-1);
  if (gain.numel() != d)
    throw DimensionError("rmsnorm: gain " + shape_str(gain.shape()) + " vs input " +
                         shape_str(x.shape()));
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  std::vector<T> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * d;
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += in[j] * in[j];
    const T mean_sq = ss / static_cast<T>(d);
    // eps = 0 on an all-zero row would divide by zero; treat the row as a fixed point.
    const T ir = (mean_sq + eps) > T(0) ? T(1) / std::sqrt(mean_sq + eps) : T(0);
    inv_rms[r] = ir;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = gain.data()[j] * in[j] * ir;
  }
  const bool tracked = tape.wants(x, gain);
  auto y = detail::make_output(tape, x.shape(), std::move(out), tracked);
  tape.verify("rmsnorm", y);
  if (tracked) {
    tape.record("rmsnorm", {x, gain}, y,
                [x, gain, y, rows, d, inv_rms = std::move(inv_rms)]() mutable {
                  const auto dy = y.grad();
                  const T* g = gain.data();
                  if (x.requires_grad()) {
                    auto gx = x.mutable_grad();
                    for (std::size_t r = 0; r < rows; ++r) {
                      const T* in = x.data() + r * d;
                      const T ir = inv_rms[r];
                      T dot = 0;
                      for (std::size_t j = 0; j < d; ++j) dot += dy[r * d + j] * g[j] * in[j];
                      const T coeff = ir * ir * ir * dot / static_cast<T>(d);
                      for (std::size_t j = 0; j < d; ++j)
                        gx[r * d + j] += ir * g[j] * dy[r * d + j] - coeff * in[j];
                    }
                  }
                  if (gain.requires_grad()) {
                    auto gg = gain.mutable_grad();
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < d; ++j)
                        gg[j] += dy[r * d + j] * x.data()[r * d + j] * inv_rms[r];
                  }
                });
  }
  return y;
}

/// x · sigmoid(x)
template <typename T>
Tensor<T> silu(Tape<T>& tape, const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.data()[i];
    out[i] = v / (T(1) + std::exp(-v));
  }
  const bool tracked = tape.wants(x);
  auto y = detail::make_output(tape, x.shape(), std::move(out), tracked);
  tape.verify("silu", y);
  if (tracked) {
    tape.record("silu", {x}, y, [x, y]() mutable {
      const auto dy = y.grad();
      auto g = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = x.data()[i];
        const T s = T(1) / (T(1) + std::exp(-v));
        g[i] += dy[i] * s * (T(1) + v * (T(1) - s));
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> leaky_relu(Tape<T>& tape, const Tensor<T>& x, T slope = T(0.01)) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.data()[i];
    out[i] = v >= T(0) ? v : slope * v;
  }
  const bool tracked = tape.wants(x);
  auto y = detail::make_output(tape, x.shape(), std::move(out), tracked);
  tape.verify("leaky_relu", y);
  if (tracked) {
    tape.record("leaky_relu", {x}, y, [x, y, slope]() mutable {
      const auto dy = y.grad();
      auto g = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += x.data()[i] >= T(0) ? dy[i] : slope * dy[i];
    });
  }
  return y;
}

/// Target value marking a row that does not contribute to the loss.
inline constexpr int kIgnoreTarget = -1;

/// Mean over rows of −log softmax(logits)[target]; logits are [n×c] (any
/// leading shape flattened). Rows whose target is kIgnoreTarget are skipped.
template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> targets) {
  const std::size_t c = logits.dim(-1);
  const std::size_t n = logits.numel() / c;
  if (targets.size() != n)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " rows");
  std::vector<T> probs(logits.numel());
  std::size_t counted = 0;
  T total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const int t = targets[r];
    if (t == kIgnoreTarget) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= c)
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(c) + ")");
    const T* in = logits.data() + r * c;
    T* p = probs.data() + r * c;
    T mx = in[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, in[j]);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) {
      p[j] = std::exp(in[j] - mx);
      z += p[j];
    }
    for (std::size_t j = 0; j < c; ++j) p[j] /= z;
    total += std::log(z) + mx - in[t];
    ++counted;
  }
  const T loss = counted ? total / static_cast<T>(counted) : T(0);
  const bool tracked = tape.wants(logits);
  auto y = detail::make_output(tape, {1}, {loss}, tracked);
  tape.verify("cross_entropy", y);
  if (tracked && counted) {
    std::vector<int> tgt(targets.begin(), targets.end());
    tape.record("cross_entropy", {logits}, y,
                [logits, y, n, c, counted, tgt = std::move(tgt), probs = std::move(probs)]() mutable {
                  const T scale_ = y.grad()[0] / static_cast<T>(counted);
                  auto g = logits.mutable_grad();
                  for (std::size_t r = 0; r < n; ++r) {
                    if (tgt[r] == kIgnoreTarget) continue;
                    for (std::size_t j = 0; j < c; ++j) g[r * c + j] += scale_ * probs[r * c + j];
                    g[r * c + static_cast<std::size_t>(tgt[r])] -= scale_;
                  }
                });
  }
  return y;
}

/// Inverted dropout; identity when p == 0.
template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double p, Xoshiro256pp& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.uniform() < p ? T(0) : keep_scale;
    out[i] = x.data()[i] * mask[i];
  }
  const bool tracked = tape.wants(x);
  auto y = detail::make_output(tape, x.shape(), std::move(out), tracked);
  if (tracked) {
    tape.record("dropout", {x}, y, [x, y, mask = std::move(mask)]() mutable {
      const auto dy = y.grad();
      auto g = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * mask[i];
    });
  }
  return y;
}

/// Rotary position encoding on x[N×T×head_dim]: element pair (2i, 2i+1) at
/// position t is rotated by t · base^(−2i/head_dim).
template <typename T>
Tensor<T> rope(Tape<T>& tape, const Tensor<T>& x, double base) {
  if (x.rank() != 3) throw DimensionError("rope expects [N×T×head_dim], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), len = x.dim(1), hd = x.dim(2);
  if (hd % 2 != 0) throw ConfigError("rope: head_dim must be even, got " + std::to_string(hd));
  std::vector<T> cosv(len * hd / 2), sinv(len * hd / 2);
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t i = 0; i < hd / 2; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      const double ang = static_cast<double>(t) * freq;
      cosv[t * hd / 2 + i] = static_cast<T>(std::cos(ang));
      sinv[t * hd / 2 + i] = static_cast<T>(std::sin(ang));
    }
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t t = 0; t < len; ++t) {
      const T* in = x.data() + (b * len + t) * hd;
      T* o = out.data() + (b * len + t) * hd;
      for (std::size_t i = 0; i < hd / 2; ++i) {
        const T c = cosv[t * hd / 2 + i], s = sinv[t * hd / 2 + i];
        o[2 * i] = in[2 * i] * c - in[2 * i + 1] * s;
        o[2 * i + 1] = in[2 * i] * s + in[2 * i + 1] * c;
      }
    }
  const bool tracked = tape.wants(x);
  auto y = detail::make_output(tape, x.shape(), std::move(out), tracked);
  tape.verify("rope", y);
  if (tracked) {
    tape.record("rope", {x}, y,
                [x, y, n, len, hd, cosv = std::move(cosv), sinv = std::move(sinv)]() mutable {
                  const auto dy = y.grad();
                  auto g = x.mutable_grad();
                  for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t t = 0; t < len; ++t) {
                      const std::size_t off = (b * len + t) * hd;
                      for (std::size_t i = 0; i < hd / 2; ++i) {
                        const T c = cosv[t * hd / 2 + i], s = sinv[t * hd / 2 + i];
                        const T d0 = dy[off + 2 * i], d1 = dy[off + 2 * i + 1];
                        g[off + 2 * i] += d0 * c + d1 * s;
                        g[off + 2 * i + 1] += -d0 * s + d1 * c;
                      }
                    }
                });
  }
  return y;
}

/// [B·T × H·hd] (or [B×T×H·hd]) → [B·H × T × hd].
template <typename T>
Tensor<T> split_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t batch, std::size_t len,
                      std::size_t heads) {
  const std::size_t d = x.dim(-1);
  if (x.numel() != batch * len * d || d % heads != 0)
    throw DimensionError("split_heads: " + shape_str(x.shape()) + " with " + std::to_string(heads) +
                         " heads");
  const std::size_t hd = d / heads;
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(x.data() + (b * len + t) * d + h * hd, hd,
                    out.data() + ((b * heads + h) * len + t) * hd);
  const bool tracked = tape.wants(x);
  auto y = detail::make_output(tape, {batch * heads, len, hd}, std::move(out), tracked);
  if (tracked) {
    tape.record("split_heads", {x}, y, [x, y, batch, len, heads, hd, d]() mutable {
      const auto dy = y.grad();
      auto g = x.mutable_grad();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < len; ++t)
          for (std::size_t h = 0; h < heads; ++h) {
            const T* src = dy.data() + ((b * heads + h) * len + t) * hd;
            T* dst = g.data() + (b * len + t) * d + h * hd;
            for (std::size_t i = 0; i < hd; ++i) dst[i] += src[i];
          }
    });
  }
  return y;
}

/// Inverse of split_heads: [B·H × T × hd] → [B·T × H·hd].
template <typename T>
Tensor<T> merge_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t batch, std::size_t heads) {
  if (x.rank() != 3 || x.dim(0) != batch * heads)
    throw DimensionError("merge_heads: " + shape_str(x.shape()));
  const std::size_t len = x.dim(1), hd = x.dim(2), d = heads * hd;
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < len; ++t)
        std::copy_n(x.data() + ((b * heads + h) * len + t) * hd, hd,
                    out.data() + (b * len + t) * d + h * hd);
  const bool tracked = tape.wants(x);
  auto y = detail::make_output(tape, {batch * len, d}, std::move(out), tracked);
  if (tracked) {
    tape.record("merge_heads", {x}, y, [x, y, batch, len, heads, hd, d]() mutable {
      const auto dy = y.grad();
      auto g = x.mutable_grad();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t t = 0; t < len; ++t) {
            const T* src = dy.data() + (b * len + t) * d + h * hd;
            T* dst = g.data() + ((b * heads + h) * len + t) * hd;
            for (std::size_t i = 0; i < hd; ++i) dst[i] += src[i];
          }
    });
  }
  return y;
}

/// Rows of table[n×d] selected by index → [len×d]; gradient scatter-adds.
template <typename T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& table, std::span<const int> index) {
  if (table.rank() != 2) throw DimensionError("gather_rows: table must be rank 2");
  const std::size_t n = table.dim(0), d = table.dim(1);
  std::vector<T> out(index.size() * d);
  for (std::size_t r = 0; r < index.size(); ++r) {
    const int k = index[r];
    if (k < 0 || static_cast<std::size_t>(k) >= n)
      throw IndexError("gather_rows: index " + std::to_string(k) + " outside [0, " +
                       std::to_string(n) + ")");
    std::copy_n(table.data() + static_cast<std::size_t>(k) * d, d, out.data() + r * d);
  }
  const bool tracked = tape.wants(table);
  auto y = detail::make_output(tape, {index.size(), d}, std::move(out), tracked);
  if (tracked) {
    std::vector<int> idx(index.begin(), index.end());
    tape.record("gather_rows", {table}, y, [table, y, d, idx = std::move(idx)]() mutable {
      const auto dy = y.grad();
      auto g = table.mutable_grad();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        T* dst = g.data() + static_cast<std::size_t>(idx[r]) * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += dy[r * d + j];
      }
    });
  }
  return y;
}

/// Norm below which a row is treated as the zero vector by l2_normalize_rows.
inline constexpr double kZeroNormGuard = 1e-12;

/// Each row divided by its Euclidean norm; rows with norm < 1e-12 map to 0.
template <typename T>
Tensor<T> l2_normalize_rows(Tape<T>& tape, const Tensor<T>& x) {
  const std::size_t d = x.dim(-1);
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel(), T(0));
  std::vector<T> inv_norm(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * d;
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += in[j] * in[j];
    const T nrm = std::sqrt(ss);
    if (static_cast<double>(nrm) < kZeroNormGuard) continue;
    inv_norm[r] = T(1) / nrm;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = in[j] * inv_norm[r];
  }
  const bool tracked = tape.wants(x);
  auto y = detail::make_output(tape, x.shape(), std::move(out), tracked);
  tape.verify("l2_normalize", y);
  if (tracked) {
    tape.record("l2_normalize", {x}, y, [x, y, rows, d, inv_norm = std::move(inv_norm)]() mutable {
      const auto dy = y.grad();
      const auto yv = y.values();
      auto g = x.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        if (inv_norm[r] == T(0)) continue;
        T dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += yv[r * d + j] * dy[r * d + j];
        for (std::size_t j = 0; j < d; ++j)
          g[r * d + j] += (dy[r * d + j] - yv[r * d + j] * dot) * inv_norm[r];
      }
    });
  }
  return y;
}

}  // namespace mpt
