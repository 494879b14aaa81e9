#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mpt/errors.hpp"

namespace mpt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty while absent
  bool requires_grad = false;
  std::string name;
};

}  // namespace detail

/// Dense row-major array with an optional gradient buffer.
///
/// Copies share storage (handle semantics), so a tensor captured by a tape
/// node and the caller's handle observe the same gradient. Use clone() for
/// an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : s_(std::make_shared<detail::TensorStorage<T>>()) {
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != values.size())
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    s_->shape = std::move(shape);
    s_->values = std::move(values);
    s_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t numel() const { return s_->values.size(); }

  /// Extent of axis i; negative i counts from the back.
  std::size_t dim(int i) const {
    const int r = static_cast<int>(rank());
    const int k = i < 0 ? r + i : i;
    if (k < 0 || k >= r) throw DimensionError("axis out of range for " + shape_str(shape()));
    return s_->shape[static_cast<std::size_t>(k)];
  }

  std::span<const T> values() const { return s_->values; }
  // Mutation is for parameter updates between tape evaluations only.
  std::span<T> mutable_values() { return s_->values; }
  const T* data() const { return s_->values.data(); }
  T* mutable_data() { return s_->values.data(); }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return s_->values[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) { s_->requires_grad = on; }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const T> grad() const { return s_->grad; }
  // Gradient buffers belong to the shared storage, so a const handle (for
  // instance one captured by a tape node) may still accumulate into them.
  std::span<T> mutable_grad() const {
    ensure_grad();
    return s_->grad;
  }
  void ensure_grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->values.size(), T(0));
  }
  void zero_grad() { s_->grad.clear(); }

  const std::string& name() const { return s_->name; }
  void set_name(std::string n) { s_->name = std::move(n); }

  Tensor clone() const {
    Tensor out(shape(), s_->values, requires_grad());
    out.set_name(name());
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> v(numel());
    std::transform(s_->values.begin(), s_->values.end(), v.begin(),
                   [](T x) { return static_cast<U>(x); });
    Tensor<U> out(shape(), std::move(v), requires_grad());
    out.set_name(name());
    return out;
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

  bool all_finite() const {
    return std::all_of(s_->values.begin(), s_->values.end(),
                       [](T x) { return std::isfinite(x); });
  }

 private:
  std::shared_ptr<detail::TensorStorage<T>> s_;
};

/// Ordered record of differentiable operations.
///
/// Nodes are appended as operations execute, so inputs always precede the
/// node that consumes them; backward() walks the nodes in exact reverse
/// order. A tape belongs to one thread.
template <typename T>
class Tape {
 public:
  struct Node {
    const char* op;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  // When enabled every op output (and every gradient after backward) is
  // scanned for NaN/Inf and the offending op is named in the error.
  bool check_finite() const { return check_finite_; }
  void set_check_finite(bool on) { check_finite_ = on; }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

  /// Whether an op over these inputs must be recorded.
  template <typename... Ts>
  bool wants(const Ts&... ins) const {
    return recording_ && (ins.requires_grad() || ...);
  }

  void record(const char* op, std::vector<Tensor<T>> inputs, Tensor<T> output,
              std::function<void()> backward) {
    nodes_.push_back(Node{op, std::move(inputs), std::move(output), std::move(backward)});
  }

  void verify(const char* op, const Tensor<T>& out) const {
    if (check_finite_ && !out.all_finite())
      throw NonFiniteError(std::string("non-finite output from op '") + op + "'");
  }

  /// Populates grad on every requires_grad tensor reachable from `loss`.
  /// Gradients accumulate additively, so a tensor consumed twice receives
  /// the sum of both branch contributions.
  void backward(Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) throw ContractError("backward on a tensor that is not on the tape");
    loss.mutable_grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      it->backward();
      if (check_finite_) {
        for (auto& in : it->inputs) {
          if (!in.has_grad()) continue;
          for (T g : in.grad())
            if (!std::isfinite(g))
              throw NonFiniteError(std::string("non-finite gradient from op '") + it->op + "'");
        }
      }
    }
  }

 private:
  std::vector<Node> nodes_;
  bool recording_ = true;
  bool check_finite_ = false;
};

}  // namespace mpt
