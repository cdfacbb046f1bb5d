// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hyperfield {

using Index = std::int64_t;
using Shape = std::vector<Index>;

template <class S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Buffer = Eigen::Array<S, Eigen::Dynamic, 1>;
template <class S>
using MatrixMap = Eigen::Map<RowMatrix<S>>;
template <class S>
using ConstMatrixMap = Eigen::Map<const RowMatrix<S>>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

template <class S>
struct Node {
  Shape shape;
  Buffer<S> value;
  Buffer<S> grad;  // empty until something accumulates into it
  bool requires_grad = false;

  template <class Derived>
  void accumulate(const Eigen::ArrayBase<Derived>& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

inline bool& finite_checks_flag() {
  static bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Toggles the post-op NaN/Inf guard. On by default.
inline void set_finite_checks(bool enabled) { detail::finite_checks_flag() = enabled; }
inline bool finite_checks() { return detail::finite_checks_flag(); }

/// Shared handle to an n-dimensional row-major array that can take part in a
/// gradient tape. Copies alias the same storage, as with framework tensors.
template <class S>
class Tensor {
 public:
  using Scalar = S;
  using NodePtr = std::shared_ptr<detail::Node<S>>;

  Tensor() = default;

  explicit Tensor(Shape shape) : node_(std::make_shared<detail::Node<S>>()) {
    for (Index d : shape) {
      if (d < 0) throw ShapeError("negative extent in " + to_string(shape));
    }
    node_->value = Buffer<S>::Zero(numel(shape));
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, Buffer<S> values) : node_(std::make_shared<detail::Node<S>>()) {
    if (numel(shape) != values.size()) {
      throw ShapeError("value count " + std::to_string(values.size()) + " does not fill " +
                       to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, S v) {
    Tensor t(std::move(shape));
    t.node_->value.setConstant(v);
    return t;
  }
  static Tensor ones(Shape shape) { return full(std::move(shape), S(1)); }
  static Tensor scalar(S v) { return full({}, v); }
  static Tensor from(Shape shape, const std::vector<S>& values) {
    Buffer<S> b(static_cast<Index>(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) b[static_cast<Index>(i)] = values[i];
    return Tensor(std::move(shape), std::move(b));
  }
  static Tensor from(Shape shape, std::initializer_list<S> values) {
    return from(std::move(shape), std::vector<S>(values));
  }
  template <class Derived>
  static Tensor from_matrix(const Eigen::MatrixBase<Derived>& m) {
    Tensor t({static_cast<Index>(m.rows()), static_cast<Index>(m.cols())});
    t.matrix() = m.template cast<S>();
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const NodePtr& node() const { return node_; }

  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index size() const { return node_->value.size(); }
  Index dim(Index axis) const { return node_->shape.at(static_cast<std::size_t>(axis)); }
  Index rows() const { return matrix_rows(); }
  Index cols() const { return matrix_cols(); }

  const Buffer<S>& values() const { return node_->value; }
  Buffer<S>& values() { return node_->value; }
  const S* data() const { return node_->value.data(); }
  S* data() { return node_->value.data(); }
  S at(Index i) const { return node_->value[i]; }
  S item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  // Rank 0 views as 1x1, rank 1 as a single row, rank >= 3 as [lead x last].
  ConstMatrixMap<S> matrix() const {
    return ConstMatrixMap<S>(node_->value.data(), matrix_rows(), matrix_cols());
  }
  MatrixMap<S> matrix() { return MatrixMap<S>(node_->value.data(), matrix_rows(), matrix_cols()); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() != 0; }
  const Buffer<S>& grad() const { return node_->grad; }
  ConstMatrixMap<S> grad_matrix() const {
    return ConstMatrixMap<S>(node_->grad.data(), matrix_rows(), matrix_cols());
  }
  void zero_grad() { node_->grad.resize(0); }

  Tensor detach() const { return Tensor(shape(), values()); }

  template <class T>
  Tensor<T> cast() const {
    return Tensor<T>(shape(), values().template cast<T>());
  }

 private:
  Index matrix_rows() const {
    if (rank() <= 1) return 1;
    return size() / node_->shape.back();
  }
  Index matrix_cols() const {
    if (rank() == 0) return 1;
    return node_->shape.back();
  }

  NodePtr node_;
};

template <class S>
std::ostream& operator<<(std::ostream& os, const Tensor<S>& t) {
  os << "Tensor" << to_string(t.shape()) << "\n" << t.matrix();
  return os;
}

/// Ordered record of differentiable operations. Entries are appended in
/// execution order, so every entry's inputs precede it.
template <class S>
class Tape {
 public:
  using Backward = std::function<void(const Buffer<S>& grad_out)>;

  void record(const Tensor<S>& out, Backward fn) {
    if (consumed_) {
      consumed_ = false;
    }
    entries_.push_back({out.node(), std::move(fn)});
  }

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }
  void clear() {
    entries_.clear();
    consumed_ = false;
  }

  /// Accumulates d(loss)/d(x) into every tensor upstream of `loss`, then
  /// consumes the tape.
  void backward(const Tensor<S>& loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw TapeError("backward() needs a scalar loss");
    }
    if (consumed_ && entries_.empty()) {
      throw TapeError("tape already consumed; record a new forward pass first");
    }
    std::ptrdiff_t start = -1;
    for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(entries_.size()) - 1; i >= 0; --i) {
      if (entries_[static_cast<std::size_t>(i)].output == loss.node()) {
        start = i;
        break;
      }
    }
    if (start < 0) throw TapeError("loss is detached from the tape");

    loss.node()->accumulate(Buffer<S>::Ones(1));
    for (std::ptrdiff_t i = start; i >= 0; --i) {
      auto& e = entries_[static_cast<std::size_t>(i)];
      if (e.output->grad.size() == 0) continue;
      e.backward(e.output->grad);
    }
    entries_.clear();
    consumed_ = true;
  }

 private:
  struct Entry {
    std::shared_ptr<detail::Node<S>> output;
    Backward backward;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

template <class S>
Tape<S>*& active_tape() {
  thread_local Tape<S>* tape = nullptr;
  return tape;
}

/// Routes operations on the current thread onto `tape` for its lifetime.
template <class S>
class TapeScope {
 public:
  explicit TapeScope(Tape<S>& tape) : previous_(active_tape<S>()) { active_tape<S>() = &tape; }
  ~TapeScope() { active_tape<S>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<S>* previous_;
};

/// Suspends recording, e.g. for evaluation passes inside a training step.
template <class S>
class NoGradScope {
 public:
  NoGradScope() : previous_(active_tape<S>()) { active_tape<S>() = nullptr; }
  ~NoGradScope() { active_tape<S>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<S>* previous_;
};

namespace detail {

template <class S>
bool tracking(std::initializer_list<const Tensor<S>*> inputs) {
  if (active_tape<S>() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <class S>
void check_finite(const Tensor<S>& t, const char* op) {
  if (!finite_checks()) return;
  if (!t.values().allFinite()) {
    throw NonFiniteError(std::string("non-finite value produced by ") + op + " on shape " +
                         to_string(t.shape()));
  }
}

template <class S, class Fn>
Tensor<S> finish(const char* op, Tensor<S> out, bool track, Fn&& backward) {
  check_finite(out, op);
  if (track) {
    out.set_requires_grad(true);
    active_tape<S>()->record(out, typename Tape<S>::Backward(std::forward<Fn>(backward)));
  }
  return out;
}

inline Index normalize_axis(Index axis, Index rank) {
  Index a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return a;
}

// Splits a shape around `axis` into (outer, extent, inner) for strided loops.
struct AxisSplit {
  Index outer = 1;
  Index extent = 1;
  Index inner = 1;
};

inline AxisSplit split_at(const Shape& shape, Index axis) {
  AxisSplit s;
  for (Index i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  s.extent = shape[static_cast<std::size_t>(axis)];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) {
    s.inner *= shape[static_cast<std::size_t>(i)];
  }
  return s;
}

}  // namespace detail

}  // namespace hyperfield
